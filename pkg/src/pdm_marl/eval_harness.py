"""Replacement metrics, cost model, threshold sweep and report files."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .grp_model import QuantileSet
from .pdm_env import PdmEnv, StepOutcome

REPORT_SCHEMA = "pdm-marl/metrics-report"
REPORT_VERSION = 1

SRE_LIMIT = 30
BUCKETS = ((0, 5, 1.0), (5, 10, 2.0), (10, 20, 3.0), (20, 125, 10.0))
BUCKET_NAMES = ("(0,5]", "(5,10]", "(10,20]", "(20,125]")
UR_COST = 20.0
# scheduled stops above the top bucket edge (only reachable with uncapped RUL)
# are billed like the top bucket
OVERFLOW_COST = 10.0


class IntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class ReplacementRecord:
    engine_id: int
    rul_at_stop: int
    kind: str  # "scheduled" | "unscheduled"
    inspections: int = 0
    cycles_run: int = 0

    def __post_init__(self):
        if self.kind not in ("scheduled", "unscheduled"):
            raise IntegrityError(f"unknown record kind {self.kind!r}")
        if (self.kind == "unscheduled") != (self.rul_at_stop <= 0):
            raise IntegrityError(
                f"engine {self.engine_id}: kind {self.kind} inconsistent with rul_at_stop {self.rul_at_stop}")

    @property
    def scheduled(self) -> bool:
        return self.kind == "scheduled"


def record_from_outcome(out: StepOutcome) -> ReplacementRecord:
    i = out.info
    return ReplacementRecord(int(i["engine_id"]), int(i["rul_at_stop"]),
                             "unscheduled" if out.unscheduled else "scheduled",
                             int(i["inspections"]), int(i["cycles_run"]))


# -- policies -------------------------------------------------------------------

Policy = Callable[[np.ndarray, PdmEnv], tuple[int, int]]


def ideal_policy(state: np.ndarray, env: PdmEnv) -> tuple[int, int]:
    """Oracle with access to the true RUL: replace exactly at rho = 1."""
    rho = env.rho
    if rho == 1:
        return 1, 1
    return 0, int(min(env.d_action, max(rho - 1, 1)))


def never_replace_policy(state: np.ndarray, env: PdmEnv) -> tuple[int, int]:
    return 0, env.d_action


def run_policy(env: PdmEnv, policy: Policy, n_engines: int,
               trace: list | None = None) -> list[ReplacementRecord]:
    """Step ``policy`` until ``n_engines`` engines have been stopped. The env
    is reset first, so results depend only on its seed and pool."""
    state = env.reset()
    records: list[ReplacementRecord] = []
    while len(records) < n_engines:
        a_r, a_p = policy(state, env)
        out = env.step(int(a_r), int(a_p))
        if trace is not None:
            trace.append(out)
        if out.new_engine:
            records.append(record_from_outcome(out))
        state = out.state
    return records


# -- metrics --------------------------------------------------------------------

def bucket_of(rul: float) -> int | None:
    for i, (lo, hi, _) in enumerate(BUCKETS):
        if lo < rul <= hi:
            return i
    return None


def record_cost(rec: ReplacementRecord) -> float:
    if not rec.scheduled:
        return UR_COST
    if rec.rul_at_stop <= 0:
        raise IntegrityError(f"engine {rec.engine_id}: scheduled record with rul {rec.rul_at_stop}")
    b = bucket_of(rec.rul_at_stop)
    return BUCKETS[b][2] if b is not None else OVERFLOW_COST


def compute_cost(records: Iterable[ReplacementRecord]) -> float:
    return float(sum(record_cost(r) for r in records))


@dataclass
class MetricsReport:
    n: int
    MR: float | None
    SR: float | None
    MAR: float | None
    MIR: float | None
    MDR: float | None
    SRE: int
    UR: int
    WRE: int
    buckets: dict[str, int]
    mean_inspection_period: float | None
    total_cost: float
    cost_fraction: float | None
    undefined: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        d = asdict(self)
        d.pop("meta")
        return d


_STAT_FIELDS = ("MR", "SR", "MAR", "MIR", "MDR")


def compute_metrics(records: Sequence[ReplacementRecord], meta: dict | None = None) -> MetricsReport:
    ruls = np.array([r.rul_at_stop for r in records if r.scheduled], dtype=float)
    undefined = []
    if ruls.size:
        stats = dict(MR=float(ruls.mean()), SR=float(ruls.std()), MAR=float(ruls.max()),
                     MIR=float(ruls.min()), MDR=float(np.median(ruls)))
    else:
        stats = {k: None for k in _STAT_FIELDS}
        undefined += list(_STAT_FIELDS)
    buckets = {name: 0 for name in BUCKET_NAMES}
    for r in ruls:
        b = bucket_of(r)
        buckets[BUCKET_NAMES[b] if b is not None else BUCKET_NAMES[-1]] += 1
    inspections = sum(r.inspections for r in records)
    cycles = sum(r.cycles_run for r in records)
    if inspections:
        period = cycles / inspections
    else:
        period = None
        undefined.append("mean_inspection_period")
    cost = compute_cost(records)
    n = len(records)
    return MetricsReport(
        n=n, **stats,
        SRE=int(((ruls > 0) & (ruls <= SRE_LIMIT)).sum()),
        UR=sum(not r.scheduled for r in records),
        WRE=int((ruls > SRE_LIMIT).sum()),
        buckets=buckets,
        mean_inspection_period=period,
        total_cost=cost,
        cost_fraction=cost / (UR_COST * n) if n else None,
        undefined=undefined,
        meta=dict(meta or {}),
    )


def baseline(kind: str, n: int) -> MetricsReport:
    if n < 0:
        raise ValueError("n must be non-negative")
    if kind == "ideal":
        records = [ReplacementRecord(i + 1, 1, "scheduled") for i in range(n)]
    elif kind == "corrective":
        records = [ReplacementRecord(i + 1, 0, "unscheduled") for i in range(n)]
    else:
        raise ValueError(f"baseline kind must be 'ideal' or 'corrective', got {kind!r}")
    return compute_metrics(records, meta={"baseline": kind, "n": n})


# -- threshold sweep --------------------------------------------------------------

@dataclass
class SweepRow:
    threshold: float
    report: MetricsReport

    def as_dict(self) -> dict:
        r = self.report
        return {"threshold": self.threshold, "UR": r.UR, **r.buckets,
                "average_rul": r.MR, "total_cost": r.total_cost}


def threshold_records(rows: Sequence[tuple[QuantileSet, float]], threshold: float) -> list[ReplacementRecord]:
    """Inspect every cycle; replace at the first cycle whose predicted median
    is at or below ``threshold``. Engines that reach true RUL 0 first are
    unscheduled."""
    by_engine: dict[int, list[tuple[int, float, float]]] = {}
    for qs, rul in rows:
        by_engine.setdefault(qs.engine_id, []).append((qs.cycle, qs.q50, rul))
    records = []
    for eid in sorted(by_engine):
        seq = sorted(by_engine[eid])
        first = seq[0][0]
        stop = None
        for cycle, q50, rul in seq:
            if rul < 1:
                break
            if q50 <= threshold:
                stop = (cycle, rul)
                break
        if stop is None:
            fail_cycle = next((c for c, _, r in seq if r < 1), seq[-1][0] + 1)
            records.append(ReplacementRecord(eid, 0, "unscheduled", fail_cycle - first, fail_cycle - first))
        else:
            cycle, rul = stop
            records.append(ReplacementRecord(eid, int(round(rul)), "scheduled", cycle - first, cycle - first))
    return records


def threshold_policy_sweep(rows: Sequence[tuple[QuantileSet, float]],
                           thresholds: Sequence[float] = tuple(range(4, 16))) -> tuple[list[SweepRow], float | None]:
    """Per-threshold reports plus the smallest threshold without any UR."""
    out = [SweepRow(float(t), compute_metrics(threshold_records(rows, t), meta={"threshold": float(t)}))
           for t in thresholds]
    ur_free = next((r.threshold for r in out if r.report.UR == 0), None)
    return out, ur_free


def oracle_quantile_rows(lifespans: dict[int, int], first_cycle: int = 60, bias: float = 0.0,
                         spread: float = 0.0) -> list[tuple[QuantileSet, float]]:
    """Quantile rows from a perfect (optionally biased) predictor for engines
    failing at the given cycles."""
    rows = []
    offsets = spread * np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    for eid, life in sorted(lifespans.items()):
        for cycle in range(first_cycle, life + 1):
            rul = float(life - cycle)
            rows.append((QuantileSet.from_array(rul + bias + offsets, engine_id=eid, cycle=cycle), rul))
    return rows


# -- report files -------------------------------------------------------------------

def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def report_dict(report: MetricsReport) -> dict:
    return {"schema": REPORT_SCHEMA, "version": REPORT_VERSION,
            "metrics": {k: _clean(v) for k, v in report.metrics().items()}, "meta": report.meta}


def report_from_dict(d: dict) -> MetricsReport:
    if d.get("schema") != REPORT_SCHEMA or d.get("version") != REPORT_VERSION:
        raise ValueError(f"unsupported report schema {d.get('schema')!r} v{d.get('version')!r}")
    return MetricsReport(**d["metrics"], meta=d.get("meta", {}))


def flat_metrics(report: MetricsReport) -> dict:
    m = report.metrics()
    flat = {k: v for k, v in m.items() if k not in ("buckets", "undefined")}
    flat.update({f"bucket {k}": v for k, v in m["buckets"].items()})
    flat["undefined"] = ";".join(m["undefined"])
    return flat


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_report(report: MetricsReport, path: str | Path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix == ".csv" else "json")
    if fmt == "json":
        path.write_text(json.dumps(report_dict(report), indent=2, sort_keys=False) + "\n")
    elif fmt == "csv":
        flat = flat_metrics(report)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(flat) + ["meta"])
        w.writerow([_fmt(v) for v in flat.values()] + [json.dumps(report.meta, sort_keys=True)])
        path.write_text(buf.getvalue())
    else:
        raise ValueError(f"report format must be 'json' or 'csv', got {fmt!r}")


def read_report(path: str | Path) -> MetricsReport:
    path = Path(path)
    if path.suffix != ".csv":
        return report_from_dict(json.loads(path.read_text()))
    with open(path, newline="") as fh:
        row = next(csv.DictReader(fh))
    ints = {"n", "SRE", "UR", "WRE"}

    def parse(k, v):
        if v == "":
            return None
        return int(v) if k in ints else float(v)

    buckets = {k[len("bucket "):]: int(v) for k, v in row.items() if k.startswith("bucket ")}
    scalar = {k: parse(k, v) for k, v in row.items() if not k.startswith("bucket ") and k not in ("undefined", "meta")}
    return MetricsReport(**scalar, buckets=buckets,
                         undefined=[u for u in row["undefined"].split(";") if u],
                         meta=json.loads(row["meta"]))


def merge_reports(paths: Sequence[str | Path], out: str | Path) -> None:
    """One CSV row per report, columns in a fixed order."""
    rows = []
    for p in paths:
        rows.append({"source": Path(p).name, **flat_metrics(read_report(p))})
    header = list(rows[0]) if rows else ["source"]
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in header])


def write_sweep(path: str | Path, rows: Sequence[SweepRow], ur_free: float | None, meta: dict | None = None) -> None:
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = list(rows[0].as_dict()) + ["ur_free"] if rows else ["threshold"]
            w.writerow(header)
            for r in rows:
                d = r.as_dict()
                w.writerow([_fmt(v) for v in d.values()] + [int(r.threshold == ur_free)])
    else:
        doc = {"schema": REPORT_SCHEMA + "/sweep", "version": REPORT_VERSION,
               "smallest_ur_free_threshold": ur_free,
               "rows": [{**r.as_dict(), "report": report_dict(r.report)["metrics"]} for r in rows],
               "meta": meta or {}}
        path.write_text(json.dumps(doc, indent=2) + "\n")


def write_series(path: str | Path, rows: Sequence[dict]) -> None:
    """Plain CSV of dict rows (reward curves and similar series)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not rows:
            return
        header = list(rows[0])
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in header])
