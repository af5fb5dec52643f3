"""Fit location-scale distributions to predicted RUL quantiles and turn them
into cumulative-probability observation states."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .grp_model import QUANTILES, QuantileSet

FAMILIES = ("normal", "laplace", "cauchy")
SCALE_FLOOR = 1e-6
D_STATE = 10
HISTORY = 5
STATE_SIZE = HISTORY * D_STATE


def standard_ppf(family: str, q):
    q = np.asarray(q, dtype=float)
    if family == "normal":
        return ndtri(q)
    if family == "laplace":
        return np.where(q < 0.5, np.log(2.0 * q), -np.log(2.0 * (1.0 - q)))
    if family == "cauchy":
        return np.tan(np.pi * (q - 0.5))
    raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")


def standard_cdf(family: str, z):
    z = np.asarray(z, dtype=float)
    if family == "normal":
        return ndtr(z)
    if family == "laplace":
        return np.where(z < 0, 0.5 * np.exp(np.minimum(z, 0.0)), 1.0 - 0.5 * np.exp(-np.maximum(z, 0.0)))
    if family == "cauchy":
        return 0.5 + np.arctan(z) / np.pi
    raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")


@dataclass(frozen=True)
class RulDistribution:
    family: str
    loc: float
    scale: float
    degenerate: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def cdf(self, k):
        return standard_cdf(self.family, (np.asarray(k, dtype=float) - self.loc) / self.scale)

    def ppf(self, q):
        return self.loc + self.scale * standard_ppf(self.family, q)


def cdf(dist: RulDistribution, k):
    return dist.cdf(k)


def refit_error(values: np.ndarray, family: str, loc: float, scale: float) -> float:
    """Sum of absolute differences between fitted and given quantiles."""
    z = standard_ppf(family, QUANTILES)
    return float(np.abs(loc + scale * z - values).sum())


def _as_values(qs) -> np.ndarray:
    if isinstance(qs, QuantileSet):
        return qs.as_array()
    return np.asarray(qs, dtype=float).reshape(len(QUANTILES))


def fit_distribution(qs, family: str = "normal") -> RulDistribution:
    """Fix the location at the median and choose the scale minimizing the
    summed absolute quantile error.

    The objective is convex and piecewise linear in the scale, so after the
    least-squares starting point the refinement only needs to compare the
    objective at its breakpoints.
    """
    values = _as_values(qs)
    loc = float(values[2])
    z = standard_ppf(family, QUANTILES)
    dev = values - loc
    off = np.abs(z) > 1e-12
    if np.all(np.abs(dev) <= 1e-12):
        return RulDistribution(family, loc, SCALE_FLOOR, degenerate=True)
    scale0 = float(dev[off] @ z[off] / (z[off] @ z[off]))
    candidates = [max(scale0, SCALE_FLOOR)]
    candidates += [max(float(b), SCALE_FLOOR) for b in dev[off] / z[off]]
    errors = [refit_error(values, family, loc, c) for c in candidates]
    best = candidates[0]
    best_err = errors[0]
    for c, e in zip(candidates[1:], errors[1:]):
        if e < best_err:
            best, best_err = c, e
    return RulDistribution(family, loc, best, degenerate=False)


@dataclass(frozen=True)
class FitReport:
    scales: dict[str, float]
    errors: dict[str, float]

    @property
    def best(self) -> str:
        # ties (within 1e-12) resolve to the earlier family, so Normal wins
        best = FAMILIES[0]
        for fam in FAMILIES[1:]:
            if self.errors[fam] < self.errors[best] - 1e-12:
                best = fam
        return best


def compare_families(qs) -> FitReport:
    values = _as_values(qs)
    scales, errors = {}, {}
    for fam in FAMILIES:
        dist = fit_distribution(values, fam)
        scales[fam] = dist.scale
        errors[fam] = 0.0 if dist.degenerate else refit_error(values, fam, dist.loc, dist.scale)
    return FitReport(scales=scales, errors=errors)


def cumulative_block(dist: RulDistribution, d_state: int = D_STATE) -> np.ndarray:
    """P(RUL <= k) for k = 1..d_state."""
    return np.clip(dist.cdf(np.arange(1, d_state + 1, dtype=float)), 0.0, 1.0)


class StateError(ValueError):
    pass


def stack_blocks(blocks: Sequence[np.ndarray], history: int = HISTORY) -> np.ndarray:
    """Concatenate the most recent ``history`` blocks, oldest first, padding
    early life by repeating the oldest available block."""
    blocks = [b for b in blocks if b is not None]
    if not blocks:
        raise StateError("no fitted distribution available for the current cycle")
    blocks = list(blocks[-history:])
    while len(blocks) < history:
        blocks.insert(0, blocks[0])
    return np.concatenate(blocks)


def build_state(dists: Sequence[RulDistribution | None], d_state: int = D_STATE, history: int = HISTORY) -> np.ndarray:
    """Observation for the newest cycle in ``dists`` (ordered oldest to newest)."""
    if not dists or dists[-1] is None:
        raise StateError("no fitted distribution at the current cycle")
    return stack_blocks([None if d is None else cumulative_block(d, d_state) for d in dists], history)


# -- CSV interfaces -----------------------------------------------------------

QUANTILE_HEADER = ["engine_id", "cycle", "q10", "q30", "q50", "q70", "q90", "true_rul"]
STATE_HEADER = ["engine_id", "cycle", "true_rul"] + [f"p{k}" for k in range(1, D_STATE + 1)]


def read_quantile_csv(path: str | Path) -> list[tuple[QuantileSet, float]]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            qs = QuantileSet(*(float(row[k]) for k in ("q10", "q30", "q50", "q70", "q90")),
                             engine_id=int(row["engine_id"]), cycle=int(row["cycle"]))
            out.append((qs, float(row["true_rul"])))
    return out


def write_quantile_csv(path: str | Path, rows: list[tuple[QuantileSet, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(QUANTILE_HEADER)
        for qs, rul in rows:
            w.writerow([qs.engine_id, qs.cycle] + [repr(float(v)) for v in qs.as_array()] + [repr(float(rul))])


def states_from_quantiles(rows: list[tuple[QuantileSet, float]], family: str = "normal") -> list[list]:
    """One state-cache row per quantile row: engine_id, cycle, true_rul, p1..p10."""
    out = []
    for qs, rul in rows:
        block = cumulative_block(fit_distribution(qs, family))
        out.append([qs.engine_id, qs.cycle, rul] + [float(v) for v in block])
    return out


def write_state_csv(path: str | Path, rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATE_HEADER)
        for r in rows:
            w.writerow([int(r[0]), int(r[1]), repr(float(r[2]))] + [repr(float(v)) for v in r[3:]])


def read_state_csv(path: str | Path) -> dict[int, dict[str, np.ndarray]]:
    """Group state-cache rows per engine: cycles, true_rul and (n, 10) blocks."""
    grouped: dict[int, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != STATE_HEADER[:3]:
            raise ValueError(f"{path}: not a state cache (header {header[:3]})")
        for row in reader:
            grouped.setdefault(int(row[0]), []).append(
                (int(row[1]), float(row[2]), [float(v) for v in row[3:]]))
    out = {}
    for eid in sorted(grouped):
        rows = sorted(grouped[eid], key=lambda r: r[0])
        out[eid] = {
            "cycles": np.array([r[0] for r in rows], dtype=np.int64),
            "true_rul": np.array([r[1] for r in rows]),
            "blocks": np.array([r[2] for r in rows]),
        }
    return out


def compare_rows(rows: list[tuple[QuantileSet, float]]) -> list[list]:
    out = []
    for qs, _ in rows:
        rep = compare_families(qs)
        out.append([qs.engine_id, qs.cycle] + [rep.scales[f] for f in FAMILIES]
                   + [rep.errors[f] for f in FAMILIES] + [rep.best])
    return out


COMPARE_HEADER = (["engine_id", "cycle"] + [f"scale_{f}" for f in FAMILIES]
                  + [f"error_{f}" for f in FAMILIES] + ["best"])
