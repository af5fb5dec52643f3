"""C-MAPSS parsing, engine splitting, condition-clustered normalization and
sliding-window sample construction."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

logger = logging.getLogger(__name__)

N_SETTINGS = 3
N_SENSORS = 21
N_SIGNALS = N_SETTINGS + N_SENSORS
N_COLUMNS = 2 + N_SIGNALS
RUL_CAP = 125.0
WINDOW = 60

# decimals per operational setting used to key condition clusters
CLUSTER_DECIMALS = (0, 2, 0)


class ParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class IntegrityError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EngineTrace:
    engine_id: int
    signals: np.ndarray  # (T, 24): 3 settings then 21 sensors
    subset_tag: str = "FD001"

    @property
    def cycles(self) -> int:
        return int(self.signals.shape[0])


@dataclass(frozen=True)
class WindowSample:
    window: np.ndarray  # (s, 24)
    rul_label: float
    handcrafted: np.ndarray  # (48,)
    engine_id: int
    end_cycle: int


@dataclass(frozen=True)
class DatasetSplit:
    train_engines: list[EngineTrace]
    test_engines: list[EngineTrace]


@dataclass
class NormalizationStats:
    """Per-cluster, per-signal z-score statistics.

    ``keys`` holds the rounded setting triple identifying each cluster; rows of
    ``mean``/``std`` are aligned with it. A ``std`` of zero marks a constant
    signal, which normalizes to 0.
    """

    keys: np.ndarray  # (C, 3)
    mean: np.ndarray  # (C, 24)
    std: np.ndarray  # (C, 24)
    decimals: tuple[int, ...] = field(default=CLUSTER_DECIMALS)

    @property
    def n_clusters(self) -> int:
        return int(self.keys.shape[0])

    def to_arrays(self, prefix: str = "norm") -> dict[str, np.ndarray]:
        return {
            f"{prefix}.keys": self.keys,
            f"{prefix}.mean": self.mean,
            f"{prefix}.std": self.std,
            f"{prefix}.decimals": np.asarray(self.decimals, dtype=np.int64),
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str = "norm") -> "NormalizationStats":
        return cls(
            keys=np.asarray(arrays[f"{prefix}.keys"], dtype=float),
            mean=np.asarray(arrays[f"{prefix}.mean"], dtype=float),
            std=np.asarray(arrays[f"{prefix}.std"], dtype=float),
            decimals=tuple(int(d) for d in arrays[f"{prefix}.decimals"]),
        )


def parse_cmapss(text_stream: TextIO | Iterable[str], subset_tag: str = "FD001") -> list[EngineTrace]:
    """Parse a whitespace-separated C-MAPSS run-to-failure file.

    Each line holds unit id, cycle, 3 operational settings and 21 sensors.
    Returns one trace per unit, ordered by unit id.
    """
    rows: dict[int, list[tuple[int, list[float]]]] = {}
    for line_no, line in enumerate(text_stream, start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != N_COLUMNS:
            raise ParseError(line_no, f"expected {N_COLUMNS} columns, got {len(tokens)}")
        try:
            values = [float(tok) for tok in tokens]
        except ValueError as exc:
            raise ParseError(line_no, f"non-numeric token ({exc})") from None
        unit, cycle = values[0], values[1]
        if unit != int(unit) or cycle != int(cycle) or unit < 1:
            raise ParseError(line_no, "unit id and cycle must be positive integers")
        rows.setdefault(int(unit), []).append((int(cycle), values[2:]))

    traces = []
    for unit in sorted(rows):
        entries = sorted(rows[unit], key=lambda e: e[0])
        cycles = [c for c, _ in entries]
        if cycles != list(range(1, len(cycles) + 1)):
            raise IntegrityError(f"engine {unit}: cycles are not contiguous from 1")
        signals = np.array([v for _, v in entries], dtype=float)
        traces.append(EngineTrace(engine_id=unit, signals=signals, subset_tag=subset_tag))
    return traces


def load_cmapss(path: str | Path, subset_tag: str | None = None) -> list[EngineTrace]:
    path = Path(path)
    if subset_tag is None:
        subset_tag = path.stem.split("_")[-1]
    with open(path) as fh:
        return parse_cmapss(fh, subset_tag=subset_tag)


def split_engines(traces: list[EngineTrace], fraction: float = 0.5) -> DatasetSplit:
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must lie in (0, 1), got {fraction}")
    # floor, not ceil: FD004's 249 engines give 124 training engines
    n_train = max(1, math.floor(fraction * len(traces))) if traces else 0
    return DatasetSplit(train_engines=list(traces[:n_train]), test_engines=list(traces[n_train:]))


def _cluster_keys(settings: np.ndarray, decimals: tuple[int, ...]) -> np.ndarray:
    keys = np.column_stack([np.round(settings[:, j], d) for j, d in enumerate(decimals)])
    return keys + 0.0  # folds -0.0 into 0.0


def fit_normalization(train_engines: list[EngineTrace], decimals: tuple[int, ...] = CLUSTER_DECIMALS) -> NormalizationStats:
    data = np.concatenate([e.signals for e in train_engines], axis=0)
    keys = _cluster_keys(data[:, :N_SETTINGS], decimals)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    mean = np.zeros((len(uniq), N_SIGNALS))
    std = np.zeros((len(uniq), N_SIGNALS))
    for c in range(len(uniq)):
        block = data[inverse == c]
        mu = block.mean(axis=0)
        sd = block.std(axis=0)
        constant = sd <= 1e-9 * (1.0 + np.abs(mu))
        sd[constant] = 0.0
        mean[c], std[c] = mu, sd
    return NormalizationStats(keys=uniq, mean=mean, std=std, decimals=tuple(decimals))


def apply_normalization(trace: EngineTrace, stats: NormalizationStats) -> EngineTrace:
    keys = _cluster_keys(trace.signals[:, :N_SETTINGS], stats.decimals)
    dist = np.abs(keys[:, None, :] - stats.keys[None, :, :]).sum(axis=2)
    idx = dist.argmin(axis=1)
    unseen = dist[np.arange(len(idx)), idx] > 0
    if unseen.any():
        logger.warning(
            "engine %d: %d rows fall in unseen operating conditions; using nearest cluster",
            trace.engine_id, int(unseen.sum()),
        )
    mu = stats.mean[idx]
    sd = stats.std[idx]
    safe = np.where(sd > 0, sd, 1.0)
    out = np.where(sd > 0, (trace.signals - mu) / safe, 0.0)
    return EngineTrace(engine_id=trace.engine_id, signals=out, subset_tag=trace.subset_tag)


def handcrafted_features(window: np.ndarray) -> np.ndarray:
    """Per-column mean followed by per-column OLS slope against 0..s-1."""
    window = np.asarray(window, dtype=float)
    s = window.shape[0]
    t = np.arange(s, dtype=float)
    tc = t - t.mean()
    means = window.mean(axis=0)
    denom = float(tc @ tc)
    if denom == 0.0:
        slopes = np.zeros(window.shape[1])
    else:
        slopes = tc @ (window - means) / denom
    return np.concatenate([means, slopes])


def _batch_handcrafted(windows: np.ndarray) -> np.ndarray:
    s = windows.shape[1]
    tc = np.arange(s, dtype=float) - (s - 1) / 2.0
    means = windows.mean(axis=1)
    denom = float(tc @ tc)
    if denom == 0.0:
        slopes = np.zeros_like(means)
    else:
        slopes = np.einsum("t,ntc->nc", tc, windows - means[:, None, :]) / denom
    return np.concatenate([means, slopes], axis=1)


def window_count(cycles: int, s: int = WINDOW, p: int = 1) -> int:
    if cycles < s:
        return 0
    return (cycles - s) // p + 1


def make_windows(trace: EngineTrace, s: int = WINDOW, p: int = 1, cap: float = RUL_CAP) -> list[WindowSample]:
    arrays = window_arrays([trace], s=s, p=p, cap=cap)
    return [
        WindowSample(
            window=arrays.windows[i],
            rul_label=float(arrays.labels[i]),
            handcrafted=arrays.handcrafted[i],
            engine_id=int(arrays.engine_ids[i]),
            end_cycle=int(arrays.end_cycles[i]),
        )
        for i in range(len(arrays))
    ]


@dataclass
class WindowArrays:
    """Columnar form of many :class:`WindowSample` records."""

    windows: np.ndarray  # (N, s, 24)
    labels: np.ndarray  # (N,) capped
    handcrafted: np.ndarray  # (N, 48)
    engine_ids: np.ndarray  # (N,)
    end_cycles: np.ndarray  # (N,)
    true_rul: np.ndarray  # (N,) uncapped

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, mask: np.ndarray) -> "WindowArrays":
        return WindowArrays(*(getattr(self, f)[mask] for f in
                              ("windows", "labels", "handcrafted", "engine_ids", "end_cycles", "true_rul")))


def window_arrays(traces: Iterable[EngineTrace], s: int = WINDOW, p: int = 1, cap: float = RUL_CAP) -> WindowArrays:
    windows, engine_ids, end_cycles, true_rul = [], [], [], []
    for trace in traces:
        T = trace.cycles
        if T < s:
            logger.warning("engine %d has %d cycles < window %d; skipped", trace.engine_id, T, s)
            continue
        n = window_count(T, s, p)
        starts = np.arange(n) * p
        idx = starts[:, None] + np.arange(s)[None, :]
        windows.append(trace.signals[idx])
        engine_ids.append(np.full(n, trace.engine_id, dtype=np.int64))
        end_cycles.append(starts + s)
        true_rul.append(T - s - starts)
    if not windows:
        return WindowArrays(np.zeros((0, s, N_SIGNALS)), np.zeros(0), np.zeros((0, 2 * N_SIGNALS)),
                            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))
    w = np.concatenate(windows, axis=0)
    rul = np.concatenate(true_rul).astype(float)
    return WindowArrays(
        windows=w,
        labels=np.minimum(rul, cap),
        handcrafted=_batch_handcrafted(w),
        engine_ids=np.concatenate(engine_ids),
        end_cycles=np.concatenate(end_cycles).astype(np.int64),
        true_rul=rul,
    )


# -- window cache -----------------------------------------------------------

def _cache_header(s: int) -> list[str]:
    hand = [f"mean_{j}" for j in range(1, N_SIGNALS + 1)] + [f"slope_{j}" for j in range(1, N_SIGNALS + 1)]
    win = [f"w_{t}_{j}" for t in range(s) for j in range(1, N_SIGNALS + 1)]
    return ["engine_id", "end_cycle", "rul_label"] + hand + win


def write_window_cache(path: str | Path, samples: list[WindowSample]) -> None:
    """Write samples as CSV; floats use shortest round-trip repr so reads are bit-exact."""
    s = samples[0].window.shape[0] if samples else WINDOW
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_cache_header(s))
        for smp in samples:
            writer.writerow(
                [smp.engine_id, smp.end_cycle, repr(float(smp.rul_label))]
                + [repr(float(v)) for v in smp.handcrafted]
                + [repr(float(v)) for v in smp.window.ravel()]
            )


def read_window_cache(path: str | Path) -> list[WindowSample]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        s = (len(header) - 3 - 2 * N_SIGNALS) // N_SIGNALS
        out = []
        for row in reader:
            vals = np.array([float(v) for v in row[3:]])
            out.append(WindowSample(
                window=vals[2 * N_SIGNALS:].reshape(s, N_SIGNALS),
                rul_label=float(row[2]),
                handcrafted=vals[:2 * N_SIGNALS],
                engine_id=int(row[0]),
                end_cycle=int(row[1]),
            ))
    return out


# -- synthetic run-to-failure data -----------------------------------------

def synthetic_cmapss(n_engines: int = 100, seed: int = 0, min_life: int = 128, max_life: int = 362,
                     n_conditions: int = 1) -> str:
    """Generate C-MAPSS-formatted text with exponential sensor degradation.

    Useful when the NASA files are not available: the layout, column count and
    run-to-failure semantics match the real training files.
    """
    rng = np.random.default_rng(seed)
    conditions = np.array([[0.0, 0.0, 100.0], [10.0, 0.25, 100.0], [20.0, 0.7, 100.0],
                           [25.0, 0.62, 60.0], [35.0, 0.84, 100.0], [42.0, 0.84, 100.0]])[:n_conditions]
    base = rng.uniform(5.0, 600.0, size=N_SENSORS)
    sens = rng.uniform(0.2, 1.0, size=N_SENSORS) * rng.choice([-1.0, 1.0], size=N_SENSORS)
    noise = rng.uniform(0.1, 0.4, size=N_SENSORS)
    informative = np.ones(N_SENSORS, dtype=bool)
    informative[rng.choice(N_SENSORS, size=7, replace=False)] = False
    cond_shift = rng.normal(0.0, 20.0, size=(len(conditions), N_SENSORS))
    buf = io.StringIO()
    for unit in range(1, n_engines + 1):
        life = int(rng.integers(min_life, max_life + 1))
        rate = rng.uniform(2.5, 4.0)
        offset = rng.normal(0.0, 0.3, size=N_SENSORS)
        for cycle in range(1, life + 1):
            frac = cycle / life
            health = (np.exp(rate * frac) - 1.0) / (np.exp(rate) - 1.0)
            c = int(rng.integers(len(conditions))) if n_conditions > 1 else 0
            settings = conditions[c] + rng.normal(0.0, [0.002, 0.0002, 0.0])
            sensors = base + cond_shift[c] + offset + noise * rng.standard_normal(N_SENSORS)
            sensors = sensors + np.where(informative, sens * 4.0 * health, 0.0)
            vals = [f"{unit}", f"{cycle}"] + [f"{v:.4f}" for v in settings] + [f"{v:.4f}" for v in sensors]
            buf.write(" ".join(vals) + "\n")
    return buf.getvalue()
