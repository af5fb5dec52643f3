"""Replacement/inspection decision process over a pool of run-to-failure engines.

The true RUL stays hidden from the agents; they only see cumulative-probability
states. Agent 1 decides whether to replace, agent 2 picks the gap (1..50 cycles)
to the next inspection.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dist_fit import D_STATE, HISTORY, SCALE_FLOOR, read_state_csv, standard_cdf

logger = logging.getLogger(__name__)

FIRST_CYCLE = 60
D_ACTION = 50


class ConfigError(ValueError):
    pass


@dataclass
class RewardConfig:
    T1: float = 20
    T2: float = 5
    c0: float = 5.0
    c1: float = 0.1
    c2: float = 1.0
    c3: float = 2.0
    c4: float = 500.0
    beta1: float = 1.0
    beta2: float = 1.0

    def __post_init__(self):
        if not self.T1 > self.T2 >= 1:
            raise ConfigError("need T1 > T2 >= 1")
        if not (self.c2 > self.c1 > 0 and self.c3 > self.c2):
            raise ConfigError("need c3 > c2 > c1 > 0")
        if self.c0 < 0 or self.c4 < 10 * self.c3:
            raise ConfigError("need c0 >= 0 and c4 >= 10 * c3")


def reward_replace(rho: float, t: float, a_r: int, cfg: RewardConfig) -> float:
    if a_r == 1:
        if rho > cfg.T1:
            return cfg.c1 * t - cfg.c0
        if rho > cfg.T2:
            return cfg.c2 * t - cfg.c0
        return -cfg.c3 * t - cfg.c0
    if a_r == 0:
        return -cfg.c4 if rho <= 0 else 0.0
    raise ValueError(f"replacement action must be 0 or 1, got {a_r!r}")


def reward_inspect(rho_next: float, a_p: int, cfg: RewardConfig) -> float:
    if rho_next > cfg.T1:
        return cfg.c1 * a_p
    if rho_next > cfg.T2:
        return cfg.c2 * a_p
    return -cfg.c3 * a_p


@dataclass
class EngineStates:
    """Per-cycle probability blocks for one engine.

    ``blocks[i]`` is P(RUL <= k), k = 1..10, at cycle ``first_cycle + i``.
    """

    engine_id: int
    lifespan: int
    first_cycle: int
    blocks: np.ndarray

    @property
    def last_cycle(self) -> int:
        return self.first_cycle + len(self.blocks) - 1

    def state(self, cycle: int, history: int = HISTORY) -> np.ndarray:
        cycle = min(cycle, self.last_cycle)
        hi = cycle - self.first_cycle + 1
        if hi <= 0:
            raise ValueError(f"engine {self.engine_id}: no state at cycle {cycle}")
        lo = max(0, hi - history)
        chunk = self.blocks[lo:hi]
        if len(chunk) < history:
            chunk = np.concatenate([np.repeat(chunk[:1], history - len(chunk), axis=0), chunk])
        return chunk.reshape(-1)


def engines_from_state_cache(path: str | Path) -> list[EngineStates]:
    out = []
    for eid, rec in read_state_csv(path).items():
        cycles = rec["cycles"]
        if np.any(np.diff(cycles) != 1):
            raise ValueError(f"engine {eid}: state cache cycles are not contiguous")
        lifespan = int(round(cycles[-1] + rec["true_rul"][-1]))
        out.append(EngineStates(eid, lifespan, int(cycles[0]), rec["blocks"]))
    return out


def synthetic_engines(n: int, lifespan_range: tuple[int, int] = (150, 350), sigma_noise: float = 0.0,
                      seed: int = 0, id_offset: int = 0, d_state: int = D_STATE) -> list[EngineStates]:
    """Oracle engines: each cycle's RUL belief is N(rho + eps, sigma) with
    eps ~ N(0, sigma); sigma = 0 gives a perfect predictor."""
    rng = np.random.default_rng(seed)
    ks = np.arange(1, d_state + 1, dtype=float)
    scale = max(float(sigma_noise), SCALE_FLOOR)
    out = []
    for i in range(n):
        life = int(rng.integers(lifespan_range[0], lifespan_range[1] + 1))
        cycles = np.arange(1, life + 1)
        rho = life - cycles
        loc = rho + (rng.normal(0.0, sigma_noise, size=len(cycles)) if sigma_noise > 0 else 0.0)
        blocks = standard_cdf("normal", (ks[None, :] - loc[:, None]) / scale)
        out.append(EngineStates(id_offset + i + 1, life, 1, np.clip(blocks, 0.0, 1.0)))
    return out


@dataclass
class StepOutcome:
    state: np.ndarray
    r_replace: float
    r_inspect: float
    reward: float
    replaced: bool
    unscheduled: bool
    new_engine: bool
    info: dict = field(default_factory=dict)

    @property
    def continued(self) -> bool:
        return not (self.replaced or self.unscheduled)


class PdmEnv:
    """Single-threaded environment owning its own RNG stream.

    In ``train`` mode the engine pool is reshuffled every pass; in ``eval``
    mode engines are served once each in pool order, then the pool wraps.
    """

    def __init__(self, engines: list[EngineStates], reward: RewardConfig | None = None,
                 mode: str = "train", seed: int = 0, first_cycle: int = FIRST_CYCLE,
                 d_action: int = D_ACTION):
        if mode not in ("train", "eval"):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.first_cycle = first_cycle
        usable = []
        for e in engines:
            if e.lifespan < first_cycle or e.first_cycle > first_cycle:
                logger.warning("engine %d cannot serve a decision point at cycle %d; skipped",
                               e.engine_id, first_cycle)
                continue
            usable.append(e)
        if not usable:
            raise ConfigError("engine pool is empty")
        self.engines = usable
        self.reward_cfg = reward or RewardConfig()
        self.mode = mode
        self.d_action = d_action
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._order: list[int] = []
        self._cursor = 0
        self.engines_served = 0
        self.engine: EngineStates | None = None
        self.t = 0
        self.steps = 0

    # -- bookkeeping --------------------------------------------------------

    @property
    def rho(self) -> int:
        return self.engine.lifespan - self.t

    def _next_engine(self) -> None:
        if self._cursor >= len(self._order):
            idx = np.arange(len(self.engines))
            self._order = list(self.rng.permutation(idx)) if self.mode == "train" else list(idx)
            self._cursor = 0
        self.engine = self.engines[self._order[self._cursor]]
        self._cursor += 1
        self.engines_served += 1
        self.t = self.first_cycle
        self._inspections = 0

    def observe(self) -> np.ndarray:
        return self.engine.state(self.t)

    def reset(self) -> np.ndarray:
        self.rng = np.random.default_rng(self.seed)
        self._order, self._cursor = [], 0
        self.engines_served = 0
        self.steps = 0
        self._next_engine()
        return self.observe()

    # -- transition ---------------------------------------------------------

    def step(self, a_r: int, a_p: int) -> StepOutcome:
        if a_r not in (0, 1):
            raise ValueError(f"replacement action must be 0 or 1, got {a_r!r}")
        if not 1 <= a_p <= self.d_action:
            raise ValueError(f"inspection gap must lie in 1..{self.d_action}, got {a_p!r}")
        cfg = self.reward_cfg
        rho, t = self.rho, self.t
        info = {"engine_id": self.engine.engine_id, "cycle": t, "rho": rho, "gap": a_p,
                "a_r": a_r, "forced": False}
        replaced = unscheduled = False
        if rho <= 0:
            # failure detected at this inspection: the UR charge is forced
            r_r, r_p = -cfg.c4, 0.0
            unscheduled = True
            info["forced"] = True
        elif a_r == 1:
            r_r, r_p = reward_replace(rho, t, 1, cfg), 0.0
            replaced = True
        else:
            r_r = reward_replace(rho, t, 0, cfg)
            r_p = reward_inspect(rho - a_p, a_p, cfg)
            self.t = t + a_p
            self._inspections += 1
        self.steps += 1
        if replaced or unscheduled:
            info["rul_at_stop"] = max(rho, 0)
            info["inspections"] = self._inspections
            info["cycles_run"] = t - self.first_cycle
            self._next_engine()
        reward = cfg.beta1 * r_r + cfg.beta2 * r_p
        return StepOutcome(self.observe(), r_r, r_p, reward, replaced, unscheduled,
                           replaced or unscheduled, info)


# -- run log ------------------------------------------------------------------

RUN_LOG_HEADER = ["engine_id", "cycle", "rho", "a_r", "a_p", "r_r", "r_p", "R", "replaced", "unscheduled", "forced"]


def run_log_row(out: StepOutcome) -> list:
    i = out.info
    return [i["engine_id"], i["cycle"], i["rho"], i["a_r"], i["gap"], repr(float(out.r_replace)),
            repr(float(out.r_inspect)), repr(float(out.reward)), int(out.replaced), int(out.unscheduled),
            int(i["forced"])]


def write_run_log(path: str | Path, outcomes: list[StepOutcome]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RUN_LOG_HEADER)
        for out in outcomes:
            w.writerow(run_log_row(out))


def reward_config_dict(cfg: RewardConfig) -> dict:
    return asdict(cfg)
