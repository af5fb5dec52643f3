"""GRU + temporal attention + handcrafted-feature fusion network emitting five
RUL quantiles, trained with the multi-quantile pinball loss.

Everything is plain float64 numpy with hand-written backward passes; the
gradient-check tests compare them against central finite differences.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data_ingest import (
    RUL_CAP,
    DatasetSplit,
    NormalizationStats,
    WindowArrays,
    apply_normalization,
    fit_normalization,
    window_arrays,
)

logger = logging.getLogger(__name__)

QUANTILES = np.array([0.1, 0.3, 0.5, 0.7, 0.9])
N_HANDCRAFTED = 48
GRU_KEYS = ("W_r", "U_r", "W_z", "U_z", "W", "U")


class ModelStateError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuantileSet:
    q10: float
    q30: float
    q50: float
    q70: float
    q90: float
    engine_id: int = 0
    cycle: int = 0

    def as_array(self) -> np.ndarray:
        return np.array([self.q10, self.q30, self.q50, self.q70, self.q90])

    @classmethod
    def from_array(cls, values, engine_id: int = 0, cycle: int = 0) -> "QuantileSet":
        v = [float(x) for x in values]
        return cls(*v, engine_id=engine_id, cycle=cycle)


@dataclass
class GrpTrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 20
    patience: int = 5
    dropout: float = 0.2
    hidden_size: int = 64
    fusion_size: int = 128
    seed: int = 0
    window: int = 60
    val_last: int = 50
    # exclude validation windows from the training set
    holdout_validation: bool = False

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning_rate must be >= 0, batch_size and max_epochs >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.hidden_size < 1 or self.fusion_size < 1 or self.window < 1:
            raise ValueError("layer sizes and window must be positive")


# -- primitives -------------------------------------------------------------

def gru_step(h_prev: np.ndarray, x: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    """One GRU update; works on a single vector or a batch of row vectors."""
    W_r, U_r, W_z, U_z, W, U = (params[k] for k in GRU_KEYS)
    if h_prev.shape[-1] != W_r.shape[0] or x.shape[-1] != U_r.shape[1]:
        raise ValueError(f"dimension mismatch: h {h_prev.shape}, x {x.shape}, params h={W_r.shape[0]} d={U_r.shape[1]}")
    r = nn.sigmoid(h_prev @ W_r.T + x @ U_r.T)
    z = nn.sigmoid(h_prev @ W_z.T + x @ U_z.T)
    cand = np.tanh((r * h_prev) @ W.T + x @ U.T)
    return (1.0 - z) * h_prev + z * cand


def gru_sequence(window: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    """Run a (s, d) window from h_0 = 0; returns H with shape (h, s)."""
    h = np.zeros(params["W_r"].shape[0])
    cols = []
    for x in np.asarray(window, dtype=float):
        h = gru_step(h, x, params)
        cols.append(h)
    return np.stack(cols, axis=1)


def attention_weights(H: np.ndarray, W_a: np.ndarray, b_a: np.ndarray) -> np.ndarray:
    """Softmax over time of tanh(W_a h_i + b_a) for every feature row h_i of H (h, s)."""
    scores = np.tanh(H @ W_a.T + b_a)
    return nn.softmax(scores, axis=-1)


def attention(H: np.ndarray, W_a: np.ndarray, b_a: np.ndarray) -> np.ndarray:
    """Attention-weighted temporal pooling: sum over time of H * A."""
    return (H * attention_weights(H, W_a, b_a)).sum(axis=-1)


def repair_quantiles(raw: np.ndarray) -> np.ndarray:
    """Sort ascending along the last axis and clamp below at zero."""
    return np.maximum(np.sort(np.asarray(raw, dtype=float), axis=-1), 0.0)


def pinball_loss(y, y_hat, q):
    diff = np.asarray(y, dtype=float) - np.asarray(y_hat, dtype=float)
    return q * np.maximum(0.0, diff) + (1.0 - q) * np.maximum(0.0, -diff)


def total_loss(y: np.ndarray, raw: np.ndarray, levels: np.ndarray = QUANTILES) -> float:
    """Mean over samples of the summed pinball loss across quantile levels."""
    y = np.asarray(y, dtype=float).reshape(-1)
    raw = np.asarray(raw, dtype=float).reshape(len(y), -1)
    if len(y) == 0:
        raise ValueError("total_loss needs a non-empty batch")
    return float(pinball_loss(y[:, None], raw, levels[None, :]).sum(axis=1).mean())


def total_loss_grad(y: np.ndarray, raw: np.ndarray, levels: np.ndarray = QUANTILES) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(-1, 1)
    g = np.where(y > raw, -levels[None, :], np.where(y < raw, 1.0 - levels[None, :], 0.0))
    return g / y.shape[0]


# -- network ----------------------------------------------------------------

@dataclass
class _Cache:
    X: np.ndarray
    steps: list
    HT: np.ndarray
    scores: np.ndarray
    A: np.ndarray
    fused: np.ndarray
    a1: np.ndarray
    mask: np.ndarray
    d: np.ndarray


@dataclass
class GRPModel:
    hidden_size: int = 64
    window: int = 60
    input_size: int = 24
    fusion_size: int = 128
    dropout: float = 0.2
    output_scale: float = RUL_CAP
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, seed: int = 0, **kwargs) -> "GRPModel":
        model = cls(**kwargs)
        rng = np.random.default_rng(seed)
        h, d, s, f = model.hidden_size, model.input_size, model.window, model.fusion_size
        p = {}
        for gate in ("r", "z", ""):
            sfx = f"_{gate}" if gate else ""
            p[f"W{sfx}"] = nn.uniform_init(rng, (h, h), h + d)
            p[f"U{sfx}"] = nn.uniform_init(rng, (h, d), h + d)
        p["att_W"] = nn.uniform_init(rng, (s, s), s)
        p["att_b"] = nn.uniform_init(rng, (s,), s)
        p["fc1_W"] = nn.uniform_init(rng, (f, h + N_HANDCRAFTED), h + N_HANDCRAFTED)
        p["fc1_b"] = nn.uniform_init(rng, (f,), h + N_HANDCRAFTED)
        p["fc2_W"] = nn.uniform_init(rng, (len(QUANTILES), f), f)
        p["fc2_b"] = nn.uniform_init(rng, (len(QUANTILES),), f)
        model.params = p
        return model

    def config(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "params"}

    def check_finite(self) -> None:
        if not self.params:
            raise ModelStateError("model has no parameters; train or load it first")
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise ModelStateError(f"parameter {k} contains non-finite values")

    # forward / backward over a batch -------------------------------------

    def forward(self, X: np.ndarray, hand: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, _Cache]:
        p = self.params
        B, s, _ = X.shape
        h_dim = self.hidden_size
        W_rz = np.concatenate([p["W_r"], p["W_z"]], axis=0)
        XU = X @ np.concatenate([p["U_r"], p["U_z"], p["U"]], axis=0).T  # (B, s, 3h)
        h = np.zeros((B, h_dim))
        steps, Hs = [], []
        for t in range(s):
            pre = h @ W_rz.T + XU[:, t, :2 * h_dim]
            gates = nn.sigmoid(pre)
            r, z = gates[:, :h_dim], gates[:, h_dim:]
            c = np.tanh((r * h) @ p["W"].T + XU[:, t, 2 * h_dim:])
            steps.append((h, r, z, c))
            h = (1.0 - z) * h + z * c
            Hs.append(h)
        HT = np.stack(Hs, axis=2)  # (B, h, s): feature rows over time
        scores = np.tanh(HT @ p["att_W"].T + p["att_b"])
        A = nn.softmax(scores, axis=-1)
        ctx = (HT * A).sum(axis=-1)
        fused = np.concatenate([ctx, hand], axis=1)
        a1 = fused @ p["fc1_W"].T + p["fc1_b"]
        f1 = np.maximum(a1, 0.0)
        if train and self.dropout > 0:
            if rng is None:
                raise ValueError("training-mode forward needs an rng for dropout")
            mask = (rng.random(f1.shape) >= self.dropout) / (1.0 - self.dropout)
        else:
            mask = np.ones_like(f1)
        d = f1 * mask
        raw = (d @ p["fc2_W"].T + p["fc2_b"]) * self.output_scale
        return raw, _Cache(X, steps, HT, scores, A, fused, a1, mask, d)

    def backward(self, cache: _Cache, draw: np.ndarray) -> dict[str, np.ndarray]:
        p = self.params
        h_dim = self.hidden_size
        g = {}
        dout = draw * self.output_scale
        g["fc2_W"] = dout.T @ cache.d
        g["fc2_b"] = dout.sum(axis=0)
        da1 = (dout @ p["fc2_W"]) * cache.mask * (cache.a1 > 0)
        g["fc1_W"] = da1.T @ cache.fused
        g["fc1_b"] = da1.sum(axis=0)
        dctx = (da1 @ p["fc1_W"])[:, :h_dim]

        A, HT, scores = cache.A, cache.HT, cache.scores
        dO = np.broadcast_to(dctx[:, :, None], HT.shape)
        dHT = dO * A
        dA = dO * HT
        dscores = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
        dpre = dscores * (1.0 - scores ** 2)
        g["att_W"] = np.einsum("bik,bij->kj", dpre, HT)
        g["att_b"] = dpre.sum(axis=(0, 1))
        dHT = dHT + dpre @ p["att_W"]

        for k in GRU_KEYS:
            g[k] = np.zeros_like(p[k])
        X = cache.X
        dh_next = np.zeros((X.shape[0], h_dim))
        for t in range(X.shape[1] - 1, -1, -1):
            h, r, z, c = cache.steps[t]
            x = X[:, t, :]
            dh = dHT[:, :, t] + dh_next
            dz = dh * (c - h)
            dc = dh * z
            dh_prev = dh * (1.0 - z)
            dac = dc * (1.0 - c * c)
            rh = r * h
            g["W"] += dac.T @ rh
            g["U"] += dac.T @ x
            drh = dac @ p["W"]
            dr = drh * h
            dh_prev += drh * r
            daz = dz * z * (1.0 - z)
            dar = dr * r * (1.0 - r)
            g["W_z"] += daz.T @ h
            g["U_z"] += daz.T @ x
            g["W_r"] += dar.T @ h
            g["U_r"] += dar.T @ x
            dh_prev += daz @ p["W_z"] + dar @ p["W_r"]
            dh_next = dh_prev
        return g

    def loss_and_grad(self, X, hand, y, train: bool = False, rng=None) -> tuple[float, dict[str, np.ndarray]]:
        raw, cache = self.forward(X, hand, train=train, rng=rng)
        return total_loss(y, raw), self.backward(cache, total_loss_grad(y, raw))

    # inference -----------------------------------------------------------

    def predict_raw(self, X: np.ndarray, hand: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        self.check_finite()
        out = [self.forward(X[i:i + batch_size], hand[i:i + batch_size])[0]
               for i in range(0, len(X), batch_size)]
        if not out:
            return np.zeros((0, len(QUANTILES)))
        return np.concatenate(out, axis=0)

    def predict(self, X: np.ndarray, hand: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        return repair_quantiles(self.predict_raw(X, hand, batch_size))

    def predict_quantiles(self, window: np.ndarray, handcrafted: np.ndarray,
                          engine_id: int = 0, cycle: int = 0) -> QuantileSet:
        q = self.predict(np.asarray(window, float)[None], np.asarray(handcrafted, float)[None])[0]
        return QuantileSet.from_array(q, engine_id=engine_id, cycle=cycle)


# -- training ---------------------------------------------------------------

@dataclass
class GrpResult:
    model: GRPModel
    stats: NormalizationStats | None
    history: list[dict]
    config: GrpTrainConfig
    best_epoch: int = 0
    meta: dict = field(default_factory=dict)


def prepare_windows(split: DatasetSplit, window: int = 60) -> tuple[NormalizationStats, WindowArrays, WindowArrays]:
    stats = fit_normalization(split.train_engines)
    train = window_arrays([apply_normalization(e, stats) for e in split.train_engines], s=window)
    test = window_arrays([apply_normalization(e, stats) for e in split.test_engines], s=window)
    return stats, train, test


def rmse(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def fit_grp(train: WindowArrays, config: GrpTrainConfig, val: WindowArrays | None = None,
            model: GRPModel | None = None) -> GrpResult:
    """Minibatch Adam on the pinball objective with RMSE-based early stopping."""
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = GRPModel.init(seed=config.seed, hidden_size=config.hidden_size, window=train.windows.shape[1],
                              input_size=train.windows.shape[2], fusion_size=config.fusion_size,
                              dropout=config.dropout)
    opt = nn.Adam(model.params, lr=config.learning_rate)
    history: list[dict] = []
    best_rmse, best_epoch, since_best = math.inf, 0, 0
    best_params = {k: v.copy() for k, v in model.params.items()}
    n = len(train)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = model.loss_and_grad(train.windows[idx], train.handcrafted[idx], train.labels[idx],
                                              train=True, rng=rng)
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}; try a smaller learning rate than {config.learning_rate}")
            opt.step(grads)
            losses.append(loss * len(idx))
        train_loss = float(np.sum(losses) / n)
        entry = {"epoch": epoch, "train_loss": train_loss}
        if val is not None and len(val):
            q50 = model.predict(val.windows, val.handcrafted)[:, 2]
            entry["val_rmse"] = rmse(q50, val.labels)
            if entry["val_rmse"] < best_rmse:
                best_rmse, best_epoch, since_best = entry["val_rmse"], epoch, 0
                best_params = {k: v.copy() for k, v in model.params.items()}
            else:
                since_best += 1
        else:
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
        history.append(entry)
        logger.info("epoch %d: %s", epoch, entry)
        if val is not None and len(val) and since_best >= config.patience:
            break
    model.params = best_params
    return GrpResult(model=model, stats=None, history=history, config=config, best_epoch=best_epoch)


def validation_mask(arrays: WindowArrays, last: int = 50) -> np.ndarray:
    """Windows ending within the final ``last`` cycles of their engine."""
    return arrays.true_rul < last


def train_grp(split: DatasetSplit, config: GrpTrainConfig) -> GrpResult:
    stats, train, _ = prepare_windows(split, window=config.window)
    val_mask = validation_mask(train, config.val_last)
    val = train.subset(val_mask)
    fit_set = train.subset(~val_mask) if config.holdout_validation else train
    result = fit_grp(fit_set, config, val=val)
    result.stats = stats
    return result


def evaluate_rmse_last_k(model: GRPModel, arrays: WindowArrays, k: int = 30) -> tuple[float, np.ndarray]:
    """Pooled RMSE of q50 over each engine's final ``k`` windows.

    Returns the RMSE and the boolean mask of the windows used.
    """
    mask = np.zeros(len(arrays), dtype=bool)
    for eid in np.unique(arrays.engine_ids):
        rows = np.flatnonzero(arrays.engine_ids == eid)
        rows = rows[np.argsort(arrays.end_cycles[rows])]
        if len(rows) < k:
            logger.warning("engine %d has only %d windows (< %d); using all", eid, len(rows), k)
        mask[rows[-k:]] = True
    if not mask.any():
        return float("nan"), mask
    q = model.predict(arrays.windows[mask], arrays.handcrafted[mask])
    return rmse(q[:, 2], arrays.labels[mask]), mask


# -- checkpoints --------------------------------------------------------------

def save_grp(path: str | Path, result: GrpResult, extra_meta: dict | None = None) -> None:
    arrays = {f"param.{k}": v for k, v in result.model.params.items()}
    if result.stats is not None:
        arrays.update(result.stats.to_arrays())
    meta = {
        "train_config": asdict(result.config),
        "model_config": result.model.config(),
        "history": result.history,
        "best_epoch": result.best_epoch,
    }
    if extra_meta:
        meta.update(extra_meta)
    nn.save_checkpoint(path, "grp", meta, arrays)


def load_grp(path: str | Path) -> GrpResult:
    meta, arrays = nn.load_checkpoint(path, kind="grp")
    model = GRPModel(**meta["model_config"])
    model.params = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
    stats = NormalizationStats.from_arrays(arrays) if "norm.keys" in arrays else None
    config = GrpTrainConfig(**meta["train_config"])
    return GrpResult(model=model, stats=stats, history=meta["history"], config=config,
                     best_epoch=meta["best_epoch"], meta=meta)
