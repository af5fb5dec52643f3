"""Sequential two-agent PPO: a replacement actor (2 actions) and an inspection
actor (gaps 1..50), each with its own critic, trained on a shared reward.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .dist_fit import STATE_SIZE
from .pdm_env import D_ACTION, PdmEnv

logger = logging.getLogger(__name__)

AGENTS = ("replace", "inspect")


class ModelStateError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, last_good: "SmomaPolicy | None" = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    ent_coef: float = 0.01
    learning_rate: float = 1e-3
    lr_decay: bool = True
    horizon: int = 2048
    chunk_len: int = 64
    epochs: int = 4
    num_minibatches: int = 16
    # parallel environments per iteration
    batch_size: int = 8
    iterations: int = 200
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True
    value_norm: bool = True
    # "printed": V-hat = A + V(s_{t+1});  "standard": V-hat = A + V(s_t)
    value_target: str = "printed"
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must lie in (0, 1]")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.horizon % self.chunk_len:
            raise ValueError("horizon must be divisible by chunk_len")
        if self.value_target not in ("printed", "standard"):
            raise ValueError("value_target must be 'printed' or 'standard'")
        if min(self.horizon, self.chunk_len, self.epochs, self.num_minibatches, self.batch_size) < 1:
            raise ValueError("horizon, chunk_len, epochs, num_minibatches and batch_size must be >= 1")


# -- networks -------------------------------------------------------------------

@dataclass
class MLP:
    """tanh hidden layers, linear output."""

    sizes: tuple[int, ...]
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, zero_last: bool = False) -> "MLP":
        net = cls(tuple(sizes))
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last and zero_last:
                net.params[f"W{i}"] = np.zeros((n_out, n_in))
            else:
                net.params[f"W{i}"] = nn.orthogonal_init(rng, (n_out, n_in))
            net.params[f"b{i}"] = np.zeros(n_out)
        return net

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [x]
        for i in range(self.n_layers):
            x = x @ self.params[f"W{i}"].T + self.params[f"b{i}"]
            if i < self.n_layers - 1:
                x = np.tanh(x)
            acts.append(x)
        return x, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, acts: list[np.ndarray], dout: np.ndarray) -> dict[str, np.ndarray]:
        g = {}
        delta = dout
        for i in range(self.n_layers - 1, -1, -1):
            g[f"W{i}"] = delta.T @ acts[i]
            g[f"b{i}"] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.params[f"W{i}"]) * (1.0 - acts[i] ** 2)
        return g


def actor_sizes(n_actions: int, state_size: int = STATE_SIZE, width: int = 128) -> tuple[int, ...]:
    return (state_size, width, width, n_actions)


def critic_sizes(state_size: int = STATE_SIZE, widths: tuple[int, int] = (256, 64)) -> tuple[int, ...]:
    return (state_size, widths[0], widths[1], 1)


def policy_probs(actor: MLP, state: np.ndarray) -> np.ndarray:
    logits = actor(np.atleast_2d(state))
    if not np.all(np.isfinite(logits)):
        raise ModelStateError("actor produced non-finite logits")
    probs = nn.softmax(logits, axis=-1)
    return probs[0] if np.ndim(state) == 1 else probs


def entropy(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


class RunningMeanStd:
    """Running mean/variance over every target seen (parallel-merge update)."""

    def __init__(self, mean: float = 0.0, var: float = 1.0, count: float = 0.0):
        self.mean, self.var, self.count = float(mean), float(var), float(count)

    @property
    def std(self) -> float:
        return math.sqrt(max(self.var, 1e-8))

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size == 0:
            return
        b_mean, b_var, b_n = float(x.mean()), float(x.var()), float(x.size)
        if self.count == 0:
            self.mean, self.var, self.count = b_mean, b_var, b_n
            return
        total = self.count + b_n
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * b_n + delta * delta * self.count * b_n / total
        self.mean += delta * b_n / total
        self.var = m2 / total
        self.count = total

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x, dtype=float) * self.std + self.mean


@dataclass
class SmomaPolicy:
    actors: dict[str, MLP]
    critics: dict[str, MLP]
    value_norms: dict[str, RunningMeanStd]
    config: PpoConfig
    d_action: int = D_ACTION

    @classmethod
    def init(cls, config: PpoConfig, d_action: int = D_ACTION, state_size: int = STATE_SIZE) -> "SmomaPolicy":
        rng = np.random.default_rng(config.seed)
        actors = {
            "replace": MLP.init(actor_sizes(2, state_size), rng, zero_last=True),
            "inspect": MLP.init(actor_sizes(d_action, state_size), rng, zero_last=True),
        }
        critics = {a: MLP.init(critic_sizes(state_size), rng) for a in AGENTS}
        return cls(actors, critics, {a: RunningMeanStd() for a in AGENTS}, config, d_action)

    def values(self, states: np.ndarray) -> dict[str, np.ndarray]:
        out = {}
        for a in AGENTS:
            v = self.critics[a](states)[:, 0]
            out[a] = self.value_norms[a].denormalize(v) if self.config.value_norm else v
        return out

    def act_greedy(self, state: np.ndarray) -> tuple[int, int]:
        state = np.asarray(state, dtype=float)
        if state.shape[-1] != self.actors["replace"].sizes[0]:
            raise ValueError(f"state has {state.shape[-1]} features, policy expects {self.actors['replace'].sizes[0]}")
        a_r = int(np.argmax(policy_probs(self.actors["replace"], state)))
        a_p = int(np.argmax(policy_probs(self.actors["inspect"], state))) + 1
        return a_r, a_p

    def __call__(self, state: np.ndarray, env=None) -> tuple[int, int]:
        return self.act_greedy(state)

    def copy(self) -> "SmomaPolicy":
        dup = lambda net: MLP(net.sizes, {k: v.copy() for k, v in net.params.items()})
        return SmomaPolicy({a: dup(n) for a, n in self.actors.items()},
                           {a: dup(n) for a, n in self.critics.items()},
                           {a: RunningMeanStd(n.mean, n.var, n.count) for a, n in self.value_norms.items()},
                           self.config, self.d_action)


# -- advantage estimation and losses --------------------------------------------

def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, gamma: float,
                lam: float, value_target: str = "printed") -> tuple[np.ndarray, np.ndarray]:
    """Backward GAE recursion.

    ``values`` has length T + 1: V(s_0..s_{T-1}) plus the bootstrap value of
    the post-horizon state. Terminal steps use V(s_{t+1}) = 0 and cut the
    recursion.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    T = len(rewards)
    adv = np.zeros(T)
    next_v = np.where(dones, 0.0, values[1:T + 1])
    running = 0.0
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * next_v[t] - values[t]
        running = delta + gamma * lam * (0.0 if dones[t] else running)
        adv[t] = running
    targets = adv + (next_v if value_target == "printed" else values[:T])
    return adv, targets


def clipped_surrogate(ratio, adv, clip_eps: float):
    ratio, adv = np.asarray(ratio, float), np.asarray(adv, float)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)


@dataclass
class Batch:
    states: np.ndarray  # (N, 50)
    actions: dict[str, np.ndarray]  # class indices
    old_logp: dict[str, np.ndarray]
    adv: dict[str, np.ndarray]
    targets: dict[str, np.ndarray]  # raw (denormalized) value targets
    masks: dict[str, np.ndarray]  # 1 where the agent's action took effect

    def take(self, idx: np.ndarray) -> "Batch":
        pick = lambda d: {k: v[idx] for k, v in d.items()}
        return Batch(self.states[idx], pick(self.actions), pick(self.old_logp), pick(self.adv),
                     pick(self.targets), pick(self.masks))


def actor_objective(policy: SmomaPolicy, batch: Batch, clip_eps: float, ent_coef: float,
                    with_grad: bool = True) -> tuple[float, dict[str, dict[str, np.ndarray]]]:
    """Clipped surrogate plus entropy bonus averaged as 1/(2N) sum over steps
    and agents. Returns the objective (to maximize) and the gradients of its
    negation for each actor."""
    N = len(batch.states)
    total = 0.0
    grads = {}
    for a in AGENTS:
        actor = policy.actors[a]
        logits, acts = actor.forward(batch.states)
        logp_all = nn.log_softmax(logits)
        p = np.exp(logp_all)
        act = batch.actions[a]
        logp = logp_all[np.arange(N), act]
        ratio = np.exp(logp - batch.old_logp[a])
        adv = batch.adv[a]
        mask = batch.masks[a]
        unclipped = ratio * adv
        clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
        surr = np.minimum(unclipped, clipped)
        ent = -(p * logp_all).sum(axis=1)
        total += float((mask * (surr + ent_coef * ent)).sum()) / (2 * N)
        if with_grad:
            onehot = np.zeros_like(p)
            onehot[np.arange(N), act] = 1.0
            dsurr_dratio = np.where(unclipped <= clipped, adv, 0.0)
            d_surr = (dsurr_dratio * ratio)[:, None] * (onehot - p)
            d_ent = -p * (logp_all + ent[:, None])
            d_obj = (mask[:, None] * (d_surr + ent_coef * d_ent)) / (2 * N)
            grads[a] = actor.backward(acts, -d_obj)
    return total, grads


def critic_loss(policy: SmomaPolicy, batch: Batch, with_grad: bool = True) -> tuple[float, dict[str, dict[str, np.ndarray]]]:
    """Squared value error summed over agents, divided by 2N, in normalized value space."""
    N = len(batch.states)
    total = 0.0
    grads = {}
    for a in AGENTS:
        critic = policy.critics[a]
        out, acts = critic.forward(batch.states)
        target = batch.targets[a]
        if policy.config.value_norm:
            target = policy.value_norms[a].normalize(target)
        err = out[:, 0] - target
        total += float((err ** 2).sum()) / (2 * N)
        if with_grad:
            grads[a] = critic.backward(acts, (err / N)[:, None])
    return total, grads


# -- training loop ----------------------------------------------------------------

def _sample(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])
    idx = (np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


@dataclass
class TrainResult:
    policy: SmomaPolicy
    curves: list[dict]


def _normalize(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    sel = x[mask > 0]
    if sel.size < 2:
        return x - (sel.mean() if sel.size else 0.0)
    return (x - sel.mean()) / (sel.std() + 1e-8)


def train(env_factory: Callable[[int], PdmEnv], config: PpoConfig,
          policy: SmomaPolicy | None = None, log_every: int = 10) -> TrainResult:
    """Collect ``batch_size`` trajectories of ``horizon`` steps per iteration,
    then run ``epochs`` passes of shuffled chunk minibatches."""
    envs = [env_factory(i) for i in range(config.batch_size)]
    d_action = envs[0].d_action
    if policy is None:
        policy = SmomaPolicy.init(config, d_action=d_action)
    rng = np.random.default_rng(config.seed + 7919)
    opts = {("actor", a): nn.Adam(policy.actors[a].params, lr=config.learning_rate) for a in AGENTS}
    opts.update({("critic", a): nn.Adam(policy.critics[a].params, lr=config.learning_rate) for a in AGENTS})
    obs = np.stack([e.reset() for e in envs])
    B, T, L = config.batch_size, config.horizon, config.chunk_len
    curves = []
    for it in range(config.iterations):
        lr = config.learning_rate * (1.0 - it / config.iterations) if config.lr_decay else config.learning_rate
        states = np.zeros((B, T, obs.shape[1]))
        acts = {a: np.zeros((B, T), dtype=np.int64) for a in AGENTS}
        logps = {a: np.zeros((B, T)) for a in AGENTS}
        vals = {a: np.zeros((B, T + 1)) for a in AGENTS}
        masks = {a: np.ones((B, T)) for a in AGENTS}
        rewards = np.zeros((B, T))
        rr = np.zeros((B, T))
        rp = np.zeros((B, T))
        dones = np.zeros((B, T), dtype=bool)
        n_rep = n_ur = 0
        gaps = []
        for t in range(T):
            states[:, t] = obs
            v = policy.values(obs)
            for a in AGENTS:
                probs = policy_probs(policy.actors[a], obs)
                choice = _sample(probs, rng)
                acts[a][:, t] = choice
                logps[a][:, t] = np.log(probs[np.arange(B), choice])
                vals[a][:, t] = v[a]
            for b, env in enumerate(envs):
                out = env.step(int(acts["replace"][b, t]), int(acts["inspect"][b, t]) + 1)
                rewards[b, t], rr[b, t], rp[b, t] = out.reward, out.r_replace, out.r_inspect
                dones[b, t] = out.new_engine
                if out.info["forced"]:
                    masks["replace"][b, t] = 0.0
                if not out.continued:
                    masks["inspect"][b, t] = 0.0
                else:
                    gaps.append(out.info["gap"])
                n_rep += out.replaced
                n_ur += out.unscheduled
                obs[b] = out.state
        v_last = policy.values(obs)
        for a in AGENTS:
            vals[a][:, T] = v_last[a]

        adv, targets = {}, {}
        for a in AGENTS:
            adv[a] = np.zeros((B, T))
            targets[a] = np.zeros((B, T))
            for b in range(B):
                adv[a][b], targets[a][b] = compute_gae(rewards[b], vals[a][b], dones[b], config.gamma,
                                                       config.gae_lambda, config.value_target)
            if not np.all(np.isfinite(adv[a])):
                raise TrainingDivergedError(f"non-finite advantages at iteration {it}", policy.copy())
            if config.value_norm:
                policy.value_norms[a].update(targets[a])
            if config.normalize_advantages:
                adv[a] = _normalize(adv[a].reshape(-1), masks[a].reshape(-1)).reshape(B, T)

        flat = Batch(
            states=states.reshape(B * T, -1),
            actions={a: acts[a].reshape(-1) for a in AGENTS},
            old_logp={a: logps[a].reshape(-1) for a in AGENTS},
            adv={a: adv[a].reshape(-1) for a in AGENTS},
            targets={a: targets[a].reshape(-1) for a in AGENTS},
            masks={a: masks[a].reshape(-1) for a in AGENTS},
        )
        chunk_starts = np.arange(0, B * T, L)
        last_good = policy.copy()
        for _ in range(config.epochs):
            order = rng.permutation(len(chunk_starts))
            for mb in np.array_split(order, config.num_minibatches):
                if len(mb) == 0:
                    continue
                idx = (chunk_starts[mb][:, None] + np.arange(L)[None, :]).reshape(-1)
                sub = flat.take(idx)
                obj, a_grads = actor_objective(policy, sub, config.clip_eps, config.ent_coef)
                vloss, c_grads = critic_loss(policy, sub)
                if not (math.isfinite(obj) and math.isfinite(vloss)):
                    raise TrainingDivergedError(f"non-finite loss at iteration {it}", last_good)
                for a in AGENTS:
                    nn.clip_grad_norm(a_grads[a], config.max_grad_norm)
                    nn.clip_grad_norm(c_grads[a], config.max_grad_norm)
                    opts[("actor", a)].step(a_grads[a], lr=lr)
                    opts[("critic", a)].step(c_grads[a], lr=lr)
        curve = {
            "iteration": it + 1,
            "reward_sum": float(rewards.sum()),
            "r_replace_sum": float(rr.sum()),
            "r_inspect_sum": float(rp.sum()),
            "replacements": int(n_rep),
            "unscheduled": int(n_ur),
            "mean_gap": float(np.mean(gaps)) if gaps else 0.0,
        }
        curves.append(curve)
        if log_every and (it + 1) % log_every == 0:
            logger.info("iteration %d: %s", it + 1, curve)
    return TrainResult(policy=policy, curves=curves)


# -- checkpoints --------------------------------------------------------------------

def save_policy(path: str | Path, policy: SmomaPolicy, extra_meta: dict | None = None) -> None:
    arrays = {}
    for a in AGENTS:
        arrays.update({f"actor.{a}.{k}": v for k, v in policy.actors[a].params.items()})
        arrays.update({f"critic.{a}.{k}": v for k, v in policy.critics[a].params.items()})
    meta = {
        "ppo_config": asdict(policy.config),
        "d_action": policy.d_action,
        "sizes": {f"actor.{a}": list(policy.actors[a].sizes) for a in AGENTS}
        | {f"critic.{a}": list(policy.critics[a].sizes) for a in AGENTS},
        "value_norms": {a: [n.mean, n.var, n.count] for a, n in policy.value_norms.items()},
    }
    if extra_meta:
        meta.update(extra_meta)
    nn.save_checkpoint(path, "smoma_policy", meta, arrays)


def load_policy(path: str | Path) -> tuple[SmomaPolicy, dict]:
    meta, arrays = nn.load_checkpoint(path, kind="smoma_policy")

    def net(prefix: str) -> MLP:
        params = {k[len(prefix) + 1:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}
        return MLP(tuple(meta["sizes"][prefix]), params)

    policy = SmomaPolicy(
        actors={a: net(f"actor.{a}") for a in AGENTS},
        critics={a: net(f"critic.{a}") for a in AGENTS},
        value_norms={a: RunningMeanStd(*meta["value_norms"][a]) for a in AGENTS},
        config=PpoConfig(**meta["ppo_config"]),
        d_action=meta["d_action"],
    )
    return policy, meta
