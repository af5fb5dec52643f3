"""Central finite-difference checks shared by the unit and acceptance tests.

The error for a parameter group is ||analytic - numeric|| / max(||analytic||,
||numeric||) over a random sample of its coordinates. Using group norms keeps
tiny gradients (~1e-6) from inflating the ratio through round-off alone.
"""

from __future__ import annotations

import numpy as np

from pdm_marl import grp_model as grp
from pdm_marl import smoma_ppo as ppo

STEP = 1e-5
COORDS = 20


def group_errors(params: dict[str, np.ndarray], analytic: dict[str, np.ndarray], loss_fn,
                 rng: np.random.Generator, coords: int = COORDS, step: float = STEP) -> dict[str, float]:
    errors = {}
    for name, value in params.items():
        flat = value.reshape(-1)
        idx = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
        a = analytic[name].reshape(-1)[idx]
        n = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            n[j] = (up - down) / (2 * step)
        scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        errors[name] = float(np.linalg.norm(a - n) / scale)
    return errors


def grp_errors(seed: int) -> dict[str, float]:
    """Quantile loss through GRU, attention and fusion head (h=4, s=5, batch 3)."""
    rng = np.random.default_rng(seed)
    model = grp.GRPModel.init(seed=seed, hidden_size=4, window=5, fusion_size=8, dropout=0.0)
    X = rng.normal(size=(3, 5, 24))
    hand = rng.normal(size=(3, 48))
    y = rng.uniform(0, 125, size=3)
    _, grads = model.loss_and_grad(X, hand, y)
    loss = lambda: grp.total_loss(y, model.forward(X, hand)[0])
    return group_errors(model.params, grads, loss, rng)


def tiny_policy(seed: int, width: int = 8, d_action: int = 50) -> ppo.SmomaPolicy:
    rng = np.random.default_rng(seed)
    cfg = ppo.PpoConfig(seed=seed)
    actors = {"replace": ppo.MLP.init((50, width, width, 2), rng),
              "inspect": ppo.MLP.init((50, width, width, d_action), rng)}
    critics = {a: ppo.MLP.init((50, width, width, 1), rng) for a in ppo.AGENTS}
    norms = {a: ppo.RunningMeanStd(rng.normal(), rng.uniform(0.5, 2.0), 10.0) for a in ppo.AGENTS}
    return ppo.SmomaPolicy(actors, critics, norms, cfg, d_action)


def random_batch(policy: ppo.SmomaPolicy, rng: np.random.Generator, n: int = 16) -> ppo.Batch:
    states = rng.uniform(0, 1, size=(n, 50))
    actions, old_logp = {}, {}
    for a in ppo.AGENTS:
        k = policy.actors[a].sizes[-1]
        actions[a] = rng.integers(0, k, size=n)
        probs = ppo.policy_probs(policy.actors[a], states)
        # old log-probs near the current ones so some ratios clip and some do not
        old_logp[a] = np.log(probs[np.arange(n), actions[a]]) + rng.normal(0, 0.3, size=n)
    return ppo.Batch(
        states=states, actions=actions, old_logp=old_logp,
        adv={a: rng.normal(size=n) for a in ppo.AGENTS},
        targets={a: rng.normal(size=n) * 3 for a in ppo.AGENTS},
        masks={"replace": np.ones(n), "inspect": (rng.random(n) > 0.3).astype(float)},
    )


def actor_errors(seed: int) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    policy = tiny_policy(seed)
    for net in policy.actors.values():
        net.params[f"W{net.n_layers - 1}"] = rng.normal(0, 0.5, size=net.params[f"W{net.n_layers - 1}"].shape)
    batch = random_batch(policy, rng)
    cfg = policy.config
    _, grads = ppo.actor_objective(policy, batch, cfg.clip_eps, cfg.ent_coef)
    loss = lambda: -ppo.actor_objective(policy, batch, cfg.clip_eps, cfg.ent_coef, with_grad=False)[0]
    out = {}
    for a in ppo.AGENTS:
        errs = group_errors(policy.actors[a].params, grads[a], loss, rng)
        out.update({f"{a}.{k}": v for k, v in errs.items()})
    return out


def critic_errors(seed: int) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    policy = tiny_policy(seed)
    batch = random_batch(policy, rng)
    _, grads = ppo.critic_loss(policy, batch)
    loss = lambda: ppo.critic_loss(policy, batch, with_grad=False)[0]
    out = {}
    for a in ppo.AGENTS:
        errs = group_errors(policy.critics[a].params, grads[a], loss, rng)
        out.update({f"{a}.{k}": v for k, v in errs.items()})
    return out
