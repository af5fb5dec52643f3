import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdm_marl import dist_fit as dfit
from pdm_marl import pdm_env as envmod
from pdm_marl.grp_model import QuantileSet

from reward_table import INSPECT_CASES, REPLACE_CASES

CFG = envmod.RewardConfig()


def _engine(eid, life):
    return envmod.synthetic_engines(1, (life, life), 0.0, seed=eid, id_offset=eid - 1)[0]


def _env(lifes, mode="eval", seed=0):
    return envmod.PdmEnv([_engine(i + 1, L) for i, L in enumerate(lifes)], mode=mode, seed=seed)


# -- reward functions ----------------------------------------------------------------

@pytest.mark.parametrize("rho, t, a, expected", REPLACE_CASES)
def test_reward_replace_table(rho, t, a, expected):
    assert envmod.reward_replace(rho, t, a, CFG) == expected


@pytest.mark.parametrize("rho_next, a_p, expected", INSPECT_CASES)
def test_reward_inspect_table(rho_next, a_p, expected):
    assert envmod.reward_inspect(rho_next, a_p, CFG) == pytest.approx(expected, abs=1e-12)


def test_reward_replace_rejects_bad_action():
    with pytest.raises(ValueError):
        envmod.reward_replace(10, 100, 2, CFG)


@settings(max_examples=200, deadline=None)
@given(rho=st.integers(-60, 400), t=st.integers(60, 400), a=st.sampled_from([0, 1]))
def test_replace_reward_exactly_one_branch(rho, t, a):
    branches = {
        CFG.c1 * t - CFG.c0: a == 1 and rho > CFG.T1,
        CFG.c2 * t - CFG.c0: a == 1 and CFG.T2 < rho <= CFG.T1,
        -CFG.c3 * t - CFG.c0: a == 1 and rho <= CFG.T2,
        -CFG.c4: a == 0 and rho <= 0,
        0.0: a == 0 and rho > 0,
    }
    assert sum(branches.values()) == 1
    assert envmod.reward_replace(rho, t, a, CFG) == next(v for v, hit in branches.items() if hit)


@settings(max_examples=100, deadline=None)
@given(t=st.integers(60, 400), a_p=st.integers(1, 50))
def test_rewards_drop_crossing_t2(t, a_p):
    above, below = CFG.T2 + 1, CFG.T2
    assert envmod.reward_replace(below, t, 1, CFG) <= envmod.reward_replace(above, t, 1, CFG)
    assert envmod.reward_inspect(below, a_p, CFG) <= envmod.reward_inspect(above, a_p, CFG)


@pytest.mark.parametrize("kw", [dict(T1=5, T2=5), dict(T2=0), dict(c1=1.0), dict(c3=0.5), dict(c4=10.0), dict(c0=-1.0)])
def test_reward_config_validation(kw):
    with pytest.raises(envmod.ConfigError):
        envmod.RewardConfig(**kw)


# -- reset / engine pool -----------------------------------------------------------------

def test_eval_reset_serves_first_engine_at_cycle_60():
    env = _env([200, 180])
    state = env.reset()
    assert env.engine.engine_id == 1 and env.t == 60 and env.rho == 140
    assert state.shape == (dfit.STATE_SIZE,)


def test_train_order_is_seeded():
    orders = []
    for _ in range(2):
        env = _env([150 + i for i in range(10)], mode="train", seed=5)
        env.reset()
        seen = [env.engine.engine_id]
        for _ in range(9):
            env.step(1, 1)
            seen.append(env.engine.engine_id)
        orders.append(seen)
    assert orders[0] == orders[1]
    assert sorted(orders[0]) == list(range(1, 11))


def test_short_engines_skipped(caplog):
    with caplog.at_level("WARNING"):
        env = _env([50, 200])
    assert [e.engine_id for e in env.engines] == [2]
    assert "skipped" in caplog.text


def test_empty_pool():
    with pytest.raises(envmod.ConfigError):
        envmod.PdmEnv([])
    with pytest.raises(envmod.ConfigError):
        _env([40])


# -- transitions ------------------------------------------------------------------------

def _advance_to(env, rho):
    while env.rho - rho > 0:
        env.step(0, min(50, env.rho - rho))
    assert env.rho == rho


def test_continue_step_bookkeeping():
    env = _env([300])
    env.reset()
    _advance_to(env, 50)
    out = env.step(0, 30)
    assert env.rho == 20 and out.continued and not out.new_engine
    assert out.r_replace == 0.0 and out.r_inspect == pytest.approx(30.0)
    assert out.reward == out.r_replace + out.r_inspect


def test_replacement_starts_new_engine():
    env = _env([300, 250])
    env.reset()
    _advance_to(env, 25)
    t = env.t
    out = env.step(1, 17)
    assert out.replaced and out.new_engine and out.r_inspect == 0.0
    assert out.r_replace == pytest.approx(0.1 * t - 5)
    assert env.engine.engine_id == 2 and env.t == 60
    assert out.info["rul_at_stop"] == 25


def test_overshoot_then_forced_unscheduled():
    env = _env([300, 250])
    env.reset()
    _advance_to(env, 10)
    out = env.step(0, 40)
    assert out.continued and out.r_inspect == -80.0 and env.rho == -30
    forced = env.step(1, 5)  # the replace action is overridden at the failed point
    assert forced.unscheduled and not forced.replaced and forced.info["forced"]
    assert forced.r_replace == -500.0 and forced.r_inspect == 0.0
    assert forced.info["rul_at_stop"] == 0
    assert env.engine.engine_id == 2 and env.t == 60


def test_failed_engine_serves_last_computable_state():
    env = _env([200])
    env.reset()
    _advance_to(env, 3)
    out = env.step(0, 20)
    assert np.array_equal(out.state, env.engine.state(env.engine.last_cycle))
    assert np.all(out.state.reshape(5, 10)[-1] == 1.0)


@pytest.mark.parametrize("a_r, a_p", [(2, 5), (-1, 5), (0, 0), (0, 51)])
def test_step_rejects_bad_actions(a_r, a_p):
    env = _env([200])
    env.reset()
    with pytest.raises(ValueError):
        env.step(a_r, a_p)


@settings(max_examples=30, deadline=None)
@given(actions=st.lists(st.tuples(st.sampled_from([0, 0, 0, 1]), st.integers(1, 50)), min_size=1, max_size=80),
       seed=st.integers(0, 50))
def test_bookkeeping_conservation_and_determinism(actions, seed):
    lifes = [150 + 13 * i for i in range(6)]
    runs = []
    for _ in range(2):
        env = _env(lifes, mode="train", seed=seed)
        env.reset()
        outs = []
        for a_r, a_p in actions:
            if env.rho >= 0:
                assert env.rho == env.engine.lifespan - env.t
            o = env.step(a_r, a_p)
            assert sum([o.replaced, o.unscheduled, o.continued]) == 1
            assert o.reward == CFG.beta1 * o.r_replace + CFG.beta2 * o.r_inspect
            outs.append(o)
        stopped = sum(o.replaced or o.unscheduled for o in outs)
        assert env.engines_served == stopped + 1
        runs.append([(o.r_replace, o.r_inspect, o.replaced, o.unscheduled, o.state.tobytes()) for o in outs])
    assert runs[0] == runs[1]


# -- engines and states --------------------------------------------------------------------

def test_oracle_states_are_step_functions():
    (eng,) = envmod.synthetic_engines(1, (200, 200), 0.0, seed=0)
    block = eng.blocks[200 - 7 - 1]  # cycle 193, rho = 7
    k = np.arange(1, 11)
    # P(RUL <= k) of a point mass smoothed to scale 1e-6: half its mass sits at k = rho
    assert np.array_equal(block, np.where(k > 7, 1.0, np.where(k == 7, 0.5, 0.0)))
    assert np.all(eng.blocks[: 200 - 11] == 0.0)


def test_noisy_oracle_is_seeded():
    a = envmod.synthetic_engines(3, sigma_noise=3.0, seed=4)
    b = envmod.synthetic_engines(3, sigma_noise=3.0, seed=4)
    assert all(np.array_equal(x.blocks, y.blocks) for x, y in zip(a, b))
    assert all(150 <= e.lifespan <= 350 for e in a)


def test_state_padding_at_first_cycle():
    blocks = np.random.default_rng(0).uniform(size=(20, 10))
    eng = envmod.EngineStates(1, 79, 60, blocks)
    s = eng.state(60).reshape(5, 10)
    assert np.all(s == blocks[0])
    s = eng.state(62).reshape(5, 10)
    assert np.array_equal(s[2:], blocks[:3]) and np.array_equal(s[:2], blocks[[0, 0]])


def test_engines_from_state_cache(tmp_path):
    rows = []
    for eid, life in ((1, 90), (2, 75)):
        for c in range(60, life + 1):
            qs = QuantileSet.from_array(np.full(5, life - c) + np.arange(-2, 3), engine_id=eid, cycle=c)
            rows.append((qs, float(life - c)))
    path = tmp_path / "states.csv"
    dfit.write_state_csv(path, dfit.states_from_quantiles(rows))
    engines = envmod.engines_from_state_cache(path)
    assert [(e.engine_id, e.lifespan, e.first_cycle) for e in engines] == [(1, 90, 60), (2, 75, 60)]
    env = envmod.PdmEnv(engines, mode="eval")
    env.reset()
    assert env.rho == 30


def test_run_log(tmp_path):
    env = _env([200])
    env.reset()
    outs = [env.step(0, 50), env.step(0, 50), env.step(1, 3)]
    path = tmp_path / "log.csv"
    envmod.write_run_log(path, outs)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == envmod.RUN_LOG_HEADER and len(rows) == 4
    assert rows[3][8] == "1" and rows[1][2] == "140"
