"""Command-line entry point: ``pdm-marl <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data_ingest as di
from . import dist_fit as dfit
from . import eval_harness as ev
from . import grp_model as grp
from . import pdm_env as envmod
from . import smoma_ppo as ppo

logger = logging.getLogger("pdm_marl")


def _load_json(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _subset_file(args) -> Path:
    if args.train_file:
        return Path(args.train_file)
    if not args.data_dir:
        raise SystemExit("need --data-dir or --train-file")
    return Path(args.data_dir) / f"train_{args.subset}.txt"


def _load_split(args) -> di.DatasetSplit:
    traces = di.load_cmapss(_subset_file(args), subset_tag=args.subset)
    return di.split_engines(traces, args.fraction)


# -- data / GRP -------------------------------------------------------------------

def cmd_synth_cmapss(args) -> int:
    text = di.synthetic_cmapss(args.engines, seed=args.seed, n_conditions=args.conditions)
    Path(args.out).write_text(text)
    print(f"wrote {args.engines} synthetic engines to {args.out}")
    return 0


def cmd_train_grp(args) -> int:
    overrides = _load_json(args.config)
    overrides["seed"] = args.seed
    if args.max_epochs is not None:
        overrides["max_epochs"] = args.max_epochs
    config = grp.GrpTrainConfig(**overrides)
    split = _load_split(args)
    result = grp.train_grp(split, config)
    grp.save_grp(args.out, result, extra_meta={"subset": args.subset, "fraction": args.fraction,
                                               "source": _subset_file(args).name})
    last = result.history[-1] if result.history else {}
    print(f"trained {len(result.history)} epochs (best {result.best_epoch}); last {last}; saved {args.out}")
    return 0


def quantile_rows(model: grp.GRPModel, arrays: di.WindowArrays) -> list[tuple[grp.QuantileSet, float]]:
    q = model.predict(arrays.windows, arrays.handcrafted)
    return [(grp.QuantileSet.from_array(q[i], engine_id=int(arrays.engine_ids[i]), cycle=int(arrays.end_cycles[i])),
             float(arrays.true_rul[i])) for i in range(len(arrays))]


def cmd_eval_grp(args) -> int:
    result = grp.load_grp(args.model)
    split = _load_split(args)
    engines = {"train": split.train_engines, "test": split.test_engines,
               "all": split.train_engines + split.test_engines}[args.split]
    stats = result.stats or di.fit_normalization(split.train_engines)
    arrays = di.window_arrays([di.apply_normalization(e, stats) for e in engines], s=result.config.window)
    err, mask = grp.evaluate_rmse_last_k(result.model, arrays, args.last_k)
    rows = quantile_rows(result.model, arrays)
    q = np.array([r[0].as_array() for r in rows])
    inside = (arrays.labels >= q[:, 0]) & (arrays.labels <= q[:, 4])
    coverage = float(inside[mask].mean()) if mask.any() else float("nan")
    if args.out:
        dfit.write_quantile_csv(args.out, rows)
    summary = {"rmse_last_k": err, "coverage_q10_q90_last_k": coverage, "last_k": args.last_k,
               "split": args.split, "windows": len(arrays)}
    if args.report:
        Path(args.report).write_text(json.dumps(summary, indent=2) + "\n")
    print(f"RMSE(last {args.last_k}) = {err:.4f}; [q10,q90] coverage = {coverage:.3f}")
    return 0


def cmd_fit_dist(args) -> int:
    rows = dfit.read_quantile_csv(args.quantiles)
    if args.family == "compare":
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(dfit.COMPARE_HEADER)
            for r in dfit.compare_rows(rows):
                w.writerow([r[0], r[1]] + [repr(float(v)) for v in r[2:-1]] + [r[-1]])
        print(f"wrote family comparison for {len(rows)} rows to {args.out}")
        return 0
    dfit.write_state_csv(args.out, dfit.states_from_quantiles(rows, args.family))
    print(f"wrote {len(rows)} state rows ({args.family}) to {args.out}")
    return 0


# -- policy -----------------------------------------------------------------------

def _engine_pool(args, default_seed: int, id_offset: int = 0) -> list[envmod.EngineStates]:
    if args.states:
        return envmod.engines_from_state_cache(args.states)
    if not args.synthetic:
        raise SystemExit("need --states or --synthetic")
    seed = default_seed if args.pool_seed is None else args.pool_seed
    return envmod.synthetic_engines(args.engines, (args.life_min, args.life_max), args.sigma_noise,
                                    seed=seed, id_offset=id_offset)


def _pool_meta(args) -> dict:
    if args.states:
        return {"states": Path(args.states).name}
    return {"synthetic": {"engines": args.engines, "life": [args.life_min, args.life_max],
                          "sigma_noise": args.sigma_noise, "pool_seed": args.pool_seed}}


def cmd_train_policy(args) -> int:
    reward = envmod.RewardConfig(**_load_json(args.reward_config))
    overrides = _load_json(args.ppo_config)
    overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    config = ppo.PpoConfig(**overrides)
    pool = _engine_pool(args, default_seed=args.seed)
    factory = lambda i: envmod.PdmEnv(pool, reward, mode="train", seed=args.seed * 1000 + i)
    result = ppo.train(factory, config)
    ppo.save_policy(args.out, result.policy,
                    extra_meta={"reward_config": asdict(reward), "pool": _pool_meta(args)})
    if args.curves:
        ev.write_series(args.curves, result.curves)
    last = result.curves[-1] if result.curves else {}
    print(f"trained {config.iterations} iterations; last {last}; saved {args.out}")
    return 0


def cmd_eval_policy(args) -> int:
    policy, meta = ppo.load_policy(args.policy)
    reward = envmod.RewardConfig(**(_load_json(args.reward_config) or meta.get("reward_config", {})))
    pool = _engine_pool(args, default_seed=args.seed + 10_000, id_offset=10_000)
    env = envmod.PdmEnv(pool, reward, mode="eval", seed=args.seed)
    n = args.n or len(env.engines)
    trace = [] if args.trace else None
    records = ev.run_policy(env, policy, n, trace=trace)
    report = ev.compute_metrics(records, meta={
        "command": "eval-policy", "seed": args.seed, "n": n, "policy": Path(args.policy).name,
        "reward_config": asdict(reward), "ppo_config": asdict(policy.config), "pool": _pool_meta(args)})
    ev.emit_report(report, args.report)
    if args.trace:
        envmod.write_run_log(args.trace, trace)
    print(f"UR={report.UR}/{report.n}  MR={report.MR}  cost={report.total_cost}  "
          f"inspection period={report.mean_inspection_period}")
    return 0


# -- evaluation -------------------------------------------------------------------

def cmd_sweep_threshold(args) -> int:
    rows = dfit.read_quantile_csv(args.quantiles)
    thresholds = list(range(args.min, args.max + 1))
    sweep, ur_free = ev.threshold_policy_sweep(rows, thresholds)
    ev.write_sweep(args.out, sweep, ur_free, meta={"command": "sweep-threshold",
                                                   "quantiles": Path(args.quantiles).name,
                                                   "thresholds": thresholds})
    for r in sweep:
        d = r.as_dict()
        print(" ".join(f"{k}={v}" for k, v in d.items()))
    print(f"smallest UR-free threshold: {ur_free}")
    return 0


def cmd_baseline(args) -> int:
    report = ev.baseline(args.kind, args.n)
    if args.report:
        ev.emit_report(report, args.report)
    print(f"{args.kind}: n={args.n} cost={report.total_cost}")
    return 0


def cmd_report(args) -> int:
    ev.merge_reports(args.merge, args.out)
    print(f"merged {len(args.merge)} reports into {args.out}")
    return 0


# -- parser -------------------------------------------------------------------------

def _add_data_args(p):
    p.add_argument("--subset", default="FD001")
    p.add_argument("--data-dir")
    p.add_argument("--train-file", help="explicit C-MAPSS training file (overrides --data-dir)")
    p.add_argument("--fraction", type=float, default=0.5, help="share of engines used for training")


def _add_pool_args(p):
    p.add_argument("--states", help="state cache CSV from fit-dist")
    p.add_argument("--synthetic", action="store_true", help="use oracle engines instead of a state cache")
    p.add_argument("--engines", type=int, default=200)
    p.add_argument("--life-min", type=int, default=150)
    p.add_argument("--life-max", type=int, default=350)
    p.add_argument("--sigma-noise", type=float, default=0.0)
    p.add_argument("--pool-seed", type=int)
    p.add_argument("--reward-config", help="JSON file overriding RewardConfig fields")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdm-marl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-cmapss", help="write a synthetic run-to-failure file in C-MAPSS format")
    p.add_argument("--engines", type=int, default=100)
    p.add_argument("--conditions", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_cmapss)

    p = sub.add_parser("train-grp", help="train the quantile RUL predictor")
    _add_data_args(p)
    p.add_argument("--config", help="JSON file overriding GrpTrainConfig fields")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_grp)

    p = sub.add_parser("eval-grp", help="RMSE over the last k cycles and per-window quantiles")
    _add_data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--last-k", type=int, default=30)
    p.add_argument("--out", help="per-window quantile CSV")
    p.add_argument("--report", help="JSON summary")
    p.set_defaults(func=cmd_eval_grp)

    p = sub.add_parser("fit-dist", help="quantiles to cumulative-probability states")
    p.add_argument("--quantiles", required=True)
    p.add_argument("--family", choices=dfit.FAMILIES + ("compare",), default="normal")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_dist)

    p = sub.add_parser("train-policy", help="train the two-agent PPO policy")
    _add_pool_args(p)
    p.add_argument("--ppo-config", help="JSON file overriding PpoConfig fields")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--curves", help="per-iteration reward curve CSV")
    p.set_defaults(func=cmd_train_policy)

    p = sub.add_parser("eval-policy", help="greedy evaluation of a trained policy")
    _add_pool_args(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--n", type=int, default=0, help="engines to evaluate (default: whole pool)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.add_argument("--trace", help="per-decision CSV log")
    p.set_defaults(func=cmd_eval_policy)

    p = sub.add_parser("sweep-threshold", help="replace-below-threshold baseline over a threshold range")
    p.add_argument("--quantiles", required=True)
    p.add_argument("--min", type=int, default=4)
    p.add_argument("--max", type=int, default=15)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_threshold)

    p = sub.add_parser("baseline", help="ideal or corrective maintenance reference")
    p.add_argument("--kind", choices=("ideal", "corrective"), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("report", help="merge metric reports into one CSV")
    p.add_argument("--merge", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
