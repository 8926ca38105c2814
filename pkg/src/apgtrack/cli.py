"""Command line interface.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from apgtrack import adaptation as adp
from apgtrack import checkpoint as ckpt
from apgtrack import evaluation as ev
from apgtrack import experiment as ex
from apgtrack import mpc
from apgtrack import training as tr
from apgtrack.config import ConfigError, load as load_config
from apgtrack.dynamics import DragPerturbed, ResidualModel
from apgtrack.reference import read_trajectory_dir, validate_trajectory, write_trajectory_set

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("apgtrack")


class UsageError(Exception):
    pass


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.experiment.seed = args.seed
    if getattr(args, "system", None):
        cfg.experiment.system = args.system
    if getattr(args, "epochs", None) is not None:
        cfg.training.epochs = args.epochs
    if getattr(args, "mode", None):
        cfg.policy.mode = args.mode
    if getattr(args, "horizon", None) is not None:
        cfg.policy.horizon = args.horizon
    return cfg.validate()


def _load_policy(path, cfg, args):
    """Load a policy checkpoint; its system must match an explicitly chosen one."""
    explicit = bool(getattr(args, "system", None) or getattr(args, "config", None))
    try:
        params = ckpt.load(path, kind="policy", system=cfg.experiment.system if explicit else None)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from None
    cfg.experiment.system = params.system
    cfg.policy.horizon = params.horizon
    return params


def _episodes(args, cfg, task):
    if getattr(args, "trajectories", None):
        if cfg.experiment.system != "quadrotor":
            raise UsageError("--trajectories only applies to the quadrotor")
        try:
            trajs = read_trajectory_dir(args.trajectories, split="test")
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read trajectory set: {exc}") from None
        trajs = trajs[:args.count] if args.count is not None else trajs
        if not trajs:
            return np.zeros((0, 101, 6))
        return np.stack([t.states for t in trajs])
    return ex.holdout_episodes(cfg, task, args.count)


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.experiment.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    task = ex.make_task(cfg)
    params = ex.initial_policy(cfg, task)
    train_src, eval_src = ex.episode_sources(cfg, task)
    text = cfg.to_text()
    (out / "config.ini").write_text(text)
    code = EXIT_OK
    try:
        result = tr.train(task, ex.horizon(cfg), ex.curriculum(cfg), cfg.training.epochs,
                          cfg.experiment.seed, ex.train_config(cfg), params=params,
                          train_episodes=train_src, eval_episodes=eval_src,
                          log_path=out / "metrics.log")
        params = result.params
    except tr.TrainingDivergedError as exc:
        log.error("%s", exc)
        params, code = exc.params, EXIT_NUMERIC
    ckpt.save(out / "checkpoint.bin", params, text, {"mode": cfg.policy.mode})
    print(f"checkpoint written to {out / 'checkpoint.bin'}")
    return code


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    params = _load_policy(args.checkpoint, cfg, args)
    task = ex.make_task(cfg)
    episodes = _episodes(args, cfg, task)
    report = ev.evaluate(task, params, episodes, timing=not args.no_timing)
    print(report.table())
    if args.report:
        report.write_jsonl(args.report)
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    cfg = load_config(args.config)
    cfg.trajectories.count, cfg.trajectories.seed = args.count, args.seed
    if args.vmax is not None:
        cfg.trajectories.v_max_max = args.vmax
        cfg.trajectories.v_max_min = min(cfg.trajectories.v_max_min, args.vmax)
    cfg.validate()
    tset = ex.trajectory_set(cfg)
    try:
        out = write_trajectory_set(args.out, tset)
    except OSError as exc:
        raise UsageError(f"cannot write trajectories to {args.out}: {exc}") from None
    trajs = read_trajectory_dir(out)
    ok = all(validate_trajectory(t, cfg.trajectories.v_max_max) for t in trajs)
    print(f"{len(trajs)} trajectories ({len(tset.train)} train / {len(tset.test)} test) in {out}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_adapt(args) -> int:
    cfg = _config(args)
    a = cfg.adaptation
    drag = a.drag if args.drag is None else args.drag
    budget = a.triples if args.budget is None else args.budget
    ft_samples = a.fine_tune_samples if args.fine_tune_samples is None else args.fine_tune_samples
    if drag < 0 or budget < 1 or ft_samples < 0:
        raise UsageError("need drag >= 0, budget >= 1, fine-tune samples >= 0")
    params = _load_policy(args.checkpoint, cfg, args)
    out = _out_dir(args, cfg)
    base = ex.base_dynamics(cfg)
    target = DragPerturbed(base, drag) if drag > 0 else base
    task = ex.make_task(cfg, base)
    train_src, _ = ex.episode_sources(cfg, task)
    pool = train_src(1.0)
    evals = _episodes(args, cfg, task)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        triples = adp.collect_triples(task, params, target, pool, budget, clip=True)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    residual = ResidualModel.initialize(cfg.experiment.system, cfg.experiment.seed)
    try:
        residual, curve = adp.train_residual(triples, residual, base, a.residual_epochs,
                                             a.residual_lr, a.residual_momentum)
    except adp.ResidualDivergedError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    steps = task.n_steps(pool)
    n_ft = max(1, -(-ft_samples // max(steps, 1)))
    tcfg = ex.train_config(cfg)
    if a.fine_tune_lr > 0:
        tcfg.lr = a.fine_tune_lr
    curriculum = adp.fine_tune_curriculum(cfg.experiment.system)
    try:
        res = adp.fine_tune(task, params, base, residual, target, curriculum, ft_samples,
                            pool[:n_ft], evals, tcfg, a.fine_tune_epochs, cfg.experiment.seed)
    except tr.TrainingDivergedError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    text = cfg.to_text()
    ckpt.save(out / "adapted.bin", res.params, text, {"drag": drag})
    ckpt.save(out / "residual.bin", residual, text, {"drag": drag, "triples": len(triples)})
    rows = [
        {"record": "source", "error_mean": res.source[0], "error_std": res.source[1], "success_ratio": res.source[2]},
        {"record": "zero_shot", "error_mean": res.zero_shot[0], "error_std": res.zero_shot[1], "success_ratio": res.zero_shot[2]},
        {"record": "few_shot", "error_mean": res.few_shot[0], "error_std": res.few_shot[1], "success_ratio": res.few_shot[2],
         "triples": len(triples), "fine_tune_samples": res.samples_used,
         "residual_loss_initial": curve[0], "residual_loss_final": curve[-1]},
    ]
    with (out / "adaptation.jsonl").open("w") as fh:
        for r in rows:
            fh.write(json.dumps({k: ev._num(v) if isinstance(v, float) else v for k, v in r.items()}) + "\n")
    for r in rows:
        print(f"{r['record']:10s} error {r['error_mean']:.4f} +- {r['error_std']:.4f} success {r['success_ratio']:.2f}")
    return EXIT_OK


def cmd_mpc(args) -> int:
    cfg = _config(args)
    task = ex.make_task(cfg)
    params = (ex.initial_policy(cfg, task) if cfg.experiment.system != "fixedwing"
              else ex.fixedwing_policy(task, cfg.experiment.seed))  # bounds only
    episodes = _episodes(args, cfg, task)
    run = mpc.mpc_rollout(task, params, episodes, ex.mpc_config(cfg))
    n = len(episodes)
    per_traj = np.full(n, run.mean_solve_time * 1e3) if n else np.zeros(0)
    report = ev.from_rollout(task.name, run.result, per_traj)
    print(report.table())
    if args.report:
        report.write_jsonl(args.report)
    if n and run.solver_failed.mean() > 0.5:
        log.error("solver failed on %d of %d rollouts", int(run.solver_failed.sum()), n)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_inspect(args) -> int:
    try:
        info = ckpt.describe(args.checkpoint)
    except OSError as exc:
        raise UsageError(str(exc)) from None
    print(json.dumps(info, indent=1, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="apgtrack", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, system=True):
        p.add_argument("--config", help="key/value config file")
        p.add_argument("--seed", type=int)
        if system:
            p.add_argument("--system", choices=("cartpole", "quadrotor", "fixedwing"))

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("config_path", nargs="?", help="config file (same as --config)")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--mode", choices=("concurrent", "recurrent"))
    p.add_argument("--horizon", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="closed-loop evaluation of a checkpoint")
    p.add_argument("checkpoint")
    common(p)
    p.add_argument("--trajectories", help="directory written by generate-trajectories")
    p.add_argument("--count", type=int)
    p.add_argument("--report", help="line-delimited JSON output")
    p.add_argument("--no-timing", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("generate-trajectories", help="write a polynomial reference set")
    p.add_argument("--config")
    p.add_argument("--count", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vmax", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("adapt", help="residual-model adaptation to drag")
    p.add_argument("checkpoint")
    common(p)
    p.add_argument("--drag", type=float)
    p.add_argument("--budget", type=int, help="number of transition triples")
    p.add_argument("--fine-tune-samples", type=int)
    p.add_argument("--trajectories")
    p.add_argument("--count", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("mpc", help="evaluate the shooting MPC baseline")
    p.add_argument("config_path", nargs="?")
    common(p)
    p.add_argument("--trajectories")
    p.add_argument("--count", type=int)
    p.add_argument("--report")
    p.set_defaults(func=cmd_mpc)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint header")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config_path", None) and not getattr(args, "config", None):
        args.config = args.config_path
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, ckpt.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, mpc.MpcSolverError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
