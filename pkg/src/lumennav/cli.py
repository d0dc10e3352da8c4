"""Command-line entry point: ``lumennav <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime error.
Output paths given as bare file names are placed under ``$LUMENNAV_OUT``
when that variable is set.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .env import write_jsonl
from .geometry import TubeEnvironment, generate_environment
from .metrics import TrajectoryLog, aggregate, evaluate, plot_trajectories, summary_csv, write_report
from .perception import DegradationProfile, calibrate_profile, CalibrationError
from .pipeline import (
    ABLATION_VARIANTS,
    ConfigError,
    RunConfig,
    collision_free_completions,
    eval_tubes,
    resolve_degradation,
    run_episodes,
    train_policy,
)
from .render import DatasetConfig, export_dataset
from .rl import PpoConfig, load_checkpoint, save_checkpoint

EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


def _out(path):
    p = Path(path)
    base = os.environ.get("LUMENNAV_OUT")
    if base and not p.is_absolute() and p.parent == Path("."):
        p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _out_dir(path):
    p = _out(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _existing(path, what="file"):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return p


def _load_config(args):
    cfg = RunConfig.load(_existing(args.config, "config file")) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "degradation", None):
        cfg = cfg.replace(degradation=DegradationProfile.load(_existing(args.degradation, "degradation file")))
    return cfg


def _load_env(spec, config, default_seed=0):
    """An environment from a JSON file, or a profile name generated at ``default_seed``."""
    if spec in ("simple", "complex"):
        return generate_environment(spec, default_seed, texture_amplitude=config.texture_amplitude)
    return TubeEnvironment.load(_existing(spec, "environment file"))


def _stamp(cfg, seed):
    return {"config_hash": cfg.hash, "seed": seed}


# -- subcommands ---------------------------------------------------------------------

def cmd_gen_env(args):
    env = generate_environment(args.profile, args.seed, texture_amplitude=args.texture_amplitude)
    out = _out(args.out)
    env.save(out)
    print(f"wrote {out} ({env.profile_tag}, length {env.length:.1f} mm)")


def cmd_dataset(args):
    env = TubeEnvironment.load(_existing(args.env, "environment file"))
    cfg = DatasetConfig(args.width, args.height, args.far_clip, tuple(args.fov_range), tuple(args.light_range))
    manifest = export_dataset(env, args.count, args.seed, _out_dir(args.out), cfg)
    print(f"wrote {manifest['count']} samples to {args.out}")


def cmd_calibrate(args):
    cfg = _load_config(args)
    env = _load_env(args.env, cfg, cfg.calibration_env_seed)
    val_env = generate_environment(env.profile_tag, args.validation_seed, texture_amplitude=cfg.texture_amplitude)
    try:
        res = calibrate_profile(env, cfg.episode.camera, args.abs_rel, args.delta1, seed=args.seed,
                                n_validate=args.frames, validation_env=val_env)
    except CalibrationError as exc:
        best = exc.best
        raise RuntimeError(f"{exc} (best profile {best.profile.to_dict()})") from exc
    out = _out(args.out)
    res.profile.save(out, extra={"abs_rel": res.abs_rel, "delta1": res.delta1, "frames": res.n_frames,
                                 "targets": [args.abs_rel, args.delta1], **_stamp(cfg, args.seed)})
    print(f"abs_rel {res.abs_rel:.4f} delta1 {res.delta1:.4f} -> {out}")


def _train_run(cfg, args, out_dir, reward_terms=None, steps=None):
    profile, calib = resolve_degradation(cfg)
    agent, curve = train_policy(cfg, profile, seed=args.seed, total_steps=steps, reward_terms=reward_terms,
                                curve_path=out_dir / "curve.csv",
                                progress=None if args.quiet else _progress)
    save_checkpoint(out_dir / "checkpoint.json", agent,
                    extra={"run_config": cfg.to_dict(), "degradation": profile.to_dict(), **_stamp(cfg, args.seed)})
    return agent, profile


def _progress(row):
    print(f"update {row['update']:4d} steps {row['steps']:7d} mean_reward {row['mean_reward']:.1f} "
          f"success {row['success_rate']:.2f} collision {row['collision_rate']:.2f}", file=sys.stderr, flush=True)


def cmd_train(args):
    cfg = _load_config(args)
    if args.env:
        if args.env not in ("simple", "complex"):
            raise UsageError("--env must name a profile (simple or complex) for training")
        cfg = cfg.replace(train_profile=args.env)
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    overrides = {"n_envs": args.workers}
    if args.steps:
        overrides["total_steps"] = args.steps
    cfg = cfg.replace(ppo=PpoConfig.from_dict({**cfg.ppo.to_dict(), **overrides}))
    out_dir = _out_dir(args.out)
    (out_dir / "run_config.json").write_text(json.dumps({**cfg.to_dict(), **_stamp(cfg, args.seed)},
                                                        indent=1, sort_keys=True) + "\n")
    _train_run(cfg, args, out_dir)
    print(f"wrote {out_dir / 'checkpoint.json'} and {out_dir / 'curve.csv'}")


def _eval_common(args, kind, agent=None, profile=None):
    cfg = _load_config(args)
    if profile is None:
        profile, _ = resolve_degradation(cfg)
    seeds = list(range(args.seed, args.seed + args.episodes))
    if args.env in ("simple", "complex"):
        tubes = eval_tubes(cfg, seeds, args.env)
    else:
        tube = TubeEnvironment.load(_existing(args.env, "environment file"))
        tubes = [(s, tube) for s in seeds]
    results = run_episodes(cfg, profile, kind, agent, tubes)
    out_dir = _out_dir(args.log_out)
    for r in results:
        header = {"camera": {"width": r.log.width, "height": r.log.height}, "step_period": r.log.step_period,
                  "clearance_min": cfg.episode.clearance_min, "controller": kind,
                  "environment": r.tube.to_dict(), **_stamp(cfg, r.seed)}
        write_jsonl(out_dir / f"episode_{r.seed:05d}.jsonl", r.records, header=header)
    agg = aggregate([r.report for r in results])
    write_report(out_dir / "metrics.json", {
        "controller": kind, "episodes": [dict(seed=r.seed, **r.report.to_dict()) for r in results],
        "aggregate": agg, "collision_free_completions": collision_free_completions(results),
        **_stamp(cfg, args.seed)})
    summary_csv([(kind, agg)], out_dir / "summary.csv")
    print(json.dumps(agg, sort_keys=True))


def cmd_eval(args):
    agent = load_checkpoint(_existing(args.policy, "policy checkpoint"))
    profile = None
    if "degradation" in getattr(agent, "meta", {}) and not args.degradation:
        profile = DegradationProfile.from_dict(agent.meta["degradation"])
    _eval_common(args, "policy", agent, profile)


def cmd_baseline(args):
    _eval_common(args, args.kind)


def cmd_metrics(args):
    log = TrajectoryLog.load(_existing(args.log, "log file"))
    if args.env:
        tube = TubeEnvironment.load(_existing(args.env, "environment file"))
    else:
        from .env import read_jsonl
        header, _ = read_jsonl(args.log)
        if "environment" not in header:
            raise UsageError("log has no embedded environment; pass --env")
        tube = TubeEnvironment.from_dict(header["environment"])
    rep = evaluate(log, tube, args.mode)
    text = json.dumps(rep.to_dict(), indent=1, sort_keys=True)
    if args.out:
        _out(args.out).write_text(text + "\n")
    print(text)


def cmd_plot(args):
    logs = [TrajectoryLog.load(_existing(p, "log file")) for p in args.log]
    tube = TubeEnvironment.load(_existing(args.env, "environment file"))
    out = _out(args.out)
    plot_trajectories(out, tube, logs, args.label or [Path(p).stem for p in args.log])
    print(f"wrote {out}")


def cmd_ablate(args):
    cfg = _load_config(args)
    profile, _ = resolve_degradation(cfg)
    out_dir = _out_dir(args.out)
    rows = []
    for terms in ABLATION_VARIANTS:
        name = "+".join(terms)
        agent, _ = train_policy(cfg, profile, seed=args.seed, total_steps=args.steps, reward_terms=terms,
                                curve_path=out_dir / f"curve_{name}.csv",
                                progress=None if args.quiet else _progress)
        results = run_episodes(cfg, profile, "policy", agent)
        rows.append((name, aggregate([r.report for r in results])))
        print(f"{name}: {json.dumps(rows[-1][1], sort_keys=True)}", file=sys.stderr)
    text = summary_csv(rows, out_dir / "ablation.csv")
    write_report(out_dir / "ablation.json", {"rows": [{"variant": n, **a} for n, a in rows],
                                             "steps": args.steps, **_stamp(cfg, args.seed)})
    print(text, end="")


# -- parser -------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="lumennav", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    s = sub.add_parser("gen-env", help="generate a tube environment")
    s.add_argument("--profile", choices=("simple", "complex"), required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--texture-amplitude", type=float, default=0.05)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_env)

    s = sub.add_parser("dataset", help="export rendered RGB/depth pairs")
    s.add_argument("--env", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--far-clip", type=float, default=300.0)
    s.add_argument("--fov-range", type=float, nargs=2, default=(90.0, 140.0))
    s.add_argument("--light-range", type=float, nargs=2, default=(0.4, 2.0))
    s.set_defaults(func=cmd_dataset)

    s = sub.add_parser("calibrate", help="fit a depth degradation profile to (Abs.Rel, delta_1)")
    s.add_argument("--env", default="simple", help="environment JSON or profile name")
    s.add_argument("--abs-rel", type=float, default=0.245)
    s.add_argument("--delta1", type=float, default=0.677)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=200)
    s.add_argument("--validation-seed", type=int, default=1001)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("train", help="train a PPO navigation policy")
    s.add_argument("--env", default=None, help="training environment profile (simple or complex)")
    s.add_argument("--config")
    s.add_argument("--degradation", help="degradation profile JSON (calibrated when omitted)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, help="override total training steps")
    s.add_argument("--workers", type=int, default=1, help="rollout environments stepped per update")
    s.add_argument("--quiet", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    for name, helptext in (("eval", "evaluate a trained policy"), ("baseline", "run a scripted baseline")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--env", default="complex", help="environment JSON or profile name (seeded per episode)")
        if name == "eval":
            s.add_argument("--policy", required=True)
            s.set_defaults(func=cmd_eval)
        else:
            s.add_argument("--kind", choices=("oracle", "lumen"), required=True)
            s.set_defaults(func=cmd_baseline)
        s.add_argument("--episodes", type=int, default=10)
        s.add_argument("--seed", type=int, default=900)
        s.add_argument("--config")
        s.add_argument("--degradation")
        s.add_argument("--log-out", required=True, help="directory for JSONL logs and metrics")

    s = sub.add_parser("metrics", help="compute metrics for a trajectory log")
    s.add_argument("--log", required=True)
    s.add_argument("--env", help="environment JSON (defaults to the one embedded in the log)")
    s.add_argument("--mode", choices=("excess", "literal"), default="excess")
    s.add_argument("--out")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("plot", help="SVG of trajectory projections")
    s.add_argument("--env", required=True)
    s.add_argument("--log", nargs="+", required=True)
    s.add_argument("--label", nargs="*")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("ablate", help="reward-term stacking ablation")
    s.add_argument("--config")
    s.add_argument("--degradation")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=100_000)
    s.add_argument("--quiet", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except json.JSONDecodeError as exc:
        print(f"error: malformed JSON: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
