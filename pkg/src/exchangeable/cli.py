"""``exchangeable`` command line: train, eval, sweep, verify, space-report.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import analysis, diffcore
from .config import RunConfig, load_config
from .encoder import ConfigurationError
from .ppo import Trainer, TrainingAborted, evaluate_policy
from .verify import FAULTS, run_suite

log = logging.getLogger("exchangeable")

FINAL_CHECKPOINT = "ckpt_final.txt"
METRICS_FILE = "metrics.csv"


class UsageError(Exception):
    pass


def _csv_list(text: str, cast=str) -> list:
    items = [cast(t) for t in text.split(",") if t.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a non-empty comma-separated list")
    return items


def run_id_for(cfg: RunConfig) -> str:
    size = cfg.env_overrides.get("num_food", cfg.env_config().num_food) if cfg.env_name != "convoy" else cfg.env_config().convoy_size
    return f"{cfg.env_name}-{cfg.encoder_type}-n{size}-s{cfg.seed}"


def train_run(cfg: RunConfig, out_dir: Path | None = None, quiet: bool = False) -> Path:
    """Train per ``cfg``; writes metrics, periodic checkpoints and the final checkpoint."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.to_text())
    metrics = out / METRICS_FILE
    if metrics.exists():
        metrics.unlink()
    policy = cfg.build_policy()
    trainer = Trainer(policy, cfg.env_factory(), cfg.ppo, cfg.seed, cfg.workers, run_id_for(cfg))

    for _ in range(cfg.ppo.iters):
        try:
            rec = trainer.step()
        except TrainingAborted as exc:
            diffcore.save_checkpoint(out / f"ckpt_{trainer.iteration}.txt", exc.last_good)
            raise
        analysis.write_metrics([rec], metrics)
        if not quiet:
            log.info(
                "iter %d  steps %d  return %.3f  len %.1f  kl %.4f",
                rec.iteration, rec.env_steps, rec.mean_return, rec.mean_length, rec.approx_kl,
            )
        if rec.iteration % cfg.checkpoint_every == 0:
            diffcore.save_checkpoint(out / f"ckpt_{rec.iteration}.txt", policy.state_dict())
    diffcore.save_checkpoint(out / FINAL_CHECKPOINT, policy.state_dict())
    return out


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _load(args)
    train_run(cfg, quiet=args.quiet)
    print(f"wrote {Path(cfg.out_dir) / METRICS_FILE} and {Path(cfg.out_dir) / FINAL_CHECKPOINT}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    policy = cfg.build_policy()
    try:
        state = diffcore.load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read checkpoint: {exc}") from exc
    try:
        policy.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"checkpoint does not match config: {exc}") from exc
    res = evaluate_policy(policy, cfg.env_factory(), args.episodes, args.seed, not args.stochastic)
    print(f"episodes     {args.episodes}")
    print(f"mean_return  {res.mean_return:.6f}")
    print(f"std_return   {res.std_return:.6f}")
    print(f"mean_length  {res.mean_length:.3f}")
    print("causes       " + ", ".join(f"{k}={v}" for k, v in sorted(res.causes.items())))
    return 0


def cmd_sweep(args) -> int:
    base = _load(args)
    root = Path(base.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    failures = []
    metric_files = []
    sizes = args.num_food if base.env_name != "convoy" else [None]
    for n in sizes:
        for enc in args.encoders:
            for seed in args.seeds:
                extra = [f"encoder.type={enc}", f"run.seed={seed}"]
                if n is not None:
                    extra.append(f"env.num_food={n}")
                try:
                    cfg = load_config(args.config, [*args.set, *extra])
                except ConfigurationError as exc:
                    raise UsageError(str(exc)) from exc
                cell = root / run_id_for(cfg)
                cfg.out_dir = str(cell)
                if (cell / FINAL_CHECKPOINT).exists():
                    print(f"skip {cell.name} (complete)")
                else:
                    print(f"run  {cell.name}")
                    try:
                        train_run(cfg, cell, quiet=args.quiet)
                    except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
                        log.error("cell %s failed: %s", cell.name, exc)
                        failures.append(cell.name)
                        continue
                metric_files.append(cell / METRICS_FILE)
    if metric_files:
        rows = analysis.summarize_runs(metric_files, args.window, args.threshold)
        text = analysis.format_summary(rows)
        (root / "summary.txt").write_text(text + "\n")
        analysis.write_summary_csv(rows, root / "summary.csv")
        print(text)
    if failures:
        print(f"{len(failures)} cell(s) failed: {', '.join(failures)}", file=sys.stderr)
        return 1
    return 0


def cmd_verify(args) -> int:
    results = run_suite(args.trials, args.tolerance, args.seed, args.inject)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("ALL PASS" if ok else "FAILURES: " + ", ".join(r.name for r in results if not r.passed))
    return 0 if ok else 1


def cmd_space_report(args) -> int:
    try:
        report = analysis.space_sizes(args.n, args.m)
    except diffcore.DomainError as exc:
        raise UsageError(str(exc)) from exc
    print(analysis.format_space_report(report))
    if args.csv:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "space_report.csv"
        path.write_text(
            "n,m,ordered_size,invariant_size,ratio\n"
            f"{report.n},{report.m},{report.ordered_size},{report.invariant_size},{report.ratio}\n"
        )
        print(f"wrote {path}")
    return 0


def _load(args) -> RunConfig:
    overrides = list(args.set)
    if getattr(args, "seed", None) is not None and args.command == "train":
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, "out", None):
        overrides.append(f"run.out_dir={args.out}")
    return load_config(args.config, overrides)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exchangeable", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="sectioned key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--out", help="output directory (overrides run.out_dir)")
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("train", help="train one policy")
    common(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stochastic", action="store_true", help="sample actions instead of using the mean")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train over food counts x encoders x seeds")
    common(p)
    p.add_argument("--num-food", type=lambda s: _csv_list(s, int), default=[1])
    p.add_argument("--encoders", type=_csv_list, default=["attention", "ordered"])
    p.add_argument("--seeds", type=lambda s: _csv_list(s, int), default=[0])
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the invariance / decomposition / gradient property suite")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject", choices=sorted(FAULTS), default="none", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("space-report", help="exact ordered vs invariant input-space sizes")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--csv", action="store_true", help="also write space_report.csv under --out")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_space_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    if getattr(args, "trials", 1) < 1:
        print("error: --trials must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
