"""Command-line entry points. Every subcommand writes UTF-8 CSV with LF endings."""
from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import fields
from pathlib import Path

from .controller import AffineResponse, ControllerConfig, simulate_dynamics
from .errors import ConfigError, GraceError
from .harness.train import VARIANTS, RunConfig, coerce, load_config, parse_config_text


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


# flag name -> RunConfig field, for the flags that get a dedicated option
_TRAIN_FLAGS = ("seed", "epochs", "bits", "batch_size", "lr_w", "lr_s", "momentum",
                "noise_fraction", "rcka_pooling", "n_train", "n_eval")


def cmd_train_toy(args) -> int:
    from .harness.train import Experiment, run_report_write, train

    overrides = {}
    for item in args.set or []:
        key, _, value = item.partition("=")
        overrides.update(parse_config_text(f"{key}={value}"))
    for name in _TRAIN_FLAGS:
        value = getattr(args, name)
        if value is not None:
            overrides[name] = coerce(name, str(value))
    if args.answer_only:
        overrides["answer_only"] = True
    cfg = load_config(args.config, **overrides)

    variants = VARIANTS if args.variant == "all" else tuple(args.variant.split(","))
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    exp = Experiment.build(cfg)
    status = 0
    for variant in variants:
        report = train(cfg, variant, exp)
        stem = out / f"{variant}_bits{cfg.bits}_seed{cfg.seed}"
        run_report_write(report, stem.with_suffix(".csv"))
        if report.failed:
            print(f"{variant}: diverged at step {report.failed_step}", file=sys.stderr)
            status = 1
        elif report.final is not None:
            f = report.final
            print(f"{variant}: eval_acc={f.eval_acc:.4f} eval_ce={f.eval_ce:.4f}")
        if not args.no_figures and report.rows:
            from .plotting import plot_training
            plot_training(report, stem.with_suffix(".png"))
    return status


def cmd_entropy_error(args) -> int:
    import numpy as np

    from .harness import entropy_error as ee
    from .harness.model import make_teacher

    if args.teacher == "self-sampling":
        logits, labels = ee.self_sampling_teacher(args.seed, args.samples or 20000)
        result = ee.from_logits(logits, labels, args.bins)
    else:
        teacher, task = make_teacher(args.seed)
        batch = task.sample(args.samples or 5000, np.random.default_rng([args.seed, 77]))
        result = ee.entropy_error_experiment(teacher, batch, args.bins)
    out = Path(args.out)
    _write(out, result.to_csv())
    _write(out.with_name(out.stem + "_summary.csv"), result.summary_csv())
    print(f"pearson_r={result.pearson_r:.4f} binned_r2={result.binned_r2:.4f} monotone={result.monotone}")
    if not args.no_figures:
        from .plotting import plot_entropy_error
        plot_entropy_error(result, out.with_suffix(".png"))
    return 0


def cmd_simulate_controller(args) -> int:
    defaults = ControllerConfig()
    cfg = ControllerConfig(tau=args.tau if args.tau is not None else defaults.tau,
                           eta=args.eta if args.eta is not None else defaults.eta,
                           beta_init=args.beta_init)
    traj = simulate_dynamics(AffineResponse(args.intercept, args.slope), args.steps, cfg,
                             args.mode, args.noise, args.seed)
    rows = zip(traj.step.tolist(), traj.beta.tolist(), traj.ema_loss.tolist(), traj.raw_loss.tolist())
    out = Path(args.out)
    _write(out, _csv(("step", "beta", "ema_loss", "raw_loss"), rows))
    print(f"final beta={traj.beta[-1]:.6f} ema={traj.ema_loss[-1]:.6f} |ema-tau|={traj.deviation(cfg.tau):.6f}")
    if not args.no_figures:
        from .plotting import plot_controller
        plot_controller(traj, cfg.tau, out.with_suffix(".png"))
    return 0


def cmd_quant_bench(args) -> int:
    from .quant import bench

    rows = bench(args.bits, args.group_size, args.rows, args.cols, args.iters, args.seed)
    header = ("impl", "bytes", "ns_per_matvec", "max_abs_err")
    text = _csv(header, ([r[k] for k in header] for r in rows))
    if args.out:
        out = Path(args.out)
        _write(out, text)
        if not args.no_figures:
            from .plotting import plot_bench
            plot_bench(rows, out.with_suffix(".png"))
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gracekit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-toy", help="train a toy student and write a per-epoch CSV")
    t.add_argument("--variant", default="grace", help=f"one of {', '.join(VARIANTS)}, a comma list, or 'all'")
    t.add_argument("--bits", choices=("4", "8", "fp"))
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", default="runs")
    t.add_argument("--config", help="key=value file; flags override it")
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr-w", dest="lr_w", type=float)
    t.add_argument("--lr-s", dest="lr_s", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--noise-fraction", dest="noise_fraction", type=float)
    t.add_argument("--rcka-pooling", dest="rcka_pooling", choices=("per_sample", "concat"))
    t.add_argument("--n-train", dest="n_train", type=int)
    t.add_argument("--n-eval", dest="n_eval", type=int)
    t.add_argument("--answer-only", action="store_true")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any run-config field: " + ", ".join(f.name for f in fields(RunConfig)))
    t.set_defaults(func=cmd_train_toy)

    e = sub.add_parser("entropy-error", help="teacher entropy against teacher error")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--bins", type=int, default=10)
    e.add_argument("--out", default="entropy_error.csv")
    e.add_argument("--teacher", choices=("self-sampling", "trained"), default="self-sampling")
    e.add_argument("--samples", type=int)
    e.set_defaults(func=cmd_entropy_error)

    c = sub.add_parser("simulate-controller", help="run the beta controller against an affine loss model")
    c.add_argument("--steps", type=int, default=30000)
    c.add_argument("--tau", type=float)
    c.add_argument("--eta", type=float)
    c.add_argument("--beta-init", dest="beta_init", type=float, default=1.0)
    c.add_argument("--mode", choices=("adaptive", "fixed"), default="adaptive")
    c.add_argument("--noise", type=float, default=0.0)
    c.add_argument("--intercept", type=float, default=0.5)
    c.add_argument("--slope", type=float, default=0.1)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default="controller.csv")
    c.set_defaults(func=cmd_simulate_controller)

    q = sub.add_parser("quant-bench", help="storage and matvec comparison for packed weights")
    q.add_argument("--bits", type=int, choices=(4, 8), default=4)
    q.add_argument("--group-size", dest="group_size", type=int, default=128)
    q.add_argument("--rows", type=int, default=256)
    q.add_argument("--cols", type=int, default=256)
    q.add_argument("--iters", type=int, default=20, help="timing repetitions; 0 skips timing")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", help="CSV path; stdout when omitted")
    q.set_defaults(func=cmd_quant_bench)

    for sp in (t, e, c, q):
        sp.add_argument("--no-figures", action="store_true", help="skip the PNG next to the CSV")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (GraceError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
