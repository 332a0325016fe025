"""Command line entry point.

Exit codes: 0 success, 1 invariant or assertion failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__, _kernels
from .analysis import (
    budget_table,
    default_budget_configs,
    drift_series,
    drift_table,
    overhead,
    weight_drift,
)
from .config import load_config
from .errors import (
    CheckpointError,
    ConfigurationError,
    InvariantError,
    NonFiniteLossError,
    PreconditionError,
    TaskError,
    VLRouteError,
)
from .routing import LINEAR_KINDS

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG = 0, 1, 2


def _config(args):
    return load_config(getattr(args, "config", None), getattr(args, "set", None) or [])


def _run_dir(args, cfg) -> Path:
    return Path(args.out) if getattr(args, "out", None) else cfg.run_dir()


def _echo(cfg) -> None:
    print("# resolved config")
    print(cfg.to_json())


def cmd_train(args) -> int:
    from .experiment import run_experiment
    from .training import format_table

    cfg = _config(args)
    if not args.quiet:
        _echo(cfg)
    out = _run_dir(args, cfg)
    log = None if args.quiet else (lambda r: print(f"step {r.step:>6d}  loss {r.loss:.4f}  lr {r.lr:.2e}", flush=True))
    res = run_experiment(cfg, run_dir=out, force=args.force, on_record=log)
    print(format_table(res.eval))
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .experiment import eval_run
    from .training import format_table

    print(format_table(eval_run(args.run, args.checkpoint)))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import format_results, run_suite

    results = run_suite(args.select)
    if not results:
        raise ConfigurationError(f"no gradient case matches {args.select!r}")
    print(format_results(results, args.tol))
    bad = [r.name for r in results if not r.ok(args.tol)]
    if bad:
        print(f"invariant failed: gradient agreement (max_rel_err < {args.tol:g}) in {', '.join(bad)}",
              file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_count_params(args) -> int:
    from .experiment import build
    from .peft import count_params

    cfg = _config(args)
    model = build(cfg)
    budget = count_params(model)
    print(f"model {model.kind}: trainable {budget.trainable}, frozen {budget.frozen}, total {budget.total}")
    for name, n in budget.per_unit.items():
        print(f"  {name}: {n}")
    if cfg.peft.routing != "none" and not isinstance(cfg.peft.routing, dict):
        from .routing import RoutingKind
        if RoutingKind.parse(cfg.peft.routing) in LINEAR_KINDS and cfg.peft.share_down:
            off = count_params(build(cfg.replace(peft={"routing": "none"})))
            if off.trainable != budget.trainable:
                raise InvariantError(f"zero-parameter routing: {budget.trainable} trainable with routing, "
                                     f"{off.trainable} without")
            print(f"routing adds no parameters ({budget.trainable} == {off.trainable})")
    d, r = args.d or cfg.model.d, args.r or cfg.peft.r
    configs = default_budget_configs(d, r) if not args.only_model else []
    if configs:
        table = budget_table(configs)
        print()
        print(json.dumps(table.to_records(), indent=2) if args.json else table.to_text())
    return EXIT_OK


def cmd_drift(args) -> int:
    if args.run:
        from .experiment import FINAL_CKPT, INITIAL_CKPT
        initial, final = Path(args.run) / INITIAL_CKPT, Path(args.run) / FINAL_CKPT
    elif args.initial and args.final:
        initial, final = args.initial, args.final
    else:
        raise ConfigurationError("drift needs --run DIR or two checkpoint paths")
    records = weight_drift(initial, final)
    print(json.dumps(drift_series(records), indent=2) if args.json else drift_table(records))
    return EXIT_OK


def cmd_time(args) -> int:
    from .experiment import timing_pair

    cfg = _config(args)
    base, routed = timing_pair(cfg, routing=args.routing, batch_size=args.batch, reps=args.reps,
                               warmup=args.warmup, rounds=args.rounds)
    over = overhead(routed, base)
    for rec in (base, routed):
        print(f"{rec.label:<12s} {rec.ms_per_sample:.4f} ms/sample (median of {rec.reps}, warmup {rec.warmup})")
    print(f"overhead {100 * over:+.1f}%")
    if args.max_overhead is not None and over >= args.max_overhead:
        print(f"invariant failed: routing overhead {100 * over:.1f}% >= {100 * args.max_overhead:.0f}%",
              file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def _grid(fn, args) -> int:
    cfg = _config(args)
    if not args.quiet:
        _echo(cfg)
    rep, _ = fn(cfg, out_root=_run_dir(args, cfg), force=args.force, log=None if args.quiet else print)
    print(json.dumps(rep.to_records(), indent=2) if args.json else rep.to_text())
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiment import ablate
    return _grid(ablate, args)


def cmd_sweep(args) -> int:
    from .experiment import sweep
    return _grid(sweep, args)


def cmd_report(args) -> int:
    from .experiment import report

    rep = report(args.runs)
    text = json.dumps(rep.to_records(), indent=2) if args.json else rep.to_text()
    if args.output:
        Path(args.output).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_dump_data(args) -> int:
    from .experiment import build_dataset
    from .tasks import dump_jsonl

    cfg = _config(args)
    ds = build_dataset(cfg)
    dump_jsonl(ds, args.path)
    print(f"wrote {len(ds)} samples to {args.path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vlroute", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"vlroute {__version__} ({_kernels.BACKEND} kernels)")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=False):
        if required:
            sp.add_argument("config", help="TOML experiment config")
        else:
            sp.add_argument("config", nargs="?", help="TOML experiment config (defaults if omitted)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        return sp

    def with_out(sp):
        sp.add_argument("--out", help="output directory (default: $VLROUTE_OUT/<output.dir>)")
        sp.add_argument("--force", action="store_true", help="replace an existing run directory")
        sp.add_argument("--quiet", action="store_true")
        return sp

    sp = with_out(with_config(sub.add_parser("train", help="train and evaluate one config")))
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="re-evaluate a finished run")
    sp.add_argument("run", help="run directory")
    sp.add_argument("--checkpoint", help="checkpoint to load instead of the run's final one")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("grad-check", help="finite-difference gradient suite")
    sp.add_argument("--select", help="only cases whose name contains this text")
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.set_defaults(fn=cmd_grad_check)

    sp = with_config(sub.add_parser("count-params", help="parameter counts and budget comparison"))
    sp.add_argument("--d", type=int, help="width for the budget table (default: model.d)")
    sp.add_argument("--r", type=int, help="rank for the budget table (default: peft.r)")
    sp.add_argument("--only-model", action="store_true", help="skip the budget table")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(fn=cmd_count_params)

    sp = sub.add_parser("drift", help="Frobenius drift of PEFT maps between two checkpoints")
    sp.add_argument("initial", nargs="?")
    sp.add_argument("final", nargs="?")
    sp.add_argument("--run", help="use a run directory's initial and final checkpoints")
    sp.add_argument("--json", action="store_true", help="per-layer series for plotting")
    sp.set_defaults(fn=cmd_drift)

    sp = with_config(sub.add_parser("time", help="routed vs unrouted inference time"))
    sp.add_argument("--routing", help="routing kind to compare against none (default: the config's)")
    sp.add_argument("--batch", type=int, default=256)
    sp.add_argument("--reps", type=int, default=7)
    sp.add_argument("--warmup", type=int, default=2)
    sp.add_argument("--rounds", type=int, default=3)
    sp.add_argument("--max-overhead", type=float, help="fail (exit 1) at or above this fraction, e.g. 0.2")
    sp.set_defaults(fn=cmd_time)

    for name, fn, text in (("ablate", cmd_ablate, "x_R replacement ablation (true / noise / ones)"),
                           ("sweep", cmd_sweep, "routing kinds x {LoRA, Adapter} grid")):
        sp = with_out(with_config(sub.add_parser(name, help=text)))
        sp.add_argument("--json", action="store_true")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("report", help="deltas of runs against the routing-None baseline")
    sp.add_argument("runs", nargs="+", help="run directories")
    sp.add_argument("--json", action="store_true")
    sp.add_argument("--output", help="also write the report here")
    sp.set_defaults(fn=cmd_report)

    sp = with_config(sub.add_parser("dump-data", help="write the config's dataset as JSON lines"))
    sp.add_argument("path")
    sp.set_defaults(fn=cmd_dump_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigurationError, TaskError, PreconditionError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvariantError, CheckpointError, NonFiniteLossError, AssertionError) as e:
        print(f"invariant failed: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except VLRouteError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
