"""``simplr`` command line: train, eval, gradcheck, ablate, scale-profile, export-data.

Exit codes: 0 success, 1 a check or metric failed, 2 bad usage or input.
"""

from __future__ import annotations

import os

# BLAS thread pools must be capped before numpy loads
_THREADS = os.environ.get("SIMPLR_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from ..data import DatasetError, export_dataset, import_dataset  # noqa: E402
from ..model import CheckpointError, load_checkpoint  # noqa: E402
from ..model.config import ConfigError  # noqa: E402
from .report import emit_figure  # noqa: E402

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _load_run(args):
    from .train import RunConfig

    run = RunConfig.from_text(Path(args.config).read_text()) if args.config else RunConfig()
    changes = {}
    if getattr(args, "task", None):
        changes["task"] = args.task
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        changes["steps"] = args.steps
        if args.steps <= run.warmup:
            # short runs keep a proportional warmup rather than failing the invariant
            changes["warmup"] = args.steps // 4
    return run.with_(**changes) if changes else run


def _scenes(args, run=None):
    from .train import RunConfig, make_scenes

    if args.data:
        return import_dataset(args.data)
    run = run or RunConfig()
    count = args.count if args.count is not None else run.val_count
    return make_scenes(range(run.val_start, run.val_start + count))


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ---------------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .train import evaluate, make_scenes, train

    run = _load_run(args)
    out = _out(args, "runs/train")
    every = max(1, run.steps // 20)
    result = train(run, out, log_every=every, progress=print)
    emit_figure(out / "train_log.csv", "loss", f"Training loss ({run.task})", draw=not args.no_plot)
    if result.aborted:
        print(f"training aborted on a non-finite loss; last good checkpoint: {result.checkpoint}")
        return EXIT_FAIL
    report = evaluate(result.params, run.model, make_scenes(run.val_seeds))
    report.to_csv(out / "metrics.csv")
    print(f"trained {run.steps} steps in {result.seconds:.1f}s; checkpoint {result.checkpoint}")
    print(report)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate_checkpoint

    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    report = evaluate_checkpoint(args.checkpoint, _scenes(args), args.task)
    print(report)
    if args.out:
        report.to_csv(_out(args, "") / "metrics.csv")
    if args.min_ap50 is not None and report.ap50 < args.min_ap50:
        print(f"AP@0.5 {report.ap50:.4f} below required {args.min_ap50}")
        return EXIT_FAIL
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suites, suites_for, write_results

    try:
        suites = suites_for(args.scope)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    results = run_suites(args.scope, seed=args.seed or 0, suites=suites, progress=lambda line: print(line, flush=True))
    out = _out(args, "runs/gradcheck")
    write_results(results, out / "gradcheck.csv")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed; "
          f"{sum(r.seconds for r in results):.1f}s")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_ablate(args) -> int:
    from .ablate import GridError, ablate, directional_findings, worker_count

    if not args.grid:
        raise UsageError("ablate needs --grid, e.g. mechanism or m=2,4,6")
    if not args.config and not args.task:
        args.task = "instance"
    run = _load_run(args)
    out = _out(args, "runs/ablate")
    try:
        cells = ablate(run, args.grid, out, workers=worker_count(args.workers), draw=not args.no_plot)
    except GridError as exc:
        raise UsageError(str(exc)) from exc
    for c in cells:
        print("  ".join(str(v) for v in c.row()))
    for note in directional_findings(cells):
        print(note)
    return EXIT_OK


def cmd_scale_profile(args) -> int:
    from .profile import ScaleProfileError, profile_scales, small_object_check, write_profile

    if not args.checkpoint:
        raise UsageError("scale-profile needs --checkpoint")
    params, cfg = load_checkpoint(args.checkpoint)
    try:
        profile = profile_scales(params, cfg, _scenes(args))
    except ScaleProfileError as exc:
        raise UsageError(str(exc)) from exc
    paths = write_profile(profile, _out(args, "runs/scale_profile"), draw=not args.no_plot)
    for row in profile.rows():
        print("  ".join(str(v) for v in row))
    print(small_object_check(profile)[1])
    print(f"wrote {paths['csv']}")
    return EXIT_OK


def cmd_export_data(args) -> int:
    if not args.out:
        raise UsageError("export-data needs --out PATH for the container file")
    start = args.seed or 0
    count = args.count if args.count is not None else 200
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    export_dataset(range(start, start + count), path)
    print(f"wrote {count} scenes (seeds {start}..{start + count - 1}) to {path}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate,
    "scale-profile": cmd_scale_profile, "export-data": cmd_export_data,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="simplr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="run config file (key=value lines; model.* keys set the model)")
        p.add_argument("--seed", type=int, help="run seed, or first scene seed for export-data")
        p.add_argument("--out", help="output directory (file path for export-data)")
        p.add_argument("--no-plot", action="store_true", help="write plot scripts without rendering PNGs")
        return p

    p = add("train", "train a detector")
    p.add_argument("--steps", type=int)
    p.add_argument("--task", choices=("detect", "instance", "panoptic"))

    for name, help_text in (("eval", "score a checkpoint"), ("scale-profile", "scale weights by object size")):
        p = add(name, help_text)
        p.add_argument("--checkpoint")
        p.add_argument("--data", help="dataset container; default is the held-out generated scenes")
        p.add_argument("--count", type=int, help="number of held-out scenes when --data is absent")
        if name == "eval":
            p.add_argument("--task", choices=("detect", "instance", "panoptic"))
            p.add_argument("--min-ap50", type=float, help="exit 1 when AP@0.5 falls below this")

    p = add("gradcheck", "finite-difference gradient suites")
    p.add_argument("--scope", default="all", help="ops, attention, model, loss or all")

    p = add("ablate", "train a grid of attention settings")
    p.add_argument("--grid", help="axes: mechanism, s, m, lambda, feature_scale; e.g. 'm=2,4,6'")
    p.add_argument("--steps", type=int)
    p.add_argument("--task", choices=("detect", "instance", "panoptic"))
    p.add_argument("--workers", type=int, help="parallel cell processes (capped by SIMPLR_THREADS)")

    p = add("export-data", "write generated scenes to a container file")
    p.add_argument("--count", type=int)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"simplr {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
