"""Command-line front end.

Subcommands::

    resm-merge merge PLAN.json [--threads N]
    resm-merge inspect [--ranks] [--outliers] [--sparsity] BASE MODEL [MODEL ...]
    resm-merge simulate-conflict --k 16,64,256 [--epsilon auto] [--trials N] [--seed S]
    resm-merge gen-fixtures OUT_DIR [--n-models N] [--rank R] [...]

Exit codes: 0 success, 1 a simulated bound check failed, 2 configuration
error, 3 incompatible checkpoints, 4 numerical failure, 5 I/O failure.
Errors are printed to stderr as a single JSON line. ``MERGE_LOG`` sets the
log level (error, warn, info, debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import diagnostics
from .errors import ConfigError, IoFailure, MergeError
from .fixtures import FixtureSpec, write_fixtures
from .plan import load_plan
from .tensor_store import CheckpointReader, validate_compat
from .tsv_merge import dump_json, run_plan

logger = logging.getLogger("resm_merge")

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "warning": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def _setup_logging() -> None:
    level = _LOG_LEVELS.get(os.environ.get("MERGE_LOG", "warn").lower(), logging.WARNING)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("resm_merge")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def _fail(exc: BaseException, code: int) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    layer = getattr(exc, "layer", None)
    if layer is not None:
        payload["layer"] = layer
    print(json.dumps(payload), file=sys.stderr)
    return code


def _emit(text: str, output: str | None, to_stdout: bool) -> None:
    if output:
        Path(output).write_text(text, encoding="utf-8")
    if to_stdout or not output:
        sys.stdout.write(text)


# -- merge ------------------------------------------------------------------------


def cmd_merge(args) -> int:
    plan = load_plan(args.config)
    if args.threads is not None:
        plan.threads = args.threads
    report = run_plan(plan)
    if args.stdout:
        sys.stdout.write(dump_json(report).decode("utf-8"))
    logger.info("wrote %s (%d tensors)", plan.output_path, len(report["layers"]))
    return 0


# -- inspect ----------------------------------------------------------------------


def cmd_inspect(args) -> int:
    if len(args.paths) < 2:
        raise ConfigError("inspect needs a base checkpoint and at least one model")
    if not (args.ranks or args.outliers or args.sparsity):
        args.ranks = args.outliers = args.sparsity = True
    readers = []
    try:
        for p in args.paths:
            try:
                readers.append(CheckpointReader(p))
            except IoFailure:
                raise
            except OSError as exc:
                raise IoFailure(f"cannot open {p}: {exc.strerror}") from exc
        manifest = validate_compat(readers)
        base, models = readers[0], readers[1:]
        deltas_by_layer = {}
        for entry in manifest:
            if not entry.mergeable:
                continue
            b = base.load(entry.name)
            deltas_by_layer[entry.name] = [m.load(entry.name) - b for m in models]
    finally:
        for r in readers:
            r.close()

    report: dict = {}
    csv_rows = []
    if args.ranks:
        ranks = diagnostics.rank_profile(deltas_by_layer, args.energy)
        per_model = diagnostics.model_rank_profile(deltas_by_layer, args.energy)
        report["ranks"] = {"energy": args.energy, "layers": ranks, "per_model": per_model}
        for name, k in ranks.items():
            csv_rows.append({"report": "rank", "layer": name, "value": k})
    if args.outliers:
        outliers = {
            name: diagnostics.outlier_profile(ds, args.sigma, args.mask_singular_outliers)
            for name, ds in deltas_by_layer.items()
        }
        report["outliers"] = outliers
        for name, prof in outliers.items():
            for m in prof["models"]:
                csv_rows.append({"report": "alpha", "layer": name, "model": m["model"], "value": m["alpha"]})
    if args.sparsity:
        omega = diagnostics.sparsity_profile(deltas_by_layer, args.epsilon)
        report["sparsity"] = {"epsilon": args.epsilon, "layers": omega}
        for name, value in omega.items():
            csv_rows.append({"report": "omega", "layer": name, "value": value})

    _emit(json.dumps(report, indent=2) + "\n", args.output, args.stdout)
    if args.csv:
        Path(args.csv).write_text(
            diagnostics.rows_to_csv(csv_rows, ["report", "layer", "model", "value"]), encoding="utf-8"
        )
    if args.plot_data:
        _write_plot_data(Path(args.plot_data), report)
    return 0


def _write_plot_data(out_dir: Path, report: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    series = {}
    if "ranks" in report:
        series["ranks"] = list(report["ranks"]["layers"].items())
    if "sparsity" in report:
        series["sparsity"] = list(report["sparsity"]["layers"].items())
    for name, points in series.items():
        lines = [f"{i}\t{value}\t{layer}" for i, (layer, value) in enumerate(points)]
        (out_dir / f"{name}.tsv").write_text("x\ty\tlayer\n" + "\n".join(lines) + "\n")


# -- simulate-conflict ----------------------------------------------------------------


def _parse_k_list(text: str) -> list[int]:
    try:
        ks = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"--k must be a comma-separated list of integers: {text!r}") from exc
    if not ks or any(k < 1 for k in ks):
        raise ConfigError("--k values must be positive integers")
    return ks


def cmd_simulate_conflict(args) -> int:
    ks = _parse_k_list(args.k)
    if args.trials < 1:
        raise ConfigError("--trials must be positive")
    rows = []
    for k in ks:
        eps = 1 / math.sqrt(k) if args.epsilon == "auto" else float(args.epsilon)
        rows.append(diagnostics.conflict_mc(k, eps, args.trials, args.seed))
    if args.json:
        text = json.dumps([r.as_dict() for r in rows], indent=2) + "\n"
    else:
        header = f"{'k':>6} {'epsilon':>9} {'p_hat':>9} {'E|u.v|':>9} {'bound':>9}  result"
        lines = [header]
        for r in rows:
            lines.append(
                f"{r.k:>6} {r.epsilon_conflict:>9.5f} {r.p_hat:>9.5f} "
                f"{r.expected_abs_dot:>9.5f} {r.bound:>9.5f}  {'pass' if r.passes else 'FAIL'}"
            )
        text = "\n".join(lines) + "\n"
    _emit(text, args.output, args.stdout)
    return 0 if all(r.passes for r in rows) else 1


# -- gen-fixtures -------------------------------------------------------------------


def cmd_gen_fixtures(args) -> int:
    raw = {}
    if args.spec:
        try:
            raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"fixture spec is not valid JSON: {exc}") from exc
    overrides = {
        "n_models": args.n_models,
        "rank": args.rank,
        "sparsity": args.sparsity,
        "delta_scale": args.delta_scale,
        "noise": args.noise,
        "outlier_fraction": args.outlier_fraction,
        "outlier_scale": args.outlier_scale,
        "dtype": args.dtype,
        "seed": args.seed,
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if args.orthogonal_deltas:
        raw["orthogonal_deltas"] = True
    try:
        spec = FixtureSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid fixture spec: {exc}") from exc
    try:
        paths = write_fixtures(args.out_dir, spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    for p in paths:
        print(p)
    return 0


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resm-merge", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("merge", help="merge checkpoints according to a JSON plan")
    p.add_argument("config", help="path to the merge plan")
    p.add_argument("--threads", type=int, default=None, help="layer worker count")
    p.add_argument("--stdout", action="store_true", help="also print the merge report")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("inspect", help="rank, outlier and sparsity reports")
    p.add_argument("paths", nargs="+", help="base checkpoint followed by the models")
    p.add_argument("--ranks", action="store_true")
    p.add_argument("--energy", type=float, default=0.95)
    p.add_argument("--outliers", action="store_true")
    p.add_argument("--sigma", type=float, default=3.0)
    p.add_argument("--mask-singular-outliers", action="store_true")
    p.add_argument("--sparsity", action="store_true")
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--output", help="write the JSON report here")
    p.add_argument("--stdout", action="store_true")
    p.add_argument("--csv", help="also write a flat CSV table")
    p.add_argument("--plot-data", help="directory for (x, y) series files")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("simulate-conflict", help="Monte-Carlo check of the conflict bound")
    p.add_argument("--k", default="16,64,256,1024", help="comma-separated dimensions")
    p.add_argument("--epsilon", default="auto", help="conflict threshold, or 'auto' for 1/sqrt(k)")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true", help="JSON instead of a text table")
    p.add_argument("--output")
    p.add_argument("--stdout", action="store_true")
    p.set_defaults(func=cmd_simulate_conflict)

    p = sub.add_parser("gen-fixtures", help="write synthetic base and model checkpoints")
    p.add_argument("out_dir")
    p.add_argument("--spec", help="JSON file with FixtureSpec fields")
    p.add_argument("--n-models", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--orthogonal-deltas", action="store_true")
    p.add_argument("--sparsity", type=float)
    p.add_argument("--delta-scale", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--outlier-fraction", type=float)
    p.add_argument("--outlier-scale", type=float)
    p.add_argument("--dtype", choices=["F32", "F16", "BF16"])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_fixtures)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except MergeError as exc:
        return _fail(exc, exc.exit_code)
    except OSError as exc:
        return _fail(exc, 5)
    except ValueError as exc:
        return _fail(exc, 2)
    except ArithmeticError as exc:
        return _fail(exc, 4)


if __name__ == "__main__":
    sys.exit(main())
