"""Command-line front end.

Subcommands cover the full workflow: simulate, preprocess, select-main,
select-pairs, train, evaluate, predict, export-shapes, plot. Settings may
come from a JSON config file (--config); explicit flags always win. All
outputs are written atomically (temp file + rename).

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure,
5 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from pathlib import Path

from . import archive
from .data import (
    SplitSpec,
    apply_preprocess,
    load_csv,
    load_schema_json,
    preprocess,
    save_schema_json,
    split,
)
from .data import PreprocessReport
from .distributions import DistributionSpec
from .errors import ConfigError, DataError, NumericError, ShapefitError
from .metrics import compute_metrics, estimate_dispersion
from .model import export_shape_grid
from .select import (
    ArchitectureConfig,
    SelectionConfig,
    make_term_specs,
    select_main,
    select_pairs,
)
from .synthetic import SyntheticConfig, ground_truth_to_csv, simulate, synthetic_schema
from .train import TrainConfig, history_to_csv, train
from .model import build_model

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

_EPILOG = """exit codes:
  0  success
  2  usage error (bad flag, invalid configuration)
  3  data error (missing file, schema mismatch, bad cells)
  4  numeric failure (overflow, divergence, rank deficiency)
  5  I/O error
"""


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_via_temp(path, writer) -> None:
    """Run writer(tmp_path) then rename the produced file into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# flag parsing
# ---------------------------------------------------------------------------

def _parse_monotone(text: str | None) -> dict:
    if not text:
        return {}
    out = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" not in item:
            raise ConfigError(f"monotone entry {item!r} must look like feature:inc or feature:dec")
        name, direction = item.rsplit(":", 1)
        direction = direction.strip().lower()
        if direction in ("inc", "increasing", "+", "+1", "up"):
            out[name.strip()] = 1
        elif direction in ("dec", "decreasing", "-", "-1", "down"):
            out[name.strip()] = -1
        else:
            raise ConfigError(f"unknown monotone direction {direction!r}")
    return out


def _parse_list(text: str | None) -> list:
    if not text:
        return []
    return [item.strip() for item in text.split(",") if item.strip()]


def _parse_pairs(text: str | None) -> list:
    pairs = []
    for item in _parse_list(text):
        parts = item.split(":")
        if len(parts) != 2:
            raise ConfigError(f"pair {item!r} must look like feature1:feature2")
        pairs.append((parts[0], parts[1]))
    return pairs


def _add_data_flags(p, with_split=True):
    p.add_argument("--data", required=True, help="input CSV file")
    p.add_argument("--schema", required=True, help="schema JSON file")
    if with_split:
        p.add_argument("--train-frac", type=float, default=0.6)
        p.add_argument("--val-frac", type=float, default=0.2)
        p.add_argument("--test-frac", type=float, default=0.2)
        p.add_argument("--split-seed", type=int, default=0)


def _add_arch_flags(p):
    p.add_argument("--main-layers", type=int, default=4, help="hidden layers per main-effect network")
    p.add_argument("--main-width", type=int, default=64, help="first hidden width of main-effect networks")
    p.add_argument("--pair-layers", type=int, default=6, help="hidden layers per pair network")
    p.add_argument("--pair-width", type=int, default=48, help="first hidden width of pair networks")
    p.add_argument("--calibrator-knots", type=int, default=10)
    p.add_argument("--lattice-vertices", type=int, default=10, help="vertices of main-effect lattices")
    p.add_argument("--pair-lattice-vertices", type=int, default=8)


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=0.01, help="learning rate")
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--batch", type=int, default=1000)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--omega-smooth", type=float, default=0.0)
    p.add_argument("--omega-mc", type=float, default=0.0)
    p.add_argument("--smooth-grid", type=int, default=1000)
    p.add_argument("--optimizer", choices=("adam", "rmsprop"), default="adam")
    p.add_argument("--dykstra-iters", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)


def _add_family_flags(p):
    p.add_argument("--family", choices=("gamma", "poisson"), default="gamma")
    p.add_argument("--dispersion", type=float, default=1.0)
    p.add_argument("--offset", action="store_true",
                   help="use the exposure column as a multiplicative offset")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapefit",
        description="interpretable additive models with monotone lattice terms",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--config", help="JSON file of flag defaults (flags override)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic severity dataset", epilog=_EPILOG)
    p.add_argument("--n", type=int, default=50_000)
    p.add_argument("--phi", type=float, default=1.0, help="gamma dispersion")
    p.add_argument("--beta", type=float, default=7.5, help="intercept of the log mean")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="synthetic.csv")
    p.add_argument("--truth", default=None, help="ground-truth CSV (default <out>.truth.csv)")
    p.add_argument("--out-schema", default=None, help="schema JSON (default <out>.schema.json)")

    p = sub.add_parser("preprocess", help="standardize / one-hot / filter a dataset", epilog=_EPILOG)
    _add_data_flags(p, with_split=False)
    p.add_argument("--standardize", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--one-hot", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--iqr-filter", action="store_true")
    p.add_argument("--apply-report", default=None,
                   help="apply a stored preprocessing report instead of fitting one")
    p.add_argument("--out", default="preprocessed.csv")
    p.add_argument("--out-schema", default=None)
    p.add_argument("--report", default=None, help="where to write the report JSON")

    p = sub.add_parser("select-main", help="stage 1: rank main effects", epilog=_EPILOG)
    _add_data_flags(p)
    _add_family_flags(p)
    _add_arch_flags(p)
    _add_train_flags(p)
    p.add_argument("--ensemble", type=int, default=10)
    p.add_argument("--k1", type=int, default=None)
    p.add_argument("--monotone", default=None, help="e.g. 'x3:dec,bm:inc'")
    p.add_argument("--features", default=None, help="candidate features (default: all)")
    p.add_argument("--stage-main-layers", type=int, default=2)
    p.add_argument("--stage-main-width", type=int, default=20)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="stage1.json")
    p.add_argument("--scores-csv", default=None)

    p = sub.add_parser("select-pairs", help="stage 2: screen pairwise effects", epilog=_EPILOG)
    _add_data_flags(p)
    _add_family_flags(p)
    _add_arch_flags(p)
    _add_train_flags(p)
    p.add_argument("--mains", default=None, help="selected mains, e.g. 'x1,x2,x3'")
    p.add_argument("--stage1", default=None, help="stage-1 report JSON to take mains from")
    p.add_argument("--k2", type=int, default=None)
    p.add_argument("--monotone", default=None)
    p.add_argument("--stage-main-layers", type=int, default=2)
    p.add_argument("--stage-main-width", type=int, default=20)
    p.add_argument("--stage2-patience", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="stage2.json")
    p.add_argument("--scores-csv", default=None)

    p = sub.add_parser("train", help="train an additive model", epilog=_EPILOG)
    _add_data_flags(p)
    _add_family_flags(p)
    _add_arch_flags(p)
    _add_train_flags(p)
    p.add_argument("--mains", default=None, help="main-effect features (default: all)")
    p.add_argument("--pairs", default=None, help="pair terms, e.g. 'x3:x4,x5:x6'")
    p.add_argument("--monotone", default=None)
    p.add_argument("--smooth", default=None, help="features whose mains get the roughness penalty")
    p.add_argument("--convergence-eps", type=float, default=0.0)
    p.add_argument("--out", default="model.json")
    p.add_argument("--history", default=None, help="training history CSV (default <out>.history.csv)")

    p = sub.add_parser("evaluate", help="score a model on a dataset", epilog=_EPILOG)
    p.add_argument("--model", required=True)
    _add_data_flags(p, with_split=False)
    p.add_argument("--refit-dispersion-on", default=None,
                   help="CSV whose residuals set the gamma dispersion (same schema)")
    p.add_argument("--p-eff", type=int, default=None,
                   help="effective parameter count for the dispersion estimate")
    p.add_argument("--out", default="metrics.csv")

    p = sub.add_parser("predict", help="per-row means and term contributions", epilog=_EPILOG)
    p.add_argument("--model", required=True)
    _add_data_flags(p, with_split=False)
    p.add_argument("--out", default="predictions.csv")

    p = sub.add_parser("export-shapes", help="write shape-grid CSV files", epilog=_EPILOG)
    p.add_argument("--model", required=True)
    p.add_argument("--term", default=None, help="single term label (default: all terms)")
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--out-dir", default="shapes")

    p = sub.add_parser("plot", help="render figures from shape-grid CSVs", epilog=_EPILOG)
    p.add_argument("--grids", nargs="+", required=True,
                   help="shape-grid CSV files or directories containing them")
    p.add_argument("--out-dir", default="figures")
    p.add_argument("--format", default="svg", choices=("svg", "png", "pdf"))

    parser.sub_choices = sub.choices
    return parser


# ---------------------------------------------------------------------------
# command implementations
# ---------------------------------------------------------------------------

def _load_split(args):
    schema = load_schema_json(args.schema)
    ds = load_csv(args.data, schema)
    spec = SplitSpec(args.train_frac, args.val_frac, args.test_frac, args.split_seed)
    return split(ds, spec)


def _arch_from(args, stage=False) -> ArchitectureConfig:
    return ArchitectureConfig(
        main_layers=args.stage_main_layers if stage else args.main_layers,
        main_width=args.stage_main_width if stage else args.main_width,
        pair_layers=args.pair_layers,
        pair_width=args.pair_width,
        main_lattice_vertices=args.lattice_vertices,
        pair_lattice_vertices=args.pair_lattice_vertices,
        calibrator_knots=args.calibrator_knots,
    )


def _train_cfg_from(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch,
        patience=args.patience,
        omega_smooth=args.omega_smooth,
        omega_mc=args.omega_mc,
        smooth_grid_size=args.smooth_grid,
        optimizer=args.optimizer,
        dykstra_iters=args.dykstra_iters,
        seed=args.seed,
        convergence_eps=getattr(args, "convergence_eps", 0.0),
    )


def _distribution_from(args) -> DistributionSpec:
    return DistributionSpec(family=args.family, dispersion=args.dispersion)


def cmd_simulate(args) -> int:
    cfg = SyntheticConfig(n=args.n, dispersion=args.phi, bias=args.beta, seed=args.seed)
    ds, truth = simulate(cfg)
    truth_path = args.truth or (str(args.out) + ".truth.csv")
    schema_path = args.out_schema or (str(args.out) + ".schema.json")
    _atomic_via_temp(args.out, lambda tmp: ds.to_csv(tmp))
    _atomic_via_temp(truth_path, lambda tmp: ground_truth_to_csv(truth, tmp))
    _atomic_via_temp(schema_path, lambda tmp: save_schema_json(synthetic_schema(), tmp))
    print(f"wrote {ds.n} rows to {args.out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    schema = load_schema_json(args.schema)
    ds = load_csv(args.data, schema)
    if args.apply_report:
        report = PreprocessReport.from_dict(
            json.loads(Path(args.apply_report).read_text(encoding="utf-8"))
        )
        out = apply_preprocess(report, ds)
    else:
        out, report = preprocess(
            ds, standardize=args.standardize, one_hot=args.one_hot, iqr_filter=args.iqr_filter
        )
    _atomic_via_temp(args.out, lambda tmp: out.to_csv(tmp))
    schema_path = args.out_schema or (str(args.out) + ".schema.json")
    _atomic_via_temp(schema_path, lambda tmp: save_schema_json(list(out.schema), tmp))
    if args.report and not args.apply_report:
        atomic_write_text(args.report, json.dumps(report.to_dict(), indent=2) + "\n")
    print(f"wrote {out.n} rows to {args.out} (removed {report.removed_rows})")
    return EXIT_OK


def cmd_select_main(args) -> int:
    tr, va, _ = _load_split(args)
    cfg = SelectionConfig(
        ensemble_size=args.ensemble,
        k1=args.k1,
        distribution=_distribution_from(args),
        monotone=_parse_monotone(args.monotone),
        arch=_arch_from(args, stage=True),
        stage_train=_train_cfg_from(args),
        seed=args.seed,
        jobs=args.jobs,
    )
    features = _parse_list(args.features) or None
    report = select_main(tr, va, cfg, features=features)
    atomic_write_text(args.out, report.to_json())
    if args.scores_csv:
        atomic_write_text(args.scores_csv, report.scores_csv())
    ranked = sorted(report.feature_scores.items(), key=lambda kv: -kv[1])
    for name, score in ranked:
        print(f"{name}\t{score:.6g}")
    return EXIT_OK


def cmd_select_pairs(args) -> int:
    tr, va, _ = _load_split(args)
    if args.mains:
        mains = _parse_list(args.mains)
    elif args.stage1:
        from .select import SelectionReport

        stage1 = SelectionReport.from_json(Path(args.stage1).read_text(encoding="utf-8"))
        mains = stage1.selected_mains
        if not mains:
            raise ConfigError("stage-1 report has no selected mains; pass --mains or --k1")
    else:
        raise ConfigError("select-pairs needs --mains or --stage1")
    cfg = SelectionConfig(
        ensemble_size=1,
        k2=args.k2,
        distribution=_distribution_from(args),
        monotone=_parse_monotone(args.monotone),
        arch=_arch_from(args, stage=True),
        stage_train=_train_cfg_from(args),
        stage2_patience=args.stage2_patience,
        seed=args.seed,
        jobs=args.jobs,
    )
    report = select_pairs(tr, va, mains, cfg)
    atomic_write_text(args.out, report.to_json())
    if args.scores_csv:
        atomic_write_text(args.scores_csv, report.scores_csv())
    print(f"baseline val NLL {report.baseline_val_nll:.6f}")
    for pair, delta in report.pair_deltas.items():
        print(f"{pair}\t{delta:+.6f}")
    return EXIT_OK


def cmd_train(args) -> int:
    tr, va, _ = _load_split(args)
    mains = _parse_list(args.mains) or list(tr.feature_names)
    pairs = _parse_pairs(args.pairs)
    monotone = _parse_monotone(args.monotone)
    smooth = _parse_list(args.smooth)
    specs = make_term_specs(mains, pairs, monotone, smooth, _arch_from(args))
    dist = _distribution_from(args)
    uses_offset = args.offset
    if uses_offset and tr.exposure is None:
        raise DataError("--offset requires an exposure column in the schema")
    model = build_model(tr, specs, dist, uses_offset=uses_offset, seed=args.seed)
    cfg = _train_cfg_from(args)
    result = train(model, tr, va, cfg)
    history_path = args.history or (str(args.out) + ".history.csv")
    _atomic_via_temp(history_path, lambda tmp: history_to_csv(result.history, tmp))
    digest = {
        "epochs": len(result.history),
        "stop_reason": result.stop_reason,
        "best_val_nll": float(result.best_val_nll),
        "history_sha256": hashlib.sha256(Path(history_path).read_bytes()).hexdigest(),
    }
    _atomic_via_temp(
        args.out, lambda tmp: archive.save_model(model, tmp, cfg.to_dict(), digest)
    )
    print(f"trained {len(result.history)} epochs ({result.stop_reason}); "
          f"best val NLL {result.best_val_nll:.6f}")
    if result.diverged:
        raise NumericError("training diverged; model restored to last finite snapshot")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = archive.load_model(args.model)
    schema = load_schema_json(args.schema)
    ds = load_csv(args.data, schema)
    mu, _, _ = model.predict(ds.x, ds.exposure if model.uses_offset else None)
    dist = model.distribution
    if dist.family == "gamma":
        p_eff = args.p_eff if args.p_eff is not None else len(model.terms) + 1
        if args.refit_dispersion_on:
            fit_ds = load_csv(args.refit_dispersion_on, schema)
            fit_mu, _, _ = model.predict(fit_ds.x, fit_ds.exposure if model.uses_offset else None)
            phi = estimate_dispersion(fit_ds.y, fit_mu, p_eff=p_eff)
        else:
            phi = dist.dispersion
        dist = DistributionSpec("gamma", dispersion=max(phi, 1e-12))
    report = compute_metrics(ds.y, mu, dist)
    atomic_write_text(args.out, report.csv_row())
    print(report.table())
    return EXIT_OK


def cmd_predict(args) -> int:
    model = archive.load_model(args.model)
    schema = load_schema_json(args.schema)
    ds = load_csv(args.data, schema)
    mu, eta, contrib = model.predict(ds.x, ds.exposure if model.uses_offset else None)
    labels = model.term_labels()
    lines = ["mu,eta," + ",".join(labels) if labels else "mu,eta"]
    for i in range(ds.n):
        cells = [repr(float(mu[i])), repr(float(eta[i]))]
        cells += [repr(float(v)) for v in contrib[i]]
        lines.append(",".join(cells))
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {ds.n} predictions to {args.out}")
    return EXIT_OK


def _safe_name(label: str) -> str:
    return label.replace(":", "_x_")


def cmd_export_shapes(args) -> int:
    model = archive.load_model(args.model)
    labels = [args.term] if args.term else model.term_labels()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for label in labels:
        grid = export_shape_grid(model, label, resolution=args.resolution)
        path = out_dir / f"shape_{_safe_name(label)}.csv"
        _atomic_via_temp(path, lambda tmp, g=grid: g.to_csv(tmp))
        print(path)
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plots import render_all

    paths = []
    for entry in args.grids:
        p = Path(entry)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.csv")))
        elif p.exists():
            paths.append(p)
        else:
            raise DataError(f"grid file not found: {p}")
    if not paths:
        raise DataError("no grid CSV files found")
    written = render_all(paths, args.out_dir, image_format=args.format)
    for w in written:
        print(w)
    return EXIT_OK


_COMMANDS = {
    "simulate": cmd_simulate,
    "preprocess": cmd_preprocess,
    "select-main": cmd_select_main,
    "select-pairs": cmd_select_pairs,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "export-shapes": cmd_export_shapes,
    "plot": cmd_plot,
}


def _apply_config_defaults(parser: argparse.ArgumentParser, argv: list) -> list:
    """Load --config JSON as defaults; explicit flags still override."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        parser.error("--config needs a file path")
    path = Path(argv[idx + 1])
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object of flag values")
    valid = set()
    for subparser in parser.sub_choices.values():
        for a in subparser._actions:  # noqa: SLF001
            valid.add(a.dest)
    unknown = [k for k in doc if k.replace("-", "_") not in valid]
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    for subparser in parser.sub_choices.values():
        dests = {a.dest for a in subparser._actions}  # noqa: SLF001
        subparser.set_defaults(
            **{k.replace("-", "_"): v for k, v in doc.items() if k.replace("-", "_") in dests}
        )
    return argv


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_defaults(parser, argv)
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError,) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ShapefitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
