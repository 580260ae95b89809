"""``hyper-flow`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import (
    configure_logging,
    defaults_text,
    load_config,
    parse_overrides,
    serializable,
    study_config,
    synthetic_spec,
)
from .core_data import DISCHARGE_HEADER, DateIndex, parse_date, read_dated_table, standardize_forcing, write_dated_table
from .ensemble import default_members, write_ensemble, write_member_roster
from .errors import ConfigError, DataError, NumericalError
from .experiments import (
    EXPERIMENTS,
    Record,
    Study,
    read_records,
    read_timing,
    write_records,
    write_report,
    write_summaries,
)
from .hyper import TrainedBasinModel, predict_hyper_bc, train_hyper_bc
from .metrics import METRICS, evaluate
from .regionalization import (
    WeightMatrix,
    load_weights,
    proximity_transfer,
    regress_transfer,
    report_lasso_coefficients,
    write_lasso_report,
    write_weights,
)
from .reservoir import build_reservoir
from .synthetic import write_study

log = logging.getLogger("hyperflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _ids(text: str | None):
    return None if not text else [t.strip() for t in text.split(",") if t.strip()]


def _write_provenance(out: Path, command: str, values: dict, config_hash: str, **extra):
    prov = {"tool": "hyperflow", "version": __version__, "command": command, "config_hash": config_hash,
            "master_seed": values["master_seed"],
            "config": {k: v for k, v in serializable(values).items() if k not in ("workers", "log_level")}}
    prov.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    (out / "provenance.json").write_text(json.dumps(prov, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _values(args):
    overrides = parse_overrides(args.set)
    if getattr(args, "manifest", None):
        overrides["manifest"] = args.manifest
    if getattr(args, "clip_nonnegative", False):
        overrides["clip_nonnegative"] = "true"
    if args.log_level:
        overrides["log_level"] = args.log_level
    return load_config(args.config, overrides)


def _hash(values) -> str:
    payload = {k: v for k, v in serializable(values).items() if k not in ("workers", "log_level")}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def _study_config(values, workers=None):
    cfg = study_config(values, workers)
    configure_logging(values["log_level"], cfg.config_hash())
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, values):
    spec = synthetic_spec(values)
    out = Path(args.out)
    manifest = write_study(spec, out)
    _write_provenance(out, "synth", values, _hash(values))
    log.info("wrote %d synthetic basins; manifest %s", spec.n_basins, manifest)


def cmd_ensemble(args, values):
    if args.list_members:
        write_member_roster(sys.stdout, default_members())
        return
    if args.out is None:
        raise UsageError("ensemble: --out is required unless --list-members is given")
    cfg = _study_config(values)
    study = Study.load(cfg)
    out = Path(args.out)
    dropped = {}
    for bid in study.ids:
        e, drop = study.ensemble(bid)
        write_ensemble(out / f"{bid}.csv", e)
        if drop:
            dropped[bid] = list(drop)
    _write_provenance(out, "ensemble", values, cfg.config_hash(), dropped_members=dropped)


def cmd_train(args, values):
    cfg = _study_config(values)
    study = Study.load(cfg)
    spec = cfg.gauged if args.mode == "gauged" else cfg.ungauged
    res = build_reservoir(spec)
    wanted = _ids(args.basins) or [b for b in study.ids if study.is_gauged(b)]
    if not wanted:
        raise DataError("no gauged basins to train")
    models = []
    for bid in wanted:
        if bid not in study.ids:
            raise DataError(f"basin {bid} is not in the manifest")
        e, _ = study.ensemble(bid)
        basin = study.gauged_record(bid, "train")
        models.append(train_hyper_bc(basin, e, res, cfg.train_window, cfg.exclude_spinup, cfg.bma_temperature))
        log.info("trained %s (max BMA weight %.6f)", bid, float(models[-1].bma.w.max()))
    write_weights(args.out, models, {"mode": args.mode, "config_hash": cfg.config_hash()})


def cmd_transfer(args, values):
    cfg = _study_config(values)
    study = Study.load(cfg)
    gauged = load_weights(args.weights)
    train = WeightMatrix.from_models(gauged)
    targets = _ids(args.targets) or [b for b in study.ids if b not in train.basin_ids]
    for b in targets:
        if b not in study.ids:
            raise DataError(f"target basin {b} is not in the manifest")
    if not targets:
        raise DataError("no target basins to transfer to")
    extra = {"transfer": {"method": args.method, "gauged": list(train.basin_ids)}}
    if args.method == "proximity":
        weights, donors = proximity_transfer(train, [study.centroid(b) for b in train.basin_ids], targets,
                                             [study.centroid(b) for b in targets])
        extra["transfer"]["donors"] = donors
    else:
        if study.attributes is None:
            raise ConfigError("regression transfer needs 'attributes' in the config")
        weights, model = regress_transfer(train, study.attributes, targets, cfg.n_components,
                                          cfg.lasso_lambda, cfg.lasso_convention)
        if args.lasso_report:
            write_lasso_report(args.lasso_report, report_lasso_coefficients(model))
    spec = gauged[0].reservoir
    models = []
    for bid in targets:
        bma, readout = weights.split(bid)
        _, stats = standardize_forcing(study.forcing(bid))
        models.append(TrainedBasinModel(bid, bma, readout, spec, stats, cfg.train_window))
    write_weights(args.out, models, extra)


def cmd_predict(args, values):
    cfg = _study_config(values)
    study = Study.load(cfg)
    models = load_weights(args.weights)
    res = build_reservoir(models[0].reservoir)
    out = Path(args.out)
    for m in models:
        if m.basin_id not in study.ids:
            raise DataError(f"basin {m.basin_id} from {args.weights} is not in the manifest")
        e, _ = study.ensemble(m.basin_id)
        f = study.forcing(m.basin_id)
        p = predict_hyper_bc(m, f, e, res, clip=cfg.clip)
        write_dated_table(out / f"{m.basin_id}.csv", p.index, DISCHARGE_HEADER[1:], [p.q])
    _write_provenance(out, "predict", values, cfg.config_hash(), clip_nonnegative=cfg.clip,
                      weights=str(args.weights))


def cmd_evaluate(args, values):
    cfg = _study_config(values)
    study = Study.load(cfg)
    window = cfg.predict_window
    if args.window:
        try:
            first, last = (parse_date(t) for t in args.window.split(":"))
        except ValueError:
            raise UsageError("--window must be YYYY-MM-DD:YYYY-MM-DD") from None
        window = DateIndex.between(first, last)
    pred_dir = Path(args.predictions)
    files = sorted(pred_dir.glob("*.csv"))
    if not files:
        raise DataError(f"{pred_dir}: no prediction files")
    records = []
    for path in files:
        bid = path.stem
        if bid not in study.ids or not study.is_gauged(bid):
            log.info("skipping %s: no observations", bid)
            continue
        index, _, v, _ = read_dated_table(path, DISCHARGE_HEADER)
        if not index.contains(window):
            raise DataError(f"{path}: predictions do not cover {window.start}..{window.end}")
        obs = study.discharge(bid, "eval", "evaluate")
        if not obs.index.contains(window):
            raise DataError(f"{bid}: observations do not cover {window.start}..{window.end}")
        sim = v[index.slice_for(window), 0]
        for name, r in evaluate(obs.window(window).q, sim, METRICS).items():
            records.append(Record("evaluate", args.method, bid, "predict", name, r.value, None, None,
                                  study.region(bid)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_records(out / "records.csv", records)
    write_summaries(out, records, None)
    _write_provenance(out, "evaluate", values, cfg.config_hash(), predictions=str(pred_dir))


def cmd_experiment(args, values):
    cfg = _study_config(values, workers=args.workers)
    report = EXPERIMENTS[args.command](cfg)
    out = write_report(report, args.out)
    log.info("%s: %d records written to %s", args.command, len(report.records), out)


def cmd_report(args, values):
    src = Path(args.records)
    records_path = src / "records.csv" if src.is_dir() else src
    records = read_records(records_path)
    timing_path = records_path.parent / "timing.csv"
    timing = read_timing(timing_path) if timing_path.exists() else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_summaries(out, records, timing)
    log.info("summarised %d records into %s", len(records), out)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    epilog = "config keys and defaults:\n" + defaults_text()

    def raw_fmt(prog):
        return _Formatter(prog, max_help_position=32)

    p = _Parser(prog="hyper-flow", description="Ensemble + reservoir discharge prediction and transfer.",
                formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file", default=None)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                        help="override one config key (repeatable)")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], default=None,
                        help="overrides the log_level key")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_, func):
        sp = sub.add_parser(name, help=help_, description=help_, parents=[common], formatter_class=raw_fmt,
                            epilog=epilog)
        sp.set_defaults(func=func)
        return sp

    sp = add("synth", "generate a synthetic study (manifest, forcing, discharge, attributes)", cmd_synth)
    sp.add_argument("--spec", dest="config", help="config file with synthetic keys (alias of --config)")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("ensemble", "simulate the built-in ensemble for every basin", cmd_ensemble)
    sp.add_argument("--manifest", default=None, help="basin manifest (overrides the manifest key)")
    sp.add_argument("--out", default=None, help="output directory for <basin_id>.csv files")
    sp.add_argument("--list-members", action="store_true", help="print the member roster and exit")

    sp = add("train", "train HYPER-BC on every gauged basin and write a weight file", cmd_train)
    sp.add_argument("--manifest", default=None, help="basin manifest (overrides the manifest key)")
    sp.add_argument("--mode", choices=["gauged", "ungauged"], default="gauged",
                    help="which reservoir hyperparameter set to use")
    sp.add_argument("--basins", default=None, help="comma-separated basin ids (default: all gauged)")
    sp.add_argument("--out", required=True, help="weight CSV; a .meta.json sidecar is written next to it")

    sp = add("transfer", "transfer trained weights to target basins", cmd_transfer)
    sp.add_argument("--manifest", default=None, help="basin manifest (overrides the manifest key)")
    sp.add_argument("--weights", required=True, help="weight file of the gauged basins")
    sp.add_argument("--method", choices=["proximity", "regression"], default="regression",
                    help="nearest donor or PCA + lasso on attributes")
    sp.add_argument("--targets", default=None, help="comma-separated ids (default: basins not in --weights)")
    sp.add_argument("--lasso-report", default=None, help="write nonzero lasso coefficients here (regression)")
    sp.add_argument("--out", required=True, help="weight CSV for the targets")

    sp = add("predict", "predict discharge from a weight file", cmd_predict)
    sp.add_argument("--manifest", default=None, help="basin manifest (overrides the manifest key)")
    sp.add_argument("--weights", required=True, help="weight file")
    sp.add_argument("--clip-nonnegative", action="store_true", help="clip predictions at zero")
    sp.add_argument("--out", required=True, help="output directory for <basin_id>.csv predictions")

    sp = add("evaluate", "score prediction files against observed discharge", cmd_evaluate)
    sp.add_argument("--manifest", default=None, help="basin manifest (overrides the manifest key)")
    sp.add_argument("--predictions", required=True, help="directory of <basin_id>.csv predictions")
    sp.add_argument("--window", default=None, help="START:END dates (default: prediction window)")
    sp.add_argument("--method", default="HYPER-BC", help="method label written into the records")
    sp.add_argument("--out", required=True, help="output directory")

    for name, text in (("exp1", "gauged evaluation of AVE, BMA, RC, HYPER-BC and every member"),
                       ("exp2", "k-fold ungauged transfer"),
                       ("exp3", "scarce-gauge transfer over sampled training sets"),
                       ("exp4", "region-as-gauged transfer against a random baseline")):
        sp = add(name, text, cmd_experiment)
        sp.add_argument("--manifest", default=None, help="basin manifest (overrides the manifest key)")
        sp.add_argument("--workers", type=int, default=None, help="worker processes (default: config or CPUs)")
        sp.add_argument("--out", required=True, help="output directory")

    sp = add("report", "recompute summary, CDF and timing tables from a records file", cmd_report)
    sp.add_argument("--records", required=True, help="records.csv or a directory containing it")
    sp.add_argument("--out", required=True, help="output directory")
    return p


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        values = _values(args)
        configure_logging(values["log_level"], _hash(values))
        args.func(args, values)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
