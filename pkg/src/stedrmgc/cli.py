"""Command-line driver: ingest -> graphs -> train -> evaluate -> predict.

Every command reads the same YAML run configuration (see
:mod:`stedrmgc.config`) and keeps its artifacts in the configured workdir
under fixed names:

=====================  =====================================================
``demand_cube.bin``    demand counts per (day, interval, OD pair)
``ingest_report.json`` accepted / out-of-range / residual / rejected rows
``graph_set.bin``      seven raw and seven normalized adjacency matrices
``checkpoint.bin``     best model parameters plus the config snapshot
``train_log.csv``      one row per epoch
``report.csv``         comparison table (also ``report.json``)
``pair_rmse_*.csv``    per-pair RMSE as an origin x destination grid
=====================  =====================================================

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import io
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .config import RunConfig, load_config
from .data import (
    DemandCube,
    IngestReport,
    TrainingInstance,
    aggregate_demand,
    build_dataset,
    earliest_missing,
    iter_trips,
    split_dataset,
    stack_instances,
    window_features,
)
from .errors import ConfigError, DataError, STEDError
from .evaluation import (
    HistoricalAverage,
    LassoBaseline,
    MLPArch,
    MLPBaseline,
    PairLSTMArch,
    PairLSTMBaseline,
    SpatialLSTMArch,
    SpatialLSTMBaseline,
    compare,
    grid_csv,
    network_predictor,
    pair_grid,
    table_csv,
    table_json,
)
from .gradcheck import TOLERANCE, run_suite
from .graphs import ODGraphSet, ODPairIndex, read_zones, build_graph_set
from .model import STEDRMGC, Architecture, Network, load_checkpoint, save_checkpoint, stack_graphs
from .training import LOG_HEADER, train

logger = logging.getLogger("stedrmgc")

CUBE_FILE = "demand_cube.bin"
INGEST_REPORT = "ingest_report.json"
GRAPH_FILE = "graph_set.bin"
CHECKPOINT_FILE = "checkpoint.bin"
TRAIN_LOG = "train_log.csv"
REPORT_CSV = "report.csv"
REPORT_JSON = "report.json"
FIXTURE_CONFIG = Path(__file__).parent / "fixtures" / "config.yaml"


# ---------------------------------------------------------------- shared steps


def _require(path: Path | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"no {what} path configured")
    if not path.exists():
        raise DataError(f"{what} {path} does not exist")
    return path


def _workdir(cfg: RunConfig) -> Path:
    wd = cfg.workdir
    wd.mkdir(parents=True, exist_ok=True)
    return wd


def _zones(cfg: RunConfig):
    return read_zones(_require(cfg.path("zones"), "zones file"))


def _load_cube(cfg: RunConfig) -> DemandCube:
    return DemandCube.load(_require(cfg.workdir / CUBE_FILE, "demand cube (run ingest first)"))


def _load_graphs(cfg: RunConfig, cube: DemandCube) -> ODGraphSet:
    gs = ODGraphSet.load(_require(cfg.workdir / GRAPH_FILE, "graph set (run graphs first)"))
    if gs.pairs.pairs != cube.pairs.pairs:
        raise DataError("graph set and demand cube index different OD pairs; rerun graphs")
    return gs


def split(cfg: RunConfig, cube: DemandCube) -> tuple[list[TrainingInstance], list[TrainingInstance]]:
    instances = build_dataset(cube, wrap=bool(cfg["data"]["wrap"]))
    boundary = cfg.date("split", "boundary_date")
    if boundary is not None:
        return split_dataset(instances, boundary_day=cube.day_of(boundary))
    return split_dataset(instances, ratio=float(cfg["split"]["ratio"]))


def hold_out(cfg: RunConfig, train_set: list[TrainingInstance]):
    """Chronological tail of the training split reserved for early stopping."""
    ratio = float(cfg["split"]["validation_ratio"])
    if ratio <= 0.0:
        return train_set, None
    return split_dataset(train_set, ratio=1.0 - ratio)


def demand_scale(cfg: RunConfig, fit_set: Sequence[TrainingInstance]) -> float:
    value = cfg["model"]["demand_scale"]
    if value == "auto":
        std = float(stack_instances(fit_set)[1].std())
        return std if std > 0 else 1.0
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"model.demand_scale must be 'auto' or a positive number, got {value!r}") from None
    if not value > 0:
        raise ConfigError(f"model.demand_scale must be positive, got {value}")
    return value


def architecture(cfg: RunConfig, N: int, K: int) -> Architecture:
    m = cfg["model"]
    return Architecture(
        N=N,
        K=K,
        widths=tuple(m["widths"]),
        lstm_hidden=tuple(m["lstm_hidden"]),
        latent_spatial=m["latent_spatial"],
        latent_temporal=int(m["latent_temporal"]),
        activation=m["activation"],
        post_sum_activation=bool(m["post_sum_activation"]),
    )


def _fit(cfg: RunConfig, net: Network, train_set, graph_set=None, epochs: int | None = None, log_path=None):
    fit_set, validation = hold_out(cfg, train_set)
    lines = [LOG_HEADER]
    result = train(
        net,
        fit_set,
        cfg.training_config(epochs),
        graph_set,
        validation=validation,
        on_epoch=lambda e: lines.append(e.line()),
    )
    if log_path is not None:
        container.atomic_write(log_path, "\n".join(lines) + "\n")
    return result


# ---------------------------------------------------------------- commands


def cmd_ingest(cfg: RunConfig) -> Path:
    zones = _zones(cfg)
    trips = _require(cfg.path("trips"), "trips file")
    ids = cfg["data"]["zones"]
    zone_ids = [int(z) for z in ids] if ids is not None else sorted(zones)
    missing = [z for z in zone_ids if z not in zones]
    if missing:
        raise ConfigError(f"data.zones lists ids absent from the zones file: {missing}")
    pairs = ODPairIndex.all_pairs(zone_ids)

    report = IngestReport()
    records = list(iter_trips(trips, report))
    start, end = cfg.date("data", "start_date"), cfg.date("data", "end_date")
    if start is None or end is None:
        if not records:
            raise DataError(f"{trips} holds no parseable trips to infer the date range from")
        start = start or min(r.pickup_time for r in records).date()
        end = end or max(r.pickup_time for r in records).date()
    cube = aggregate_demand(records, pairs, int(cfg["data"]["interval_length"]), start, end, report)
    threshold = float(cfg["data"]["min_pair_demand"])
    if threshold > 0:
        cube = cube.filter_pairs(threshold)

    wd = _workdir(cfg)
    cube.save(wd / CUBE_FILE)
    doc = {**report.as_dict(), "n_days": cube.n_days, "n_pairs": cube.N, "start_date": start.isoformat()}
    container.atomic_write(wd / INGEST_REPORT, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    logger.info("ingested %d trips into %d days x %d pairs", report.accepted, cube.n_days, cube.N)
    for line, reason in report.rejected:
        logger.warning("rejected line %d: %s", line, reason)
    return wd / CUBE_FILE


def cmd_graphs(cfg: RunConfig) -> Path:
    zones = _zones(cfg)
    cube = _load_cube(cfg)
    train_set, _ = split(cfg, cube)
    # correlations only see days up to the end of the training split
    last_day = max(inst.key[0] for inst in train_set)
    gs = build_graph_set(cube.pairs, zones, cube.values[: last_day + 1], cfg.graph_config())
    out = _workdir(cfg) / GRAPH_FILE
    gs.save(out)
    logger.info("wrote %d graphs over %d pairs", gs.K, gs.N)
    return out


def cmd_train(cfg: RunConfig) -> Path:
    cube = _load_cube(cfg)
    gs = _load_graphs(cfg, cube)
    train_set, _ = split(cfg, cube)
    fit_set, _ = hold_out(cfg, train_set)
    net = STEDRMGC(architecture(cfg, gs.N, gs.K), demand_scale(cfg, fit_set)).init_params(cfg["seed"])
    wd = _workdir(cfg)
    result = _fit(cfg, net, train_set, gs, log_path=wd / TRAIN_LOG)
    extra = {"config": cfg.snapshot(), "best_epoch": result.best_epoch, "epochs_run": len(result.log)}
    save_checkpoint(wd / CHECKPOINT_FILE, net, extra)
    logger.info("trained %d epochs, best epoch %s", len(result.log), result.best_epoch)
    return wd / CHECKPOINT_FILE


def _baselines(cfg: RunConfig, cube: DemandCube, train_set, test_set) -> dict:
    ev = cfg["evaluate"]
    epochs = ev["epochs"]
    fit_set, _ = hold_out(cfg, train_set)
    scale = demand_scale(cfg, fit_set)
    seed = cfg["seed"]
    models: dict = {}
    for name in ev["baselines"]:
        if name == "ha":
            ha = HistoricalAverage(cube)
            if all(ha.covers(inst) for inst in test_set):
                models["HA"] = ha.predict_instances
            else:
                logger.warning("HA skipped: test split starts within 28 days of the data")
        elif name == "lasso":
            lasso = LassoBaseline(float(ev["lasso_lambda"])).fit(train_set)
            models["LASSO"] = lambda insts, m=lasso: m.predict(stack_instances(insts)[0])
        elif name in ("mlp", "lstm", "spatial-lstm"):
            if name == "mlp":
                net = MLPBaseline(MLPArch(cube.N, int(ev["mlp_hidden"])), scale)
            elif name == "lstm":
                net = PairLSTMBaseline(PairLSTMArch(cube.N, int(ev["pair_lstm_hidden"])), scale)
            else:
                m = cfg["model"]
                arch = SpatialLSTMArch(cube.N, tuple(m["lstm_hidden"]), int(m["latent_temporal"]), m["activation"])
                net = SpatialLSTMBaseline(arch, scale)
            net.init_params(seed)
            _fit(cfg, net, train_set, epochs=epochs)
            models[{"mlp": "MLP", "lstm": "LSTM", "spatial-lstm": "Spatial LSTM"}[name]] = network_predictor(net)
        else:
            raise ConfigError(f"unknown baseline {name!r}")
    return models


def cmd_evaluate(cfg: RunConfig, checkpoint: Path | None = None, extra_checkpoints: Sequence[Path] = ()) -> Path:
    cube = _load_cube(cfg)
    gs = _load_graphs(cfg, cube)
    a_stack = stack_graphs(gs.stack())
    train_set, test_set = split(cfg, cube)

    models: dict = {}
    for path in [checkpoint or cfg.workdir / CHECKPOINT_FILE, *extra_checkpoints]:
        net, _ = load_checkpoint(_require(Path(path), "checkpoint"), expect={"N": gs.N})
        if net.needs_graphs and net.arch.K != gs.K:
            raise ConfigError(f"checkpoint {path} expects K={net.arch.K} graphs, graph set holds {gs.K}")
        name = "ST-ED-RMGC" if not models else Path(path).stem
        if name in models:
            raise ConfigError(f"duplicate model name {name!r}")
        models[name] = network_predictor(net, a_stack if net.needs_graphs else None)
    models.update(_baselines(cfg, cube, train_set, test_set))

    rows = compare(models, test_set, per_pair=True)
    wd = _workdir(cfg)
    container.atomic_write(wd / REPORT_CSV, table_csv(rows))
    meta = {"n_test_instances": len(test_set), "n_pairs": cube.N, "seed": cfg["seed"]}
    container.atomic_write(wd / REPORT_JSON, table_json(rows, meta))
    for name, rep, _ in rows:
        zone_ids, grid = pair_grid(cube.pairs, rep.per_pair["rmse"])
        slug = name.lower().replace(" ", "-")
        container.atomic_write(wd / f"pair_rmse_{slug}.csv", grid_csv(zone_ids, grid))
    return wd / REPORT_CSV


def cmd_predict(cfg: RunConfig, day: int, interval: int, checkpoint: Path | None = None, out: Path | None = None) -> Path:
    cube = _load_cube(cfg)
    wrap = bool(cfg["data"]["wrap"])
    feats = window_features(cube, day, interval, wrap)
    if feats is None:
        if not 0 <= interval < cube.intervals_per_day:
            raise ConfigError(f"interval must lie in [0, {cube.intervals_per_day}), got {interval}")
        gap = earliest_missing(cube, day, interval, wrap)
        raise DataError(f"lags for ({day}, {interval}) unavailable; earliest missing cell is (day, interval) = {gap}")
    net, _ = load_checkpoint(_require(checkpoint or cfg.workdir / CHECKPOINT_FILE, "checkpoint"), expect={"N": cube.N})
    a_stack = None
    if net.needs_graphs:
        gs = _load_graphs(cfg, cube)
        a_stack = stack_graphs(gs.stack())
    pred = np.maximum(net.predict(feats[None], a_stack)[0], 0.0)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["origin", "destination", "demand"])
    for (o, d), v in zip(cube.pairs, pred):
        w.writerow([o, d, repr(float(v))])
    date = cube.date_of(day).isoformat()
    path = out or _workdir(cfg) / f"prediction_{date}_{interval:03d}.csv"
    container.atomic_write(path, buf.getvalue())
    return path


def cmd_gradcheck(seed: int = 0) -> bool:
    ok = True
    for r in run_suite(seed):
        print(f"{r.name:24s} max_rel_error={r.max_rel_error:.3e} params={r.n_checked} {'ok' if r.passed else 'FAIL'}")
        ok &= r.passed
    print(f"tolerance {TOLERANCE:g}: {'all passed' if ok else 'FAILED'}")
    return ok


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    source = common.add_mutually_exclusive_group()
    source.add_argument("-c", "--config", type=Path, help="YAML run configuration")
    source.add_argument("--fixture", action="store_true", help="use the bundled two-week fixture configuration")
    common.add_argument("-w", "--workdir", type=Path, help="artifact directory (overrides paths.workdir)")
    common.add_argument(
        "-s", "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override a config value, e.g. training.epochs=5 (repeatable)",
    )
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="stedrmgc", description="OD demand forecasting with ST-ED-RMGC")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="aggregate trip records into a demand cube")
    sub.add_parser("graphs", parents=[common], help="build the seven OD-pair adjacency matrices")
    sub.add_parser("train", parents=[common], help="train ST-ED-RMGC and write a checkpoint")

    ev = sub.add_parser("evaluate", parents=[common], help="score the model and baselines on the test split")
    ev.add_argument("--checkpoint", type=Path)
    ev.add_argument(
        "--extra-checkpoint", type=Path, action="append", default=[],
        help="score another checkpoint alongside (named by file stem)",
    )

    pr = sub.add_parser("predict", parents=[common], help="forecast one interval for every OD pair")
    when = pr.add_mutually_exclusive_group(required=True)
    when.add_argument("--day", type=int, help="day index into the demand cube")
    when.add_argument("--date", help="calendar date, YYYY-MM-DD")
    pr.add_argument("--interval", type=int, required=True, help="interval index within the day")
    pr.add_argument("--checkpoint", type=Path)
    pr.add_argument("-o", "--output", type=Path)

    gc = sub.add_parser("gradcheck", help="compare tape gradients with finite differences")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "gradcheck":
            return 0 if cmd_gradcheck(args.seed) else 4
        cfg = load_config(FIXTURE_CONFIG if args.fixture else args.config, args.overrides)
        if args.workdir is not None:
            cfg["paths"]["workdir"] = str(args.workdir.resolve())
        if args.command == "ingest":
            out = cmd_ingest(cfg)
        elif args.command == "graphs":
            out = cmd_graphs(cfg)
        elif args.command == "train":
            out = cmd_train(cfg)
        elif args.command == "evaluate":
            out = cmd_evaluate(cfg, args.checkpoint, args.extra_checkpoint)
            sys.stdout.write(out.read_text())
        else:
            if args.date is not None:
                try:
                    day = _load_cube(cfg).day_of(dt.date.fromisoformat(args.date))
                except ValueError as exc:
                    raise ConfigError(f"--date: {exc}") from exc
            else:
                day = args.day
            out = cmd_predict(cfg, day, args.interval, args.checkpoint, args.output)
    except STEDError as exc:
        print(f"stedrmgc: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"stedrmgc: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    if args.command != "evaluate":
        print(out)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
