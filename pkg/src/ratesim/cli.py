"""Command-line pipeline: ingest, synth, train, map, replay, sweep, matrix,
validate, bench.

All commands read a JSON project configuration, derive every random stream
from one base seed, and write canonical artifacts, so reruns with identical
inputs produce byte-identical outputs. Failures print a single machine-
parseable line to stderr and exit 2 (config), 3 (data), or 4 (model).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import engine, metrics, modelio, regression, schemes, trace as trace_mod
from .connmap import ConnectivityMap
from .derivation import fit_derivation
from .errors import ConfigError, DataError, ModelError, RatesimError
from .seeding import stable_seed

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_MODEL = 4


@dataclass
class ProjectConfig:
    """Resolved project paths, model bindings, and the base seed."""

    root: Path
    traces_dir: Path
    models_dir: Path
    output_dir: Path
    base_seed: int
    cell_size: float
    origin: tuple[float, float] | None
    scheme_overrides: dict

    @classmethod
    def load(cls, path: str | Path, out_dir: str | None = None) -> "ProjectConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        root = path.parent
        overrides = raw.get("schemes", {})
        if not isinstance(overrides, dict):
            raise ConfigError("config key 'schemes' must map kind -> field overrides")
        cfg = cls(
            root=root,
            traces_dir=root / raw.get("traces_dir", "traces"),
            models_dir=root / raw.get("models_dir", "models"),
            output_dir=Path(out_dir) if out_dir else root / raw.get("output_dir", "out"),
            base_seed=int(raw.get("base_seed", 0)),
            cell_size=float(raw.get("cell_size", 25.0)),
            origin=tuple(raw["origin"]) if "origin" in raw else None,
            scheme_overrides=overrides,
        )
        for d in (cfg.traces_dir, cfg.models_dir, cfg.output_dir):
            d.mkdir(parents=True, exist_ok=True)
        return cfg

    def scheme(self, kind: str, mno: str, direction: str) -> schemes.SchemeConfig:
        """Scheme defaults for (kind, mno, direction) plus config-file overrides."""
        base = schemes.default_config(kind, mno, direction)
        fields = self.scheme_overrides.get(kind, {})
        if not fields:
            return base
        try:
            return replace(base, **fields)
        except TypeError as exc:
            raise ConfigError(f"bad scheme override for {kind!r}: {exc}") from exc

    def model_path(self, mno: str, direction: str) -> Path:
        return self.models_dir / f"model_{mno}_{direction}.json"

    def map_path(self, mno: str, direction: str) -> Path:
        return self.models_dir / f"map_{mno}_{direction}.json"


def _load_traces(
    config: ProjectConfig,
    mno: str | None = None,
    direction: str | None = None,
    scenario: str | None = None,
    trace_id: str | None = None,
) -> tuple[list[trace_mod.Trace], list[trace_mod.TransmissionRecord]]:
    traces = []
    records = []
    for path in sorted(config.traces_dir.glob("*.csv")):
        t, recs = trace_mod.ingest_trace(path, origin=config.origin)
        if mno is not None and t.mno != mno:
            continue
        if direction is not None and t.direction != direction:
            continue
        if scenario is not None and not all(s.scenario == scenario for s in t.samples):
            continue
        if trace_id is not None and t.id != trace_id:
            continue
        traces.append(t)
        records.extend(recs)
    return traces, records


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def _emit(doc: dict) -> None:
    sys.stdout.write(modelio.dumps_canonical(doc))


# --- Subcommands ---------------------------------------------------------------


def cmd_ingest(args) -> None:
    config = ProjectConfig.load(args.config, out_dir=getattr(args, "out", None))
    schema = None
    if args.schema:
        schema_path = Path(args.schema)
        if not schema_path.exists():
            raise ConfigError(f"schema file not found: {schema_path}")
        schema = json.loads(schema_path.read_text(encoding="utf-8"))
    t, records = trace_mod.ingest_trace(args.trace, schema=schema, origin=config.origin)
    out = config.traces_dir / f"{t.id}.csv"
    _write_text(out, trace_mod.emit_trace(t, records))
    _emit(
        {
            "trace_id": t.id,
            "samples": len(t.samples),
            "labeled": len(records),
            "mno": t.mno,
            "direction": t.direction,
            "duration_s": t.duration,
            "path": str(out),
        }
    )


def cmd_synth(args) -> None:
    config = ProjectConfig.load(args.config, out_dir=getattr(args, "out", None))
    base_seed = args.seed if args.seed is not None else config.base_seed
    written = []
    for i in range(args.traces):
        spec = trace_mod.SyntheticSpec(
            n_samples=args.samples,
            noise_sigma=args.noise,
            rate_model=args.rate_model,
            mno=args.mno,
            direction=args.direction,
            scenario=args.scenario,
            trace_id=f"synth-{args.scenario}-{i:03d}",
        )
        t, records = trace_mod.generate_synthetic_scenario(
            spec, seed=stable_seed(base_seed, "synth", args.scenario, i)
        )
        out = config.traces_dir / f"{t.id}.csv"
        _write_text(out, trace_mod.emit_trace(t, records))
        written.append(str(out))
    _emit({"written": written, "samples_per_trace": args.samples})


def cmd_train(args) -> None:
    config = ProjectConfig.load(args.config, out_dir=getattr(args, "out", None))
    seed = args.seed if args.seed is not None else config.base_seed
    _, records = _load_traces(config, mno=args.mno, direction=args.direction,
                              scenario=args.scenario)
    if not records:
        raise DataError(
            f"no labeled records for mno={args.mno!r} direction={args.direction!r}"
        )
    X, y = trace_mod.records_to_arrays(records)
    trainer = regression.forest_trainer(n_trees=args.trees, max_depth=args.depth)
    report = regression.cross_validate(X, y, k=args.folds, trainer=trainer,
                                       seed=stable_seed(seed, "cv"))
    forest = regression.train_forest(
        X, y, n_trees=args.trees, max_depth=args.depth,
        seed=stable_seed(seed, "forest"), mno=args.mno, direction=args.direction,
    )
    derivation = fit_derivation(report.predictions, report.measurements,
                                refine=args.refine_gpr)
    model_path = config.model_path(args.mno, args.direction)
    modelio.save_model_document(model_path, forest, derivation)
    mdi = regression.mdi_importance(forest)
    train_report = {
        "mno": args.mno,
        "direction": args.direction,
        "n_records": int(X.shape[0]),
        "cv_r_squared": report.r_squared,
        "fold_scores": [None if np.isnan(s) else s for s in report.fold_scores],
        "mdi": {name: float(w) for name, w in zip(forest.feature_names, mdi)},
        "label_range": list(forest.label_range),
        "model_path": str(model_path),
    }
    _write_text(
        config.output_dir / f"train_report_{args.mno}_{args.direction}.json",
        modelio.dumps_canonical(train_report),
    )
    _emit(train_report)


def cmd_map(args) -> None:
    config = ProjectConfig.load(args.config, out_dir=getattr(args, "out", None))
    traces, _ = _load_traces(config, mno=args.mno, direction=args.direction)
    if not traces:
        raise DataError(f"no traces for mno={args.mno!r} direction={args.direction!r}")
    forest, _ = modelio.load_model_document(config.model_path(args.mno, args.direction))
    cmap = ConnectivityMap(cell_size=args.cell_size or config.cell_size)
    for t in traces:
        cmap.insert_all(t.samples)
    cmap.build_prediction_layer(forest, payload_mb=args.payload)
    cmap.freeze()
    map_path = config.map_path(args.mno, args.direction)
    modelio.save_map_document(map_path, cmap)
    if args.csv:
        _write_text(config.output_dir / f"map_{args.mno}_{args.direction}.csv",
                    cmap.export_csv())
    _emit({"cells": len(cmap), "path": str(map_path), "payload_mb": args.payload})


def _build_run_config(config: ProjectConfig, args, mno: str, direction: str,
                      kind: str) -> engine.RunConfig:
    forest, derivation = modelio.load_model_document(config.model_path(mno, direction))
    cmap = None
    if schemes.is_predictive(kind):
        map_path = config.map_path(mno, direction)
        if not map_path.exists():
            raise ModelError(f"{kind} needs a connectivity map; run `ratesim map` first")
        cmap = modelio.load_map_document(map_path)
    scheme = config.scheme(kind, mno, direction)
    if args.phi_max is not None and kind != "periodic":
        scheme = replace(scheme, phi_max=args.phi_max)
    seed = args.seed if args.seed is not None else config.base_seed
    return engine.RunConfig(
        scheme=scheme,
        source_rate_kbyte_s=args.source_rate,
        seed=seed,
        forest=forest,
        derivation=derivation,
        cmap=cmap,
    )


def cmd_replay(args) -> None:
    config = ProjectConfig.load(args.config, out_dir=getattr(args, "out", None))
    traces, _ = _load_traces(config, trace_id=args.trace)
    if not traces:
        raise DataError(f"trace {args.trace!r} not found in {config.traces_dir}")
    t = traces[0]
    run_config = _build_run_config(config, args, t.mno, t.direction, args.scheme)
    run_config = replace(run_config, seed=stable_seed(run_config.seed, t.id, args.scheme))
    result = engine.replay(run_config, t)
    doc = result.to_dict()
    _write_text(
        config.output_dir / f"replay_{t.id}_{args.scheme}.json",
        modelio.dumps_canonical(doc),
    )
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["time", "payload_mb", "predicted", "virtual", "duration",
                     "accumulation_s"])
    for e in result.events:
        writer.writerow([repr(e.time), repr(e.payload_mb), repr(e.predicted),
                         repr(e.virtual), repr(e.duration), repr(e.accumulation_s)])
    _write_text(config.output_dir / f"replay_{t.id}_{args.scheme}_events.csv",
                buf.getvalue())
    _emit({k: doc[k] for k in ("trace_id", "scheme_kind", "n_transmissions",
                               "total_mb", "mean_rate", "mean_delay")})


def cmd_sweep(args) -> None:
    config = ProjectConfig.load(args.config, out_dir=getattr(args, "out", None))
    kinds = [k.strip() for k in args.scheme.split(",") if k.strip()]
    phi_values = [float(v) for v in args.phi_max_grid.split(",") if v.strip()]
    if not kinds or not phi_values:
        raise ConfigError("sweep needs at least one scheme and one phi_max value")
    traces, _ = _load_traces(config, mno=args.mno, direction=args.direction)
    if not traces:
        raise DataError(f"no traces for mno={args.mno!r} direction={args.direction!r}")

    run_rows = []
    point_rows = []
    for kind in kinds:
        run_config = _build_run_config(config, args, args.mno, args.direction, kind)
        table = engine.sweep(run_config, phi_values, traces,
                             seeds_per_point=args.seeds_per_point, jobs=args.jobs)
        for r in table.runs:
            run_rows.append([kind, repr(r.phi_max), r.trace_id, r.repetition, r.seed,
                             r.n_transmissions,
                             "" if r.mean_rate is None else repr(r.mean_rate),
                             "" if r.mean_delay is None else repr(r.mean_delay),
                             repr(r.total_mb)])
        for p in table.points:
            point_rows.append([kind, repr(p.phi_max), p.n_runs, repr(p.mean_rate),
                               repr(p.rate_ci), repr(p.mean_delay), repr(p.delay_ci)])

    def to_csv(header, rows):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()

    tag = "-".join(kinds)
    _write_text(
        config.output_dir / f"sweep_{tag}_runs.csv",
        to_csv(["scheme", "phi_max", "trace_id", "repetition", "seed",
                "n_transmissions", "mean_rate", "mean_delay", "total_mb"], run_rows),
    )
    _write_text(
        config.output_dir / f"sweep_{tag}_points.csv",
        to_csv(["scheme", "phi_max", "n_runs", "mean_rate", "rate_ci",
                "mean_delay", "delay_ci"], point_rows),
    )
    _emit({"schemes": kinds, "phi_max": phi_values, "runs": len(run_rows),
           "aggregate_rows": len(point_rows)})


def cmd_matrix(args) -> None:
    config = ProjectConfig.load(args.config, out_dir=getattr(args, "out", None))
    traces, records = _load_traces(config, direction=args.direction)
    if not records:
        raise DataError(f"no labeled records for direction={args.direction!r}")
    groups: dict[str, list] = {}
    for r in records:
        key = r.context.mno if args.by == "mno" else r.context.scenario
        groups.setdefault(key, []).append(r)
    if len(groups) < 2:
        raise DataError(f"need at least 2 partitions by {args.by}, got {len(groups)}")
    partitions = []
    for key in sorted(groups):
        X, y = trace_mod.records_to_arrays(groups[key])
        partitions.append((key, X, y))
    seed = args.seed if args.seed is not None else config.base_seed
    trainer = regression.forest_trainer(n_trees=args.trees, max_depth=args.depth)
    labels, matrix = regression.cross_matrix(partitions, trainer, k=args.folds,
                                             seed=stable_seed(seed, "matrix"))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["train\\test"] + labels)
    for label, row in zip(labels, matrix):
        writer.writerow([label] + [repr(float(v)) for v in row])
    _write_text(config.output_dir / f"matrix_{args.by}_{args.direction}.csv",
                buf.getvalue())
    _emit({"by": args.by, "labels": labels,
           "matrix": [[float(v) for v in row] for row in matrix]})


def _read_rates_by_scheme(path: str | Path) -> dict[str, list[float]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"results file not found: {path}")
    out: dict[str, list[float]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["scheme", "rate_mbits"]:
            raise DataError(f"{path}: expected header scheme,rate_mbits, got {header}")
        for i, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out.setdefault(row[0], []).append(float(row[1]))
            except (IndexError, ValueError):
                raise DataError(f"{path}: line {i}: malformed row {row}") from None
    if not out:
        raise DataError(f"{path}: no result rows")
    return out


def cmd_validate(args) -> None:
    config = ProjectConfig.load(args.config, out_dir=getattr(args, "out", None))
    real = _read_rates_by_scheme(args.real)
    sim = _read_rates_by_scheme(args.sim)
    missing = sorted(set(real) ^ set(sim))
    if missing:
        raise DataError(f"scheme keys differ between files: {missing}")
    similarities = {
        scheme: metrics.ecdf_similarity(real[scheme], sim[scheme])
        for scheme in sorted(real)
    }
    report = {
        "per_scheme": similarities,
        "overall_mean": float(np.mean(list(similarities.values()))),
    }
    _write_text(config.output_dir / "validation_report.json",
                modelio.dumps_canonical(report))
    _emit(report)


def cmd_bench(args) -> None:
    config = ProjectConfig.load(args.config, out_dir=getattr(args, "out", None))
    traces, _ = _load_traces(config, trace_id=args.trace)
    if not traces:
        raise DataError(f"trace {args.trace!r} not found in {config.traces_dir}")
    t = traces[0]
    run_config = _build_run_config(config, args, t.mno, t.direction, args.scheme)
    stats = engine.benchmark(run_config, t, repetitions=args.repetitions)
    _emit({"trace_id": t.id, "scheme": args.scheme, **stats})


# --- Argument parsing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ratesim",
        description="Data-driven simulation of vehicular link data rates",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, jobs=False):
        p.add_argument("--config", required=True, help="project config JSON")
        p.add_argument("--out", default=None,
                       help="override the configured output directory")
        if seed:
            p.add_argument("--seed", type=int, default=None,
                           help="override the config base seed")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="parallel workers")

    p = sub.add_parser("ingest", help="validate a trace file and store it canonically")
    common(p, seed=False)
    p.add_argument("--trace", required=True, help="input trace CSV")
    p.add_argument("--schema", default=None, help="JSON column-mapping file")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate synthetic labeled traces")
    common(p)
    p.add_argument("--traces", type=int, default=1)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--rate-model", default="sinr_steps",
                   choices=sorted(trace_mod.RATE_MODELS))
    p.add_argument("--mno", default="A")
    p.add_argument("--direction", default="uplink", choices=trace_mod.DIRECTIONS)
    p.add_argument("--scenario", default="synthetic")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train forest + derivation model for a selector")
    common(p)
    p.add_argument("--mno", required=True)
    p.add_argument("--direction", required=True, choices=trace_mod.DIRECTIONS)
    p.add_argument("--scenario", default=None)
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--depth", type=int, default=20)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--refine-gpr", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("map", help="build a connectivity map with a prediction layer")
    common(p, seed=False)
    p.add_argument("--mno", required=True)
    p.add_argument("--direction", required=True, choices=trace_mod.DIRECTIONS)
    p.add_argument("--payload", type=float, required=True,
                   help="payload assumption for the prediction layer, MB")
    p.add_argument("--cell-size", type=float, default=None)
    p.add_argument("--csv", action="store_true", help="also export the per-cell CSV")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("replay", help="replay one trace under one scheme")
    common(p)
    p.add_argument("--trace", required=True, help="trace id")
    p.add_argument("--scheme", required=True, choices=schemes.SCHEME_KINDS)
    p.add_argument("--phi-max", type=float, default=None)
    p.add_argument("--source-rate", type=float, default=engine.DEFAULT_SOURCE_RATE_KBYTE_S)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("sweep", help="phi_max sweep over traces and seeds")
    common(p, jobs=True)
    p.add_argument("--scheme", required=True, help="comma-separated scheme kinds")
    p.add_argument("--phi-max", dest="phi_max_grid", required=True,
                   help="comma-separated phi_max grid")
    p.add_argument("--mno", required=True)
    p.add_argument("--direction", required=True, choices=trace_mod.DIRECTIONS)
    p.add_argument("--seeds-per-point", type=int, default=25)
    p.add_argument("--source-rate", type=float, default=engine.DEFAULT_SOURCE_RATE_KBYTE_S)
    p.set_defaults(func=cmd_sweep, phi_max=None)

    p = sub.add_parser("matrix", help="cross-partition R^2 matrix")
    common(p)
    p.add_argument("--by", required=True, choices=("mno", "scenario"))
    p.add_argument("--direction", required=True, choices=trace_mod.DIRECTIONS)
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--depth", type=int, default=20)
    p.add_argument("--folds", type=int, default=10)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("validate", help="ECDF similarity between result files")
    common(p, seed=False)
    p.add_argument("--real", required=True, help="CSV of measured rates by scheme")
    p.add_argument("--sim", required=True, help="CSV of simulated rates by scheme")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("bench", help="wall-clock statistics of repeated replays")
    common(p)
    p.add_argument("--trace", required=True, help="trace id")
    p.add_argument("--scheme", required=True, choices=schemes.SCHEME_KINDS)
    p.add_argument("--phi-max", type=float, default=None)
    p.add_argument("--source-rate", type=float, default=engine.DEFAULT_SOURCE_RATE_KBYTE_S)
    p.add_argument("--repetitions", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ModelError as exc:
        print(f"error: model: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except RatesimError as exc:
        print(f"error: internal: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
