"""``roadsage`` command line.

Every stage reads and writes ordinary files so it can be run and inspected on
its own; ``pipeline`` chains them. Exit codes: 1 configuration error, 2 data
error, 3 numeric failure. Messages go to stderr.

Pipeline config (JSON; relative paths resolve against the config file)::

    {
      "synth": {...SynthConfig fields...}      # or "data": {"graph": ..., "manifest": ...}
      "output_dir": "out",
      "seeds": [0, 1],
      "experiment": {...ExperimentConfig fields...}
    }
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DimensionMismatchError, NumericError
from .experiment import (
    N_CLASSES,
    TEST,
    VAL,
    VARIANT_LABELS,
    VARIANTS,
    ExperimentConfig,
    FeatureConfig,
    HyperparameterSpace,
    LogisticClassifier,
    VariantData,
    apply_trial,
    build_variant,
    class_index,
    config_hash,
    derive_seeds,
    embed,
    feature_matrix,
    fit_supervised,
    fit_unsupervised,
    hyperparameter_search,
    predict_proba,
    prepare_datasets,
    run_experiment,
    sage_config_for,
    score_variant,
    split_and_propagate,
    train_supervised,
)
from .features import FeatureSpec, Normalizer, save_features
from .graph import RoadGraph, load_graph, save_dual, save_graph, to_dual
from .raster import Channel, load_manifest
from .sage import SageModel, load_model, save_model
from .segmentation import SegmentationConfig, segment_pipeline
from .synth import SynthConfig, generate_synthetic, write_synthetic

log = logging.getLogger("roadsage")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MODES = ("supervised", "unsupervised")


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    base_dir: Path
    output_dir: Path
    seeds: list[int]
    experiment: ExperimentConfig
    synth: SynthConfig | None = None
    graph: Path | None = None
    manifest: Path | None = None


def _read_json(path, what: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"{what} {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{what} {path} must hold a JSON object")
    return doc


def load_pipeline_config(path, seed: int | None = None) -> PipelineConfig:
    path = Path(path)
    doc = _read_json(path, "config")
    unknown = set(doc) - {"synth", "data", "output_dir", "seeds", "experiment"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if ("synth" in doc) == ("data" in doc):
        raise ConfigError("config needs exactly one of 'synth' or 'data'")
    base = path.parent
    exp = ExperimentConfig.from_dict(doc.get("experiment", {}))
    for v in exp.variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; expected one of {VARIANTS}")
    for m in exp.modes:
        if m not in MODES:
            raise ConfigError(f"unknown mode {m!r}; expected one of {MODES}")
    seeds = doc.get("seeds", [0])
    if seed is not None:
        seeds = [seed]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds must be a non-empty list of nonnegative integers")
    pc = PipelineConfig(base, base / doc.get("output_dir", "out"), list(seeds), exp)
    if "synth" in doc:
        pc.synth = SynthConfig.from_dict(doc["synth"])
    else:
        data = doc["data"]
        if not isinstance(data, dict) or "graph" not in data:
            raise ConfigError("'data' needs a 'graph' path")
        pc.graph = base / data["graph"]
        pc.manifest = base / data["manifest"] if data.get("manifest") else None
        if not pc.graph.is_file():
            raise ConfigError(f"graph file {pc.graph} not found")
        if pc.manifest is not None and not pc.manifest.is_file():
            raise ConfigError(f"raster manifest {pc.manifest} not found")
        if pc.manifest is None and "srn+vis" in exp.variants:
            raise ConfigError("the srn+vis variant needs 'data.manifest'")
    return pc


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _input_provenance(graph: Path, manifest: Path | None, synth: SynthConfig | None) -> dict:
    prov = {"graph_sha256": _sha256(graph)}
    if manifest is not None:
        prov["rasters_sha256"] = {
            ent["name"]: _sha256(manifest.parent / ent["path"]) for ent in _read_json(manifest, "manifest")["channels"]
        }
    if synth is not None:
        prov["synth"] = asdict(synth)
    return prov


def load_inputs(pc: PipelineConfig) -> tuple[RoadGraph, list[Channel] | None, dict]:
    """ORN graph, raster channels and a provenance record (content hashes, synth config)."""
    graph, manifest = pc.graph, pc.manifest
    if pc.synth is not None:
        data_dir = pc.output_dir / "data"
        stamp = data_dir / "synth_config.json"
        if not (stamp.is_file() and json.loads(stamp.read_text()) == asdict(pc.synth)):
            write_synthetic(generate_synthetic(pc.synth), data_dir)
        graph, manifest = data_dir / "graph.jsonl", data_dir / "manifest.json"
    orn = load_graph(graph)
    channels = load_manifest(manifest) if manifest is not None else None
    return orn, channels, _input_provenance(graph, manifest, pc.synth)


def run_hash(exp: ExperimentConfig, provenance: dict) -> str:
    return config_hash({"experiment": exp.to_dict(), "provenance": provenance})


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_meta(path, meta: dict) -> None:
    _write_json(Path(str(path) + ".meta.json"), meta)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_extra(exp, provenance, seed, mode, data: VariantData, clf: LogisticClassifier | None) -> dict:
    return {
        "variant": data.name,
        "mode": mode,
        "seed": seed,
        "derived_seeds": derive_seeds(seed),
        "config_hash": run_hash(exp, provenance),
        "experiment": exp.to_dict(),
        "provenance": provenance,
        "spec": data.spec.to_dict(),
        "normalizer": data.normalizer.to_dict(),
        "classifier": clf.to_dict() if clf is not None else None,
    }


def rebuild_variant(orn: RoadGraph, channels, extra: dict) -> VariantData:
    """Recreate a checkpoint's dataset with its stored split seed and normaliser."""
    exp = ExperimentConfig.from_dict(extra["experiment"])
    variant = extra["variant"]
    srn = segment_pipeline(orn, exp.segmentation) if variant != "orn" else None
    split = split_and_propagate(orn, srn, extra["derived_seeds"]["split"])
    norm = Normalizer.from_dict(extra["normalizer"])
    if variant == "orn":
        data = build_variant(variant, orn, split.orn, None, exp.features, orn.bbox_center(), norm)
    else:
        data = build_variant(variant, srn, split.srn, channels, exp.features, orn.bbox_center(), norm)
    if data.spec.to_dict() != extra["spec"]:
        raise DimensionMismatchError("rebuilt feature layout differs from the one the model was trained on")
    return data


def model_proba(model: SageModel, data: VariantData, extra: dict) -> np.ndarray:
    if extra["mode"] == "supervised":
        return predict_proba(model, data)
    clf = LogisticClassifier.from_dict(extra["classifier"])
    return clf.proba(embed(model, data))


def _model_inputs(args) -> tuple[SageModel, dict, VariantData, RoadGraph]:
    model, extra = load_model(args.model)
    if args.config:
        orn, channels, _ = load_inputs(load_pipeline_config(args.config))
    elif args.graph:
        orn = load_graph(args.graph)
        channels = load_manifest(args.manifest) if args.manifest else None
    else:
        raise ConfigError("give --config or --graph")
    return model, extra, rebuild_variant(orn, channels, extra), orn


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> None:
    cfg = SynthConfig.from_dict(_read_json(args.config, "synth config")) if args.config else SynthConfig()
    if args.seed is not None:
        cfg = SynthConfig.from_dict({**asdict(cfg), "seed": args.seed})
    paths = write_synthetic(generate_synthetic(cfg), args.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}, sort_keys=True))


def cmd_segment(args) -> None:
    cfg = SegmentationConfig(args.target_traveltime, args.target_length)
    g = load_graph(args.inp)
    srn = segment_pipeline(g, cfg)
    save_graph(srn, args.out)
    _write_meta(args.out, {"source_sha256": _sha256(args.inp), "config_hash": config_hash(asdict(cfg)), "segmentation": asdict(cfg)})
    print(f"{len(g.edges)} edges -> {len(srn.edges)} segments")


def cmd_dualize(args) -> None:
    d = to_dual(load_graph(args.inp))
    save_dual(d, args.out)
    _write_meta(args.out, {"source_sha256": _sha256(args.inp)})
    print(f"{d.n_nodes} dual nodes, {len(d.edges)} dual edges")


def cmd_features(args) -> None:
    g = load_graph(args.graph)
    channels = load_manifest(args.manifest) if args.manifest else None
    if args.vision and not channels:
        raise ConfigError("--vision needs --manifest")
    origin = load_graph(args.origin_graph).bbox_center() if args.origin_graph else g.bbox_center()
    feat = FeatureConfig(geometry_points=args.geometry_points, footprint_m=args.footprint_m, gps_presence=args.gps_presence)
    write_features(g, channels if args.vision else None, feat, origin, args.out)


def write_features(g: RoadGraph, channels, feat: FeatureConfig, origin, path) -> FeatureSpec:
    """Raw (unnormalised) feature rows in dual-node order."""
    spec = FeatureSpec(
        geometry_points=feat.geometry_points,
        include_vision=channels is not None,
        channels=tuple(c.name for c in channels) if channels else FeatureSpec().channels,
        gps_presence=feat.gps_presence,
        origin=tuple(origin),
    )
    d = to_dual(g)
    save_features(path, d.ids, feature_matrix(g, d, spec, channels, feat.footprint_m), spec)
    return spec


def _seed_for(args, pc: PipelineConfig) -> int:
    return args.seed if args.seed is not None else pc.seeds[0]


def cmd_train(args) -> None:
    pc = load_pipeline_config(args.config)
    if args.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {args.variant!r}")
    seed = _seed_for(args, pc)
    orn, channels, prov = load_inputs(pc)
    seeds = derive_seeds(seed)
    datasets, _ = prepare_datasets(orn, channels, seeds["split"], pc.experiment.segmentation, pc.experiment.features, (args.variant,))
    data = datasets[args.variant]
    if args.mode == "supervised":
        model, rec, _ = fit_supervised(pc.experiment, data, seeds)
        clf = None
        log.info("best validation F1 %.4f at epoch %d", rec.best_val_f1, rec.best_epoch)
    else:
        model, clf, _, _ = fit_unsupervised(pc.experiment, data, seeds)
    out = args.out or pc.output_dir / "models" / model_filename(args.mode, args.variant, seed)
    save_model(model, out, checkpoint_extra(pc.experiment, prov, seed, args.mode, data, clf))
    print(out)


def model_filename(mode: str, variant: str, seed: int) -> str:
    return f"{mode}_{variant.replace('+', '_')}_seed{seed}.json"


def cmd_embed(args) -> None:
    model, extra, data, _ = _model_inputs(args)
    z = embed(model, data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"kind": "header", "config_hash": extra["config_hash"], "derived_seeds": extra["derived_seeds"], "dim": int(z.shape[1])}) + "\n")
        for eid, row in zip(data.ids, z):
            fh.write(json.dumps({"edge_id": eid, "embedding": [float(v) for v in row]}) + "\n")


def evaluate_checkpoint(model, extra, data: VariantData, orn: RoadGraph) -> dict:
    orn_labels = {eid: class_index(e.highway) for eid, e in orn.edges.items()}
    proba = model_proba(model, data, extra)
    return {
        "variant": VARIANT_LABELS[data.name],
        "mode": extra["mode"],
        "seed": extra["seed"],
        "derived_seeds": extra["derived_seeds"],
        "config_hash": extra["config_hash"],
        "test": score_variant(data, proba, orn_labels, TEST),
        "val": score_variant(data, proba, orn_labels, VAL),
    }


def cmd_evaluate(args) -> None:
    model, extra, data, orn = _model_inputs(args)
    res = evaluate_checkpoint(model, extra, data, orn)
    if args.out:
        _write_json(args.out, res)
    print(json.dumps(res, sort_keys=True))


def cmd_search(args) -> None:
    pc = load_pipeline_config(args.config)
    if args.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {args.variant!r}")
    if args.budget < 1:
        raise ConfigError("--budget must be positive")
    seed = _seed_for(args, pc)
    orn, channels, prov = load_inputs(pc)
    seeds = derive_seeds(seed)
    exp = pc.experiment
    datasets, _ = prepare_datasets(orn, channels, seeds["split"], exp.segmentation, exp.features, (args.variant,))
    data = datasets[args.variant]
    sage = sage_config_for(exp, data, seeds["model"], N_CLASSES)
    train = replace(exp.supervised, seed=seeds["train"])
    if args.epochs is not None:
        train = replace(train, epochs=args.epochs)

    def objective(params):
        s, t = apply_trial(sage, train, params)
        return train_supervised(data, s, t)[1].best_val_f1

    best, trials = hyperparameter_search(HyperparameterSpace(), args.budget, seeds["train"], objective)
    out = args.out or pc.output_dir / f"search_{args.variant.replace('+', '_')}_seed{seed}.json"
    _write_json(out, {
        "format": "roadsage-search/1",
        "variant": args.variant,
        "seed": seed,
        "derived_seeds": seeds,
        "config_hash": run_hash(exp, prov),
        "budget": args.budget,
        "best": best,
        "trials": trials,
    })
    print(out)


def cmd_pipeline(args) -> None:
    pc = load_pipeline_config(args.config, args.seed)
    exp, out = pc.experiment, pc.output_dir
    orn, channels, prov = load_inputs(pc)
    h = run_hash(exp, prov)
    meta = {"config_hash": h, "seeds": pc.seeds}

    srn = segment_pipeline(orn, exp.segmentation)
    save_graph(srn, out / "srn.jsonl")
    _write_meta(out / "srn.jsonl", meta)
    for name, g in (("orn", orn), ("srn", srn)):
        save_dual(to_dual(g), out / f"dual_{name}.jsonl")
        _write_meta(out / f"dual_{name}.jsonl", meta)
    origin = orn.bbox_center()
    for v in exp.variants:
        g = orn if v == "orn" else srn
        path = out / "features" / f"{v.replace('+', '_')}.jsonl"
        write_features(g, channels if v == "srn+vis" else None, exp.features, origin, path)
        _write_meta(path, meta)

    def on_model(seed, mode, variant, data, model, clf):
        path = out / "models" / model_filename(mode, variant, seed)
        save_model(model, path, checkpoint_extra(exp, prov, seed, mode, data, clf))

    results = run_experiment(orn, channels, exp, pc.seeds, prov, on_model=on_model)
    _write_json(out / "results.json", results)
    for mode, row in results["table"].items():
        for variant, cell in row.items():
            print(f"{mode:12s} {variant:8s} 8-class {cell['f1_8class']:.4f}  binary {cell['f1_binary']:.4f}")
    print(out / "results.json")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="roadsage", description="Road-type classification with GraphSAGE on road-network line graphs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("synth", help="generate a synthetic city (graph, rasters, labels)")
    s.add_argument("--config", help="JSON with SynthConfig fields")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("segment", help="split edges to travel-time and length targets")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--target-traveltime", type=float, default=15.0)
    s.add_argument("--target-length", type=float, default=120.0)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("dualize", help="write the line graph of a road graph")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dualize)

    s = sub.add_parser("features", help="write raw per-edge feature vectors")
    s.add_argument("--graph", required=True)
    s.add_argument("--manifest")
    s.add_argument("--vision", action="store_true", help="append raster histograms")
    s.add_argument("--origin-graph", help="graph whose bbox centre is the coordinate origin (default: --graph)")
    s.add_argument("--geometry-points", type=int, default=5)
    s.add_argument("--footprint-m", type=float, default=120.0)
    s.add_argument("--gps-presence", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_features)

    for name, func, helptext in (
        ("train", cmd_train, "train one variant and save a checkpoint"),
        ("search", cmd_search, "random hyperparameter search on validation F1"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True)
        s.add_argument("--variant", default="srn+vis", choices=VARIANTS)
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        if name == "train":
            s.add_argument("--mode", default="supervised", choices=MODES)
        else:
            s.add_argument("--budget", type=int, default=20)
            s.add_argument("--epochs", type=int, help="epochs per trial (default: the config's)")
        s.set_defaults(func=func)

    for name, func, helptext in (
        ("embed", cmd_embed, "write node embeddings from a checkpoint"),
        ("evaluate", cmd_evaluate, "score a checkpoint on the test split"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--model", required=True)
        s.add_argument("--config", help="pipeline config naming the input data")
        s.add_argument("--graph", help="ORN graph (instead of --config)")
        s.add_argument("--manifest")
        s.add_argument("--out", required=name == "embed")
        s.set_defaults(func=func)

    s = sub.add_parser("pipeline", help="synth-or-load, segment, dualize, features, train, evaluate")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, help="override the config's seeds with this one")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
