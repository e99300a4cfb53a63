"""Command-line entry point: reproducible runs with manifests.

Every artifact-writing command records a run manifest next to its outputs:
the effective configuration, seeds, input file hashes, artifact paths, wall
time, and package version. `pipeline` chains the full desk-scale run:
synth -> train -> train-baseline -> embed -> analyze-units -> eval.
"""

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config
from .data import load_spectrograms, save_spectrograms, split_by_individual
from .errors import FormatError, InputError, SongdiscError, ValidationError
from .fileio import atomic_write_text
from .model import load_checkpoint
from .trainer import config_for_preset, train, train_vanilla_baseline
from . import analysis
from . import evaluation
from . import synth as synthmod

SPLIT_FRACTIONS = (0.5, 0.25, 0.25)


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    input_hashes: dict
    artifacts: dict
    wall_time_s: float
    code_version: str


def write_manifest(out_dir, manifest):
    path = Path(out_dir) / "manifest.json"
    atomic_write_text(path, json.dumps(dataclasses.asdict(manifest),
                                       indent=2, sort_keys=True) + "\n")
    return path


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _effective_config(args):
    skip = {"config", "func"}
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in skip or key.startswith("_"):
            continue
        out[key] = str(value) if isinstance(value, Path) else value
    return out


class _UsageError(Exception):
    def __init__(self, parser, message):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(self, message)


def _fractions(text):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated fractions")
    return tuple(parts)


def _add_common(sub):
    sub.add_argument("--config", type=Path, default=None,
                     help="JSON config file; flags override its values")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--out", type=Path, required=True,
                     help="output directory for artifacts")


def _add_data_split(sub):
    sub.add_argument("--data", type=Path, required=True,
                     help="spectrogram container file")
    sub.add_argument("--split", choices=("train", "val", "test", "all"),
                     default="test")
    sub.add_argument("--split-fractions", type=_fractions,
                     default=SPLIT_FRACTIONS)
    sub.add_argument("--split-seed", type=int, default=None,
                     help="defaults to --seed")


def build_parser():
    parser = _Parser(prog="songdisc", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", metavar="COMMAND")
    registry = {}

    def register(name, help_text):
        sub = subs.add_parser(name, help=help_text)
        registry[name] = sub
        return sub

    p = register("preprocess", "WAV directory to spectrogram container")
    _add_common(p)
    p.add_argument("--audio-dir", type=Path, required=True)

    p = register("synth", "generate the synthetic song corpus")
    _add_common(p)
    p.add_argument("--noise-level", type=float, default=0.05)
    p.add_argument("--instances", type=int, default=50)

    for name, help_text in (("train", "train the dual-encoder model"),
                            ("train-baseline", "train the vanilla baseline")):
        p = register(name, help_text)
        _add_common(p)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--preset", choices=("desk", "paper"), default="desk")
        p.add_argument("--steps", type=int, default=None,
                       help="override the preset's total step count")
        p.add_argument("--split-fractions", type=_fractions,
                       default=SPLIT_FRACTIONS)
        p.add_argument("--split-seed", type=int, default=None)
        p.add_argument("--resume", type=Path, default=None)

    p = register("embed", "extract whole-song embeddings from a checkpoint")
    _add_common(p)
    _add_data_split(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--shuffle", action="store_true",
                   help="shuffle segments before encoding, as in training")

    p = register("analyze-units", "per-unit KL informativeness report")
    _add_common(p)
    _add_data_split(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--method", choices=("largest-gap", "threshold"),
                   default="largest-gap")
    p.add_argument("--threshold", type=float, default=1.0)

    p = register("probe", "reconstruction probes for one song")
    _add_common(p)
    _add_data_split(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--song-index", type=int, default=0,
                   help="index into the chosen split")
    p.add_argument("--mode", choices=("full", "zero-local", "traverse"),
                   default="full")
    p.add_argument("--unit", type=int, default=None)

    p = register("cluster", "reduce and density-cluster saved embeddings")
    _add_common(p)
    p.add_argument("--embeddings", type=Path, required=True)
    p.add_argument("--reduce-dim", type=int, default=4)
    p.add_argument("--min-cluster-size", type=int, default=5)
    p.add_argument("--min-samples", type=int, default=3)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--include-noise", action="store_true",
                   help="score noise points as one extra class")

    p = register("eval", "grid-search clustering parameters against labels")
    _add_common(p)
    p.add_argument("--embeddings", type=Path, required=True)
    p.add_argument("--labels", type=Path, default=None,
                   help="one label per line; defaults to stored song types")
    p.add_argument("--grid", type=Path, default=None,
                   help="JSON list of clustering parameter objects")
    p.add_argument("--include-noise", action="store_true")

    p = register("plot", "2-D projection plot of saved embeddings")
    _add_common(p)
    p.add_argument("--embeddings", type=Path, required=True)

    p = register("pipeline", "full run: synth, train both models, embed, eval")
    _add_common(p)
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--noise-level", type=float, default=0.05)
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--steps", type=int, default=None)

    parser.set_defaults(_registry=registry)
    return parser


def _load_split(args):
    songs = load_spectrograms(args.data)
    seed = args.seed if args.split_seed is None else args.split_seed
    split = split_by_individual(songs, fractions=args.split_fractions, seed=seed)
    part = {"train": split.train, "val": split.val, "test": split.test,
            "all": songs}[args.split]
    if not part:
        raise ValidationError(f"split {args.split!r} is empty")
    return part


def _training_config(args):
    cfg = config_for_preset(args.preset, args.seed)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, total_steps=args.steps)
    return cfg


def cmd_preprocess(args):
    from .data import filter_by_length, load_and_resample, mel_transform

    wavs = sorted(Path(args.audio_dir).glob("*.wav"))
    if not wavs:
        raise InputError(f"no .wav files in {args.audio_dir}")
    specs = filter_by_length([mel_transform(load_and_resample(p)) for p in wavs])
    if not specs:
        raise ValidationError("every clip fell outside the usable length range")
    out_path = Path(args.out) / "corpus.sgram"
    save_spectrograms(out_path, specs)
    return {"corpus": out_path}, {p.name: _sha256(p) for p in wavs}


def cmd_synth(args):
    specs = synthmod.desk_specs(noise_level=args.noise_level)
    corpus = synthmod.generate_synthetic_corpus(
        specs, seed=args.seed, instances_per_spec=args.instances)
    out_path = Path(args.out) / "corpus.sgram"
    save_spectrograms(out_path, corpus)
    return {"corpus": out_path}, {}


def _run_training(args, variant):
    cfg = _training_config(args)
    songs = load_spectrograms(args.data)
    seed = args.seed if args.split_seed is None else args.split_seed
    split = split_by_individual(songs, fractions=args.split_fractions, seed=seed)
    out_dir = Path(args.out)
    if variant == "vanilla":
        cfg = dataclasses.replace(
            cfg, model=dataclasses.replace(cfg.model, variant="vanilla"))
        train_vanilla_baseline(cfg, split, out_dir, resume=args.resume)
    else:
        train(cfg, split, out_dir, resume=args.resume)
    artifacts = {name: out_dir / name for name in
                 ("metrics.jsonl", "model.ckpt", "model_best.ckpt",
                  "state.ckpt", "params.json")}
    return artifacts, {"data": _sha256(args.data)}


def cmd_train(args):
    return _run_training(args, "dual")


def cmd_train_baseline(args):
    return _run_training(args, "vanilla")


def cmd_embed(args):
    part = _load_split(args)
    model, _ = load_checkpoint(args.checkpoint)
    records = analysis.extract_embeddings(model, part, shuffle=args.shuffle,
                                          seed=args.seed)
    out_path = Path(args.out) / "embeddings.jsonl"
    analysis.save_embeddings(records, out_path)
    return {"embeddings": out_path}, {"data": _sha256(args.data),
                                      "checkpoint": _sha256(args.checkpoint)}


def cmd_analyze_units(args):
    part = _load_split(args)
    model, _ = load_checkpoint(args.checkpoint)
    report = analysis.unit_informativeness(model, part, method=args.method,
                                           threshold=args.threshold)
    out = Path(args.out)
    analysis.save_unit_report(report, out / "units.json")
    analysis.plot_unit_kl(report, out / "unit_kl.png")
    analysis.plot_unit_scatter(report, out / "unit_scatter.png")
    artifacts = {"units": out / "units.json", "unit_kl": out / "unit_kl.png",
                 "unit_scatter": out / "unit_scatter.png"}
    return artifacts, {"data": _sha256(args.data),
                       "checkpoint": _sha256(args.checkpoint)}


def cmd_probe(args):
    part = _load_split(args)
    if not 0 <= args.song_index < len(part):
        raise ValidationError(
            f"song index {args.song_index} outside split of {len(part)}")
    model, _ = load_checkpoint(args.checkpoint)
    song = part[args.song_index]
    result = analysis.reconstruct_probe(model, song, args.mode, unit=args.unit)
    out = Path(args.out)
    artifacts = {}
    if args.mode == "traverse":
        np.save(out / "probe.npy", np.stack(result))
        analysis.plot_traversal_grid(result, analysis.TRAVERSAL_VALUES,
                                     out / "probe.png")
        artifacts["probe_plot"] = out / "probe.png"
    else:
        np.save(out / "probe.npy", result)
    artifacts["probe"] = out / "probe.npy"
    return artifacts, {"data": _sha256(args.data),
                       "checkpoint": _sha256(args.checkpoint)}


def cmd_cluster(args):
    records = analysis.load_embeddings(args.embeddings)
    params = evaluation.ClusterParams(
        reduce_dim=args.reduce_dim, min_cluster_size=args.min_cluster_size,
        min_samples=args.min_samples, cluster_selection_epsilon=args.epsilon,
        seed=args.seed)
    result = evaluation.reduce_and_cluster(records, params)
    labels = [r.song_type for r in records]
    score = None
    if any(labels):
        score = evaluation.clustering_nmi(labels, result.assignments,
                                          include_noise=args.include_noise)
    out_path = Path(args.out) / "clusters.json"
    evaluation.save_cluster_report(result, score, out_path)
    return {"clusters": out_path}, {"embeddings": _sha256(args.embeddings)}


def _read_grid(path):
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise FormatError(f"{path}: grid must be a JSON list")
    return [evaluation.ClusterParams(**entry) for entry in raw]


def cmd_eval(args):
    records = analysis.load_embeddings(args.embeddings)
    if args.labels is not None:
        labels = Path(args.labels).read_text().split()
    else:
        labels = [r.song_type for r in records]
        if not any(labels):
            raise ValidationError(
                "embeddings carry no song types; pass --labels")
    grid = _read_grid(args.grid) if args.grid is not None else None
    best, rows = evaluation.search_cluster_params(
        records, labels, grid=grid, include_noise=args.include_noise)
    best_row = next(r for r in rows if r["params"] == best)
    payload = {"params": dataclasses.asdict(best),
               "n_clusters": best_row["n_clusters"],
               "noise_fraction": best_row["noise_fraction"],
               "nmi": best_row["nmi"]}
    out_path = Path(args.out) / "eval.json"
    atomic_write_text(out_path, json.dumps(payload, indent=2) + "\n")
    hashes = {"embeddings": _sha256(args.embeddings)}
    if args.labels is not None:
        hashes["labels"] = _sha256(args.labels)
    return {"eval": out_path}, hashes


def cmd_plot(args):
    records = analysis.load_embeddings(args.embeddings)
    out_path = Path(args.out) / "projection.png"
    evaluation.emit_projection_plot(records, out_path, seed=args.seed)
    return {"projection": out_path}, {"embeddings": _sha256(args.embeddings)}


def _pipeline_eval(records_val, records_test, include_noise=False):
    """Search params on validation, report on test."""
    backend = evaluation.default_backend()
    labels_val = [r.song_type for r in records_val]
    labels_test = [r.song_type for r in records_test]
    best, _ = evaluation.search_cluster_params(records_val, labels_val,
                                               backend=backend,
                                               include_noise=include_noise)
    result = evaluation.reduce_and_cluster(records_test, best, backend=backend)
    score = evaluation.clustering_nmi(labels_test, result.assignments,
                                      include_noise=include_noise)
    return {"params": dataclasses.asdict(best), "n_clusters": result.n_clusters,
            "noise_fraction": result.noise_fraction, "nmi": score}


def cmd_pipeline(args):
    out = Path(args.out)
    cfg = _training_config(args)

    specs = synthmod.desk_specs(noise_level=args.noise_level)
    corpus = synthmod.generate_synthetic_corpus(
        specs, seed=args.seed, instances_per_spec=args.instances)
    corpus_path = out / "corpus.sgram"
    save_spectrograms(corpus_path, corpus)
    split = split_by_individual(corpus, fractions=SPLIT_FRACTIONS,
                                seed=args.seed)

    train(cfg, split, out / "dual")
    vcfg = dataclasses.replace(
        cfg, model=dataclasses.replace(cfg.model, variant="vanilla"))
    train_vanilla_baseline(vcfg, split, out / "vanilla")

    dual, _ = load_checkpoint(out / "dual" / "model_best.ckpt")
    vanilla, _ = load_checkpoint(out / "vanilla" / "model_best.ckpt")

    emb_dir = out / "embeddings"
    sets = {}
    for tag, model in (("dual", dual), ("vanilla", vanilla)):
        for part_name, part in (("val", split.val), ("test", split.test)):
            records = analysis.extract_embeddings(model, part)
            analysis.save_embeddings(records,
                                     emb_dir / f"{tag}_{part_name}.jsonl")
            sets[f"{tag}_{part_name}"] = records

    report = analysis.unit_informativeness(dual, split.test)
    analysis.save_unit_report(report, out / "units.json")
    analysis.plot_unit_kl(report, out / "unit_kl.png")
    analysis.plot_unit_scatter(report, out / "unit_scatter.png")

    results = {"seed": args.seed, "preset": args.preset,
               "dual": _pipeline_eval(sets["dual_val"], sets["dual_test"]),
               "vanilla": _pipeline_eval(sets["vanilla_val"],
                                         sets["vanilla_test"])}
    if report.selected_units:
        comp_val = analysis.compress_embeddings(sets["dual_val"],
                                                report.selected_units)
        comp_test = analysis.compress_embeddings(sets["dual_test"],
                                                 report.selected_units)
        for rec_set, name in ((comp_val, "dual_val_compressed.jsonl"),
                              (comp_test, "dual_test_compressed.jsonl")):
            analysis.save_embeddings(rec_set, emb_dir / name)
        results["dual_compressed"] = _pipeline_eval(comp_val, comp_test)
    else:
        results["dual_compressed"] = None

    evaluation.emit_projection_plot(sets["dual_test"], out / "projection.png",
                                    seed=args.seed)
    results_path = out / "results.json"
    atomic_write_text(results_path,
                      json.dumps(results, indent=2, sort_keys=True) + "\n")

    artifacts = {"corpus": corpus_path, "results": results_path,
                 "units": out / "units.json",
                 "projection": out / "projection.png"}
    for tag in ("dual", "vanilla"):
        artifacts[f"{tag}_metrics"] = out / tag / "metrics.jsonl"
        artifacts[f"{tag}_checkpoint"] = out / tag / "model_best.ckpt"
    return artifacts, {}


COMMANDS = {
    "preprocess": cmd_preprocess,
    "synth": cmd_synth,
    "train": cmd_train,
    "train-baseline": cmd_train_baseline,
    "embed": cmd_embed,
    "analyze-units": cmd_analyze_units,
    "probe": cmd_probe,
    "cluster": cmd_cluster,
    "eval": cmd_eval,
    "plot": cmd_plot,
    "pipeline": cmd_pipeline,
}


def _parse(parser, argv):
    args = parser.parse_args(argv)
    if args.command is None:
        raise _UsageError(parser, "a command is required")
    if getattr(args, "config", None) is not None:
        sub = args._registry[args.command]
        allowed = {a.dest for a in sub._actions
                   if a.dest not in ("help", "config")}
        overrides = load_config(args.config, allowed)
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def dispatch(argv=None):
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = _parse(parser, argv)
        handler = COMMANDS[args.command]
        Path(args.out).mkdir(parents=True, exist_ok=True)
        started = time.time()
        artifacts, input_hashes = handler(args)
        manifest = RunManifest(
            command=args.command,
            config=_effective_config(args),
            seeds={"seed": args.seed},
            input_hashes=input_hashes,
            artifacts={k: str(v) for k, v in artifacts.items()},
            wall_time_s=time.time() - started,
            code_version=__version__,
        )
        write_manifest(args.out, manifest)
    except _UsageError as exc:
        exc.parser.print_usage(sys.stderr)
        print(f"songdisc: error: {exc}", file=sys.stderr)
        return 1
    except (ValidationError, InputError, FormatError) as exc:
        print(f"songdisc: error: {exc}", file=sys.stderr)
        return 1
    except SongdiscError as exc:
        print(f"songdisc: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures exit 2
        print(f"songdisc: unexpected error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    raise SystemExit(dispatch())


if __name__ == "__main__":
    main()
