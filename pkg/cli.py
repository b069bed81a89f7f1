"""
hivesig command-line interface

This script:
1. synth      - writes the synthetic four-class tone dataset
2. featurize  - turns a class-per-directory WAV dataset into TFR1 files + manifest
3. train      - trains the teacher or student CNN on a manifest
4. compress   - prunes, distills and quantizes a trained checkpoint, stage by stage
5. evaluate   - classification report + confusion heatmap
6. benchmark  - median forward latency with size and accuracy
7. predict    - classifies one WAV file end to end

Exit codes: 0 success, 2 usage/input error, 3 data/shape error,
4 compression steps in an impossible order.
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

THREADS_ENV = "HIVESIG_THREADS"
THREAD_ENV_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def pin_threads(threads: Optional[int]) -> None:
    """Cap BLAS/OpenMP pools. Only effective before numpy is first imported."""
    if threads:
        for var in THREAD_ENV_VARS:
            os.environ[var] = str(threads)


def _threads_from_argv(argv: List[str]) -> Optional[int]:
    for i, arg in enumerate(argv):
        value = None
        if arg == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
        elif arg.startswith("--threads="):
            value = arg.split("=", 1)[1]
        if value is not None:
            return int(value) if value.isdigit() else None
    env = os.environ.get(THREADS_ENV, "")
    return int(env) if env.isdigit() else None


if __name__ == "__main__":
    pin_threads(_threads_from_argv(sys.argv[1:]))

import json  # noqa: E402
from concurrent.futures import ProcessPoolExecutor  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import Any, Dict, Tuple  # noqa: E402

import numpy as np  # noqa: E402
from rich.console import Console  # noqa: E402
from rich.logging import RichHandler  # noqa: E402
from rich.table import Table  # noqa: E402

from hivesig.audio_io import (  # noqa: E402
    augment,
    discover_dataset,
    draw_augmentations,
    load_wav,
    read_audio_manifest,
    resample,
    segment,
)
from hivesig.checkpoint import load_model, save_model  # noqa: E402
from hivesig.compress import distill, prune_layers, prune_neurons, quantize_head, size_report  # noqa: E402
from hivesig.config import PipelineConfig, load_config  # noqa: E402
from hivesig.errors import (  # noqa: E402
    HiveSigError,
    InputError,
    IoFailure,
    PipelineOrderError,
)
from hivesig.evalmetrics import (  # noqa: E402
    MIN_BENCH_RUNS,
    benchmark,
    confusion_matrix,
    report,
    write_json,
    write_report_csv,
    write_rows_csv,
)
from hivesig.network import ARCHITECTURES, Model, build_spec, build_student  # noqa: E402
from hivesig.plots import plot_confusion, plot_history, plot_stages  # noqa: E402
from hivesig.synth import generate_dataset  # noqa: E402
from hivesig.tfrepr import represent, save_png, write_tfr  # noqa: E402
from hivesig.training import (  # noqa: E402
    Dataset,
    check_dataset,
    load_manifest,
    train,
    write_history_csv,
    write_manifest,
)

logger = logging.getLogger("hivesig.cli")
console = Console()

STEPS = ("prune_neurons", "prune_layers", "distill", "quantize")
FEATURES_FILE = "features.json"
MANIFEST_FILE = "manifest.csv"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def setup_logging(level: str) -> None:
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def _features_dir(cfg: PipelineConfig) -> Path:
    return Path(cfg.output_dir) / "features"


def _models_dir(cfg: PipelineConfig) -> Path:
    return Path(cfg.output_dir) / "models"


def _reports_dir(cfg: PipelineConfig) -> Path:
    return Path(cfg.output_dir) / "reports"


def _manifest_path(args: argparse.Namespace, cfg: PipelineConfig) -> Path:
    return Path(args.manifest) if args.manifest else _features_dir(cfg) / MANIFEST_FILE


def _read_features(manifest: Path, cfg: PipelineConfig) -> Dict[str, Any]:
    """Feature settings recorded by featurize, or the current config's."""
    path = Path(manifest).parent / FEATURES_FILE
    if path.exists():
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    return cfg.feature_settings()


def _load_for_model(model: Model, manifest: Path) -> Dataset:
    data = load_manifest(manifest, channels=model.spec.input_shape[0])
    check_dataset(model.spec, data)
    return data


def _summary_table(title: str, rows: Dict[str, Any]) -> None:
    table = Table(title=title)
    table.add_column("Field", style="cyan")
    table.add_column("Value", style="magenta")
    for key, value in rows.items():
        table.add_row(key, f"{value:.4f}" if isinstance(value, float) else str(value))
    console.print(table)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    root = Path(args.out) if args.out else Path(cfg.output_dir) / "synth"
    written = generate_dataset(root, args.clips_per_class, args.seconds, seed=cfg.seed)
    _summary_table("Synthetic dataset", {name: len(paths) for name, paths in written.items()})
    return 0


# ---------------------------------------------------------------------------
# featurize
# ---------------------------------------------------------------------------

FeatureJob = Tuple[str, str, str, int, str, Dict[str, Any], bool]


def _featurize_file(job: FeatureJob) -> Tuple[List[Dict[str, str]], Optional[str]]:
    """Worker: one WAV -> TFR1 files for every segment and augmented copy.

    Returns (manifest rows, error message or None). Any failure on the file,
    expected or not, is reported as a skip instead of raised.
    """
    wav, class_name, out_dir, seed, source, cfg_data, png = job
    cfg = PipelineConfig.model_validate(cfg_data)
    rows: List[Dict[str, str]] = []
    try:
        clip = load_wav(Path(wav))
        clip.source_id = source
        clip = resample(clip, cfg.audio.target_rate)
        segments = segment(clip, cfg.audio.segment_seconds)
        if not segments:
            return [], f"{source}: shorter than one {cfg.audio.segment_seconds:g} s segment"
        stem = Path(wav).stem
        for i, seg in enumerate(segments):
            variants = [(f"{stem}_seg{i:03d}", seg)]
            specs = draw_augmentations(cfg.augment, int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
            for j, spec in enumerate(specs):
                variants.append((f"{stem}_seg{i:03d}_aug{j}", augment(seg, spec)))
            for name, variant in variants:
                image = represent(variant, cfg)
                rel = Path(class_name) / f"{name}.tfr"
                write_tfr(image, Path(out_dir) / rel)
                if png:
                    save_png(image.raster(cfg.channels), Path(out_dir) / rel.with_suffix(".png"))
                rows.append({"tfr_path": rel.as_posix(), "label": class_name, "source": variant.source_id})
    except HiveSigError as exc:
        return [], f"{source}: {exc}"
    except Exception as exc:
        # decoder or DSP failure confined to this file
        return [], f"{source}: {type(exc).__name__}: {exc}"
    return rows, None


def cmd_featurize(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    src = Path(args.input) if args.input else cfg.dataset_root
    if src is None:
        raise InputError("featurize needs --in or dataset_root in the config")
    dataset = read_audio_manifest(src) if Path(src).is_file() else discover_dataset(src)
    out_dir = Path(args.out) if args.out else _features_dir(cfg)

    non_empty = []
    for name in dataset.class_names:
        if dataset.files.get(name):
            non_empty.append(name)
        else:
            logger.warning("EmptyClass: class directory %r holds no WAV files; skipped", name)
    if len(non_empty) < 2:
        raise InputError(f"need at least two non-empty classes, found {len(non_empty)}")

    cfg_data = cfg.model_dump(mode="json")
    jobs: List[FeatureJob] = []
    for label, name in enumerate(non_empty):
        for i, wav in enumerate(dataset.files[name]):
            seed = int(np.random.SeedSequence([cfg.seed, label, i]).generate_state(1)[0])
            jobs.append((str(wav), name, str(out_dir), seed, f"{name}/{wav.name}", cfg_data, args.png))

    workers = cfg.threads or os.cpu_count() or 1
    if workers == 1 or len(jobs) == 1:
        results = [_featurize_file(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_featurize_file, jobs, chunksize=4))

    rows: List[Dict[str, str]] = []
    skipped = 0
    for file_rows, error in results:
        if error:
            skipped += 1
            logger.warning("Skipped %s", error)
        rows.extend(file_rows)
    if not rows:
        raise InputError(f"no file under {src} produced a feature")

    write_manifest(rows, out_dir / MANIFEST_FILE, non_empty)
    features = cfg.feature_settings()
    with open(out_dir / FEATURES_FILE, "w", encoding="utf-8") as f:
        json.dump(features, f, indent=2, sort_keys=True, default=str)
        f.write("\n")

    _summary_table(
        "Featurize",
        {
            "files": len(jobs),
            "features": len(rows),
            "skipped": skipped,
            "representation": cfg.representation,
            "manifest": out_dir / MANIFEST_FILE,
        },
    )
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    manifest = _manifest_path(args, cfg)
    data = load_manifest(manifest, channels=cfg.channels)
    spec = build_spec(args.arch, cfg.network, cfg.channels, data.n_classes)
    model, history = train(spec, data, cfg.training, epochs=args.epochs)

    features = _read_features(manifest, cfg)
    features["channels"] = cfg.channels
    model.meta = {"arch": args.arch, "class_names": data.class_names, "features": features}

    name = args.name or args.arch
    ckpt = _models_dir(cfg) / f"{name}.hsm"
    save_model(model, ckpt)
    write_history_csv(history, _reports_dir(cfg) / f"{name}_history.csv")
    plot_history(history, _reports_dir(cfg) / f"{name}_curves.png", title=f"{name} training")

    best = max(row["val_acc"] for row in history)
    _summary_table(
        f"Trained {name}",
        {
            "params": model.count_params(),
            "size_bytes": size_report(model).bytes,
            "epochs": len(history),
            "best_val_acc": best,
            "checkpoint": ckpt,
        },
    )
    return 0


# ---------------------------------------------------------------------------
# compress
# ---------------------------------------------------------------------------

def parse_steps(text: str) -> List[str]:
    """Validate a comma-separated step list against the fixed pipeline order.

    Raises:
        InputError: Unknown step name.
        PipelineOrderError: Repeated or out-of-order steps.
    """
    steps = [s.strip() for s in text.split(",") if s.strip()]
    if not steps:
        raise InputError("--steps is empty")
    unknown = [s for s in steps if s not in STEPS]
    if unknown:
        raise InputError(f"unknown compression step(s) {unknown}; choose from {', '.join(STEPS)}")
    positions = [STEPS.index(s) for s in steps]
    if any(b <= a for a, b in zip(positions, positions[1:])):
        raise PipelineOrderError(f"steps must run once each in the order {' -> '.join(STEPS)}, got {steps}")
    return steps


def _stage_row(stage: str, model: Model, data: Dataset, runs: int) -> Dict[str, Any]:
    bench = benchmark(model, data.x, data.y, runs=runs, model_name=stage)
    size = size_report(model)
    return {
        "stage": stage,
        "params": model.count_params(),
        "size_bytes": size.bytes,
        "size_mb": size.mb,
        "inference_seconds": bench.inference_seconds,
        "accuracy": bench.accuracy,
    }


def _fine_tune(model: Model, data: Dataset, cfg: PipelineConfig) -> Model:
    if cfg.prune.fine_tune_epochs == 0:
        return model
    tuned, _ = train(model.spec, data, cfg.training, model=model, epochs=cfg.prune.fine_tune_epochs)
    return tuned


def cmd_compress(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    steps = parse_steps(args.steps)
    model_path = Path(args.model)
    model = load_model(model_path)
    if model.quantized:
        raise PipelineOrderError(f"{model_path} already holds a quantized head; nothing can follow quantize")

    manifest = _manifest_path(args, cfg)
    if not manifest.exists():
        if "distill" in steps:
            raise PipelineOrderError(f"distill needs a dataset, manifest {manifest} does not exist")
        raise IoFailure(f"compress needs a manifest for calibration and stage metrics: {manifest}")
    data = _load_for_model(model, manifest)

    name = model_path.name.split(".")[0]
    reports_dir = _reports_dir(cfg)
    all_rows = [_stage_row("baseline", model, data, args.runs)]
    details: Dict[str, Any] = {}
    current = model
    for step in steps:
        if step == "prune_neurons":
            current, rep = prune_neurons(
                current, cfg.prune.neuron_fraction, cfg.prune.strategy, cfg.prune.seed
            )
            current = _fine_tune(current, data, cfg)
            details[step] = rep.to_dict()
        elif step == "prune_layers":
            current, rep = prune_layers(current, cfg.prune.layers)
            current = _fine_tune(current, data, cfg)
            details[step] = rep.to_dict()
        elif step == "distill":
            student_spec = build_student(cfg.network, current.spec.input_shape[0], current.spec.n_classes)
            current, history = distill(current, student_spec, data, cfg.distill)
            write_history_csv(history, reports_dir / f"{name}_distill_history.csv")
            details[step] = {"epochs": len(history), "best_val_acc": max(r["val_acc"] for r in history)}
        else:
            rng = np.random.default_rng(cfg.seed)
            n = min(cfg.quant.calibration_size, len(data))
            calib = data.x[np.sort(rng.permutation(len(data))[:n])]
            current = quantize_head(current, calib, cfg.quant)
            details[step] = current.meta["quantization"]

        save_model(current, _models_dir(cfg) / f"{name}.{step}.hsm")
        row = _stage_row(step, current, data, args.runs)
        all_rows.append(row)
        logger.info(
            "Stage %s: %d params, %d bytes, acc %.4f", step, row["params"], row["size_bytes"], row["accuracy"]
        )

    write_rows_csv(all_rows[1:], reports_dir / f"{name}_stages.csv")
    write_json({"schema_version": 1, "stages": all_rows, "details": details}, reports_dir / f"{name}_stages.json")
    plot_stages(all_rows, reports_dir / f"{name}_stages.png")

    table = Table(title="Optimization stages")
    for column in ("stage", "params", "size_mb", "inference_seconds", "accuracy"):
        table.add_column(column)
    for row in all_rows:
        table.add_row(
            row["stage"], str(row["params"]), f"{row['size_mb']:.4f}",
            f"{row['inference_seconds']:.4f}", f"{row['accuracy']:.4f}",
        )
    console.print(table)
    return 0


# ---------------------------------------------------------------------------
# evaluate / benchmark / predict
# ---------------------------------------------------------------------------

def cmd_evaluate(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    model_path = Path(args.model)
    model = load_model(model_path)
    data = _load_for_model(model, _manifest_path(args, cfg))
    cm = confusion_matrix(model.predict(data.x), data.y, data.n_classes, data.class_names)
    rep = report(cm)

    name = model_path.name[: -len(".hsm")] if model_path.name.endswith(".hsm") else model_path.stem
    reports_dir = _reports_dir(cfg)
    write_json(rep, reports_dir / f"{name}_eval.json")
    write_report_csv(rep, reports_dir / f"{name}_eval.csv")
    plot_confusion(cm, reports_dir / f"{name}_confusion.png")

    table = Table(title=f"Classification report: {name}")
    for column in ("class", "precision", "recall", "f1", "support"):
        table.add_column(column)
    for row in rep["classes"]:
        table.add_row(
            row["class"], f"{row['precision']:.2f}", f"{row['recall']:.2f}", f"{row['f1']:.2f}", str(row["support"])
        )
    for key, label in (("macro_avg", "Macro avg"), ("weighted_avg", "Weighted avg")):
        avg = rep[key]
        table.add_row(label, f"{avg['precision']:.2f}", f"{avg['recall']:.2f}", f"{avg['f1']:.2f}", str(rep["total"]))
    console.print(table)
    console.print(f"Accuracy: {rep['accuracy']:.4f}")
    return 0


def cmd_benchmark(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    if args.runs < MIN_BENCH_RUNS:
        raise InputError(f"--runs must be at least {MIN_BENCH_RUNS}, got {args.runs}")
    model_path = Path(args.model)
    model = load_model(model_path)
    data = _load_for_model(model, _manifest_path(args, cfg))
    name = model_path.name[: -len(".hsm")] if model_path.name.endswith(".hsm") else model_path.stem
    bench = benchmark(model, data.x, data.y, runs=args.runs, model_name=name)
    write_json(bench.to_dict(), _reports_dir(cfg) / f"{name}_bench.json")
    _summary_table(
        f"Benchmark: {name}",
        {
            "accuracy": bench.accuracy,
            "size_bytes": bench.size_bytes,
            "params": bench.params,
            "median_seconds": bench.inference_seconds,
            "runs": bench.runs,
            "samples": bench.samples,
        },
    )
    return 0


def cmd_predict(args: argparse.Namespace, cfg: PipelineConfig) -> int:
    model = load_model(Path(args.model))
    features = model.meta.get("features")
    feature_cfg = PipelineConfig.model_validate(features) if features else cfg
    class_names = model.meta.get("class_names") or [str(i) for i in range(model.spec.n_classes)]
    channels = model.spec.input_shape[0]

    clip = resample(load_wav(Path(args.wav)), feature_cfg.audio.target_rate)
    segments = segment(clip, feature_cfg.audio.segment_seconds) or [clip]
    rasters = [np.transpose(represent(seg, feature_cfg).raster(channels), (2, 0, 1)) for seg in segments]
    probs = model.predict_proba(np.stack(rasters)).mean(axis=0)
    top = int(np.argmax(probs))

    result = {
        "schema_version": 1,
        "wav": str(args.wav),
        "segments": len(segments),
        "prediction": class_names[top],
        "probabilities": {name: float(p) for name, p in zip(class_names, probs)},
    }
    write_json(result, _reports_dir(cfg) / f"{Path(args.wav).stem}_predict.json")

    table = Table(title=f"Prediction: {class_names[top]}")
    table.add_column("class")
    table.add_column("probability")
    for name, p in result["probabilities"].items():
        table.add_row(name, f"{p:.4f}")
    console.print(table)
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hivesig", description="Beehive audio classification and compression")
    parser.add_argument("--config", type=Path, help="YAML config (default: hivesig.yaml)")
    parser.add_argument("--output-dir", type=Path, help="Root for every artifact")
    parser.add_argument("--seed", type=int, help="Seed for every stochastic stage")
    parser.add_argument("--threads", type=int, help=f"Worker/BLAS thread cap (env {THREADS_ENV})")
    parser.add_argument("--log-level", default="INFO", choices=LOG_LEVELS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Write the synthetic tone dataset")
    p.add_argument("--out", type=Path)
    p.add_argument("--clips-per-class", type=int, default=200)
    p.add_argument("--seconds", type=float, default=2.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="WAV dataset -> TFR1 files + manifest")
    p.add_argument("--in", dest="input", type=Path, help="Dataset root or audio manifest CSV")
    p.add_argument("--out", type=Path)
    p.add_argument("--representation", choices=("spectrogram", "mel", "smoothed", "cochleagram"))
    p.add_argument("--segment-seconds", type=float)
    p.add_argument("--png", action="store_true", help="Also write a PNG preview per feature")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="Train a CNN on a manifest")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--arch", choices=ARCHITECTURES, default="teacher")
    p.add_argument("--epochs", type=int)
    p.add_argument("--name", help="Checkpoint name (default: the architecture)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="Prune / distill / quantize a checkpoint")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--steps", default=",".join(STEPS))
    p.add_argument("--runs", type=int, default=MIN_BENCH_RUNS)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("evaluate", help="Classification report of a checkpoint")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--manifest", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="Median forward latency of a checkpoint")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--runs", type=int, default=5)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("predict", help="Classify one WAV file")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--wav", type=Path, required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    if args.output_dir is not None:
        out["output_dir"] = str(args.output_dir)
    if args.seed is not None:
        out["seed"] = args.seed
    threads = args.threads
    if threads is None and os.environ.get(THREADS_ENV, "").isdigit():
        threads = int(os.environ[THREADS_ENV])
    if threads is not None:
        out["threads"] = threads
    if getattr(args, "representation", None):
        out["representation"] = args.representation
    if getattr(args, "segment_seconds", None) is not None:
        out["audio"] = {"segment_seconds": args.segment_seconds}
    return out


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    setup_logging(args.log_level)

    try:
        cfg = load_config(args.config, _overrides(args))
        pin_threads(cfg.threads)
        return args.func(args, cfg)
    except HiveSigError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
