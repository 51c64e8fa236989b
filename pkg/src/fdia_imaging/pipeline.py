"""Pipeline stages shared by the command line and the experiment scripts.

generate -> split -> encode -> train -> evaluate, each driven by a
:class:`~fdia_imaging.config.PipelineConfig` and writing into one output directory.
"""
from __future__ import annotations

import json
import platform
import time
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np

from .config import BUNDLED_CASE, PipelineConfig
from .dataset import (
    Dataset,
    LoadProfiles,
    config_hash,
    generate_dataset,
    import_profiles,
    load_dataset,
    save_dataset,
    split_dataset,
    synth_profiles,
)
from .encoders import PixelScaler, encode_matrix, write_pgm
from .evaluation import (
    MetricsReport,
    compare_report,
    confusion,
    confusion_image,
    knn_classify,
    metrics,
    write_confusion_csv,
)
from .grid_case import GridCase, bundled_case57, load_case
from .nn import (
    ClassifierModel,
    TrainConfig,
    build_mlp_baseline,
    build_paper_cnn,
    load_model,
    predict,
    save_model,
    train,
    write_history_csv,
)

DATASET_FILE = "dataset.fdia"
MODEL_FILE = "model.fdnn"
SCALER_FILE = "scaler.npy"
HISTORY_FILE = "history.csv"
METRICS_FILE = "metrics.csv"
CONFUSION_CSV = "confusion.csv"
CONFUSION_PGM = "confusion.pgm"
MANIFEST_FILE = "manifest.json"


def load_grid(cfg: PipelineConfig) -> GridCase:
    if cfg.case.path == BUNDLED_CASE:
        return bundled_case57()
    return load_case(cfg.resolve(cfg.case.path))


def build_profiles(cfg: PipelineConfig, case: GridCase) -> LoadProfiles:
    p = cfg.profiles
    if p.source == "csv":
        prof = import_profiles(cfg.resolve(p.csv_path).read_text(), case, p.step_minutes)
        if p.n_steps:
            prof = LoadProfiles({b: v[:p.n_steps] for b, v in prof.series.items()}, p.step_minutes)
        return prof
    return synth_profiles(case, p.days, p.step_minutes, p.seed, n_steps=p.n_steps or None,
                          regions=p.regions or None, bus_noise=p.bus_noise)


def make_dataset(cfg: PipelineConfig) -> Dataset:
    case = load_grid(cfg)
    a, d = cfg.attack, cfg.data
    ds = generate_dataset(case, build_profiles(cfg, case), a.targets, a.scales, d.noise_sigma,
                          range(a.window_start, a.window_end), d.seed, alpha=d.alpha,
                          reject_flagged=d.reject_flagged)
    ds.config["pipeline_hash"] = config_hash(data_config(cfg))
    return ds


def data_config(cfg: PipelineConfig) -> dict:
    d = cfg.to_dict()
    return {k: d[k] for k in ("case", "profiles", "attack", "data")}


def split(cfg: PipelineConfig, ds: Dataset) -> tuple[Dataset, Dataset]:
    return split_dataset(ds, cfg.split.train_fraction, cfg.split.seed)


def uses_images(cfg: PipelineConfig) -> bool:
    return cfg.network.preset != "mlp"


def encode(cfg: PipelineConfig, features: np.ndarray) -> np.ndarray:
    e = cfg.encoder
    return encode_matrix(features, e.kind, e.image_size or None, e.epsilon_frac, e.mode)


def model_inputs(cfg: PipelineConfig, ds: Dataset, scaler: PixelScaler | None = None):
    """Network inputs for a split and the scaler applied to them (fitted here when not given)."""
    x = encode(cfg, ds.features) if uses_images(cfg) else ds.features
    if not cfg.encoder.standardize:
        return x, None
    if scaler is None:
        scaler = PixelScaler.fit(x)
    return scaler.transform(x), scaler


def build_network(cfg: PipelineConfig, input_shape, num_classes: int) -> ClassifierModel:
    n = cfg.network
    if n.preset == "mlp":
        return build_mlp_baseline(int(np.prod(input_shape)), n.mlp_hidden, num_classes, n.seed)
    c, h, _ = input_shape
    return build_paper_cnn(h, c, num_classes, seed=n.seed, hidden_units=n.hidden_units,
                           batchnorm=n.batchnorm, dropout=n.dropout)


def train_config(cfg: PipelineConfig, out_dir: Path | None = None, epochs: int | None = None) -> TrainConfig:
    t = cfg.train
    ckpt_dir = str(out_dir / "checkpoints") if out_dir is not None and t.checkpoint_every else None
    return TrainConfig(batch_size=t.batch_size, epochs=epochs or t.epochs, learning_rate=t.learning_rate,
                       adam_beta1=t.adam_beta1, adam_beta2=t.adam_beta2, adam_eps=t.adam_eps,
                       seed=t.seed, checkpoint_every=t.checkpoint_every, checkpoint_dir=ckpt_dir)


@dataclass
class TrainOutcome:
    model: ClassifierModel
    scaler: PixelScaler | None
    history: list


def run_training(cfg: PipelineConfig, train_ds: Dataset, out_dir: Path, callbacks=()) -> TrainOutcome:
    out_dir.mkdir(parents=True, exist_ok=True)
    x, scaler = model_inputs(cfg, train_ds)
    model = build_network(cfg, x.shape[1:], train_ds.n_classes)
    model, history = train(model, x, train_ds.labels, train_config(cfg, out_dir), callbacks)
    save_model(model, out_dir / MODEL_FILE)
    if scaler is not None:
        scaler.save(out_dir / SCALER_FILE)
    write_history_csv(history, out_dir / HISTORY_FILE)
    return TrainOutcome(model, scaler, history)


def load_trained(out_dir: Path) -> tuple[ClassifierModel, PixelScaler | None]:
    scaler_path = out_dir / SCALER_FILE
    return load_model(out_dir / MODEL_FILE), (PixelScaler.load(scaler_path) if scaler_path.exists() else None)


def approach_name(cfg: PipelineConfig) -> str:
    return "mlp" if cfg.network.preset == "mlp" else f"{cfg.encoder.kind}_cnn"


def run_evaluation(cfg: PipelineConfig, train_ds: Dataset, test_ds: Dataset, model: ClassifierModel,
                   scaler: PixelScaler | None, out_dir: Path) -> dict[str, MetricsReport]:
    """Score the trained network and the baselines on the test split; write CSV/PGM reports."""
    out_dir.mkdir(parents=True, exist_ok=True)
    k = test_ds.n_classes
    if cfg.encoder.standardize and scaler is None:
        raise ValueError("the model was trained on standardized inputs but no scaler was found")
    x_test, _ = model_inputs(cfg, test_ds, scaler)
    pred, _ = predict(model, x_test)
    cm = confusion(test_ds.labels, pred, k)
    reports = {approach_name(cfg): metrics(cm)}
    write_confusion_csv(cm, out_dir / CONFUSION_CSV, test_ds.class_names)
    write_pgm(out_dir / CONFUSION_PGM, confusion_image(cm), 0.0, 1.0)

    knn_pred = knn_classify(train_ds.features, train_ds.labels, test_ds.features, cfg.eval.knn_k)
    reports["knn"] = metrics(confusion(test_ds.labels, knn_pred, k))

    if cfg.eval.mlp_baseline and cfg.network.preset != "mlp":
        scaler_f = PixelScaler.fit(train_ds.features)
        mlp = build_mlp_baseline(train_ds.n_features, cfg.network.mlp_hidden, k, cfg.network.seed)
        train(mlp, scaler_f.transform(train_ds.features), train_ds.labels,
              train_config(cfg, epochs=cfg.eval.mlp_epochs))
        mlp_pred, _ = predict(mlp, scaler_f.transform(test_ds.features))
        reports["mlp"] = metrics(confusion(test_ds.labels, mlp_pred, k))

    compare_report(list(reports.items()), out_dir / METRICS_FILE, test_ds.class_names)
    return reports


def export_samples(cfg: PipelineConfig, ds: Dataset, out_dir: Path) -> list[Path]:
    """One PGM per class (its first sample) for visual inspection."""
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, name in enumerate(ds.class_names):
        idx = np.flatnonzero(ds.labels == k)
        if idx.size == 0:
            continue
        img = encode(cfg, ds.features[idx[:1]])[0, 0]
        lo, hi = (-1.0, 1.0) if cfg.encoder.kind == "gaf" else (0.0, 1.0)
        paths.append(write_pgm(img_dir / f"{cfg.encoder.kind}_{name}.pgm", img, lo, hi))
    return paths


def versions() -> dict:
    out = {"python": platform.python_version(), "numpy": np.__version__}
    for pkg in ("scipy", "fdia-imaging"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def run_pipeline(cfg: PipelineConfig, out_dir: Path | None = None, log=print) -> dict:
    """Run every stage; returns the manifest that is also written to ``manifest.json``."""
    out = Path(out_dir) if out_dir is not None else cfg.resolve(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}

    def timed(name, fn):
        t0 = time.perf_counter()
        result = fn()
        timings[name] = round(time.perf_counter() - t0, 3)
        log(f"[{name}] {timings[name]:.1f} s")
        return result

    ds = timed("generate", lambda: make_dataset(cfg))
    save_dataset(ds, out / DATASET_FILE)
    train_ds, test_ds = split(cfg, ds)
    timed("encode", lambda: export_samples(cfg, ds, out) if uses_images(cfg) else [])
    outcome = timed("train", lambda: run_training(cfg, train_ds, out))
    reports = timed("evaluate", lambda: run_evaluation(cfg, train_ds, test_ds, outcome.model, outcome.scaler, out))

    manifest = {
        "name": cfg.name,
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg.to_dict()),
        "versions": versions(),
        "dataset": {"samples": len(ds), "features": ds.n_features, "classes": ds.n_classes,
                    "class_counts": ds.class_counts(), "train": len(train_ds), "test": len(test_ds)},
        "macro": {name: dict(zip(("precision", "recall", "f1"), rep.macro)) for name, rep in reports.items()},
        "timing_seconds": timings,
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(path) -> Dataset:
    return load_dataset(path)
