"""End-to-end pipeline pieces shared by the CLI and the test suite:
dataset assembly, preprocessing into arrays, training runs with a
reproducibility manifest, and evaluation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .config import RunConfig
from .dataset import DatasetIndex, load_csv_index, merge_classes, oversample, stratified_split, synthesize_fundus
from .evaluation import ClassReport, ConfusionMatrix, RocResult, class_report, confusion, roc_auc_ovr
from .imaging import PreprocessConfig, preprocess
from .model import FuzzyAttentionNet
from .training import TrainResult, train, write_training_outputs


def build_index(cfg: RunConfig) -> DatasetIndex:
    """Load or synthesize the dataset, apply the class merge and tag splits.
    Oversampling (if configured) touches the training split only."""
    if cfg.data.source == "csv":
        index = load_csv_index(cfg.resolve(cfg.data.labels_csv), cfg.resolve(cfg.data.image_dir))
    else:
        index = synthesize_fundus(cfg.synthetic_spec())
    index = stratified_split(merge_classes(index, cfg.merge_map()), cfg.data.split, seed=cfg.data.split_seed)
    if cfg.data.oversample == "balanced":
        index = oversample(index, "balanced", seed=cfg.data.split_seed)
    return index


def to_arrays(index: DatasetIndex, pc: PreprocessConfig, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Preprocess every record into an N x H x W x 3 float batch plus labels."""
    if len(index) == 0:
        return np.zeros((0, pc.size, pc.size, 3), dtype=dtype), np.zeros(0, dtype=np.int64)
    images = np.stack([preprocess(s.load(), pc).to_float(dtype).pixels for s in index])
    return images, index.labels


def preprocess_from_metadata(meta: dict) -> PreprocessConfig:
    """Rebuild the preprocessing config stored in checkpoint metadata."""
    d = dict(meta.get("preprocess") or {})
    for key in ("clahe_tiles", "order"):
        if key in d:
            d[key] = tuple(d[key])
    return PreprocessConfig(**d)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunOutcome:
    result: TrainResult
    index: DatasetIndex
    paths: dict
    manifest: dict


def run_training(cfg: RunConfig, out_dir=None, progress=None) -> RunOutcome:
    """Train per ``cfg`` and write checkpoints, history, the split manifest
    and ``manifest.json`` under ``out_dir`` (default: the configured one)."""
    out = Path(out_dir) if out_dir is not None else cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    index = build_index(cfg)
    train_set = to_arrays(index.subset("train"), cfg.preprocess)
    val_set = to_arrays(index.subset("val"), cfg.preprocess)
    model = FuzzyAttentionNet(cfg.model_config(), seed=cfg.train.seed)
    metadata = {
        "preprocess": asdict(cfg.preprocess),
        "class_names": list(cfg.merge_map().names),
        "config_sha256": cfg.digest(),
        "seed": cfg.train.seed,
        "version": __version__,
    }
    result = train(model, train_set, val_set, cfg.train_config(), progress=progress)
    paths = write_training_outputs(result, out, metadata)
    (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    index.write_manifest(out / "split.csv")
    manifest = {
        "version": __version__,
        "seed": cfg.train.seed,
        "config_sha256": cfg.digest(),
        "dataset_fingerprint": index.fingerprint(),
        "epochs": cfg.train.epochs,
        "best_epoch": result.best_epoch,
        "oversampling": cfg.data.oversample,
        "augmentation": "flip/rotate/zoom/brightness/mixup replaces the GAN-augmented stage",
        "files": {name: {"path": p.name, "sha256": file_sha256(p)} for name, p in sorted(paths.items())},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return RunOutcome(result, index, paths, manifest)


@dataclass
class Evaluation:
    confusion: ConfusionMatrix
    report: ClassReport
    roc: RocResult | None
    probs: np.ndarray
    labels: np.ndarray


def evaluate_model(model: FuzzyAttentionNet, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> Evaluation:
    k = model.config.n_classes
    names = model.config.class_names or tuple(f"class {i}" for i in range(k))
    probs = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            xb = np.ascontiguousarray(images[start:start + batch_size].transpose(0, 3, 1, 2)).astype(model.dtype)
            probs.append(model.forward(xb).probs.data.astype(np.float64))
    probs = np.concatenate(probs) if probs else np.zeros((0, k))
    cm = confusion(labels, probs.argmax(axis=1), k, names)
    try:
        roc = roc_auc_ovr(labels, probs)
    except ValueError:
        roc = None
    return Evaluation(cm, class_report(cm), roc, probs, np.asarray(labels))
