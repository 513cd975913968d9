"""Focal loss with label smoothing, AdamW, plateau LR scheduling and the
epoch loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .imaging import AugmentConfig, augment_array, sample_mixup_lambda, sample_stream
from .model import FuzzyAttentionNet, save_checkpoint
from .tensor import Tensor

logger = logging.getLogger(__name__)

HISTORY_HEADER = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc", "lr")


class TrainingError(RuntimeError):
    """Non-finite loss or gradient, or an unusable data split."""


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

@dataclass
class LossConfig:
    alpha: Sequence[float] | None = None
    gamma: float = 2.0
    epsilon: float = 0.1

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must lie in [0, 1)")
        if self.alpha is not None:
            self.alpha = tuple(float(a) for a in self.alpha)
            if any(a <= 0 for a in self.alpha):
                raise ValueError("alpha entries must be positive")


def balanced_alpha(labels, n_classes: int) -> tuple[float, ...]:
    """Inverse class frequency, normalised to mean 1."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(np.float64)
    inv = 1.0 / np.maximum(counts, 1.0)
    return tuple((inv / inv.mean()).tolist())


def smooth_labels(y, epsilon: float, n_classes: int | None = None) -> np.ndarray:
    """(1 - eps) * y + eps / K, row-wise."""
    y = np.asarray(y, dtype=np.float64)
    k = y.shape[-1] if n_classes is None else n_classes
    if y.shape[-1] != k:
        raise ValueError(f"label vectors have {y.shape[-1]} entries, expected {k}")
    if epsilon == 0:
        return y.copy()
    return (1.0 - epsilon) * y + epsilon / k


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def focal_loss(probs: Tensor, targets, cfg: LossConfig, log_probs: Tensor | None = None) -> Tensor:
    """Mean over samples of -sum_k alpha_k (1 - p_k)^gamma y_k log p_k.

    ``targets`` are (possibly smoothed or mixed) distributions. Passing
    ``log_probs`` computed from logits avoids taking the log of an
    underflowed probability.
    """
    targets = np.asarray(targets, dtype=probs.dtype)
    if targets.shape != probs.shape:
        raise ValueError(f"targets shape {targets.shape} != probs shape {probs.shape}")
    if np.any(np.abs(probs.data.sum(axis=1) - 1.0) > 1e-4):
        raise ValueError("probability rows must sum to 1")
    if np.any(np.abs(targets.sum(axis=1) - 1.0) > 1e-4):
        raise ValueError("target rows must sum to 1")
    n, k = probs.shape
    alpha = np.ones(k) if cfg.alpha is None else np.asarray(cfg.alpha)
    if alpha.shape != (k,):
        raise ValueError(f"alpha has {alpha.size} entries for {k} classes")
    logp = log_probs if log_probs is not None else T.log(probs, floor=1e-12)
    weights = Tensor((alpha[None, :] * targets).astype(probs.dtype))
    term = T.mul(logp, weights)
    if cfg.gamma != 0:
        term = T.mul(term, T.power(1.0 - probs, cfg.gamma))
    return T.tsum(term) * (-1.0 / n)


# ---------------------------------------------------------------------------
# optimiser and scheduler
# ---------------------------------------------------------------------------

def _decays(name: str) -> bool:
    # kernels and dense weights only; biases, centroids and widths are exempt
    return name.endswith((".conv", ".w", ".w1", ".w2", ".w_avg", ".w_max", ".kernel"))


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, state: OptimizerState, decay: Callable[[str], bool] = _decays) -> None:
    """One AdamW update in place, using each parameter's ``.grad``.

    Weight decay is decoupled: ``p -= lr * wd * p`` before the adaptive
    step. Parameters without a gradient are treated as having zero
    gradient.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
    state.t += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        data = p.data
        if state.weight_decay and decay(name):
            data = data - state.lr * state.weight_decay * data
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (data - step).astype(p.dtype, copy=False)


@dataclass
class PlateauScheduler:
    """Multiply the LR by ``factor`` after ``patience`` epochs without an
    absolute improvement larger than ``threshold`` in the monitored loss."""

    lr: float = 1e-3
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-6
    threshold: float = 1e-4
    best: float = math.inf
    wait: int = 0

    def step(self, val_loss: float) -> float:
        if not math.isfinite(val_loss):
            raise TrainingError(f"monitored value is not finite: {val_loss}")
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.wait = 0
        return self.lr


def scheduler_step(state: PlateauScheduler, val_loss: float) -> float:
    return state.step(val_loss)


# ---------------------------------------------------------------------------
# history
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float
    lr: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        for r in self.records:
            writer.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in HISTORY_HEADER[1:]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([EpochRecord(int(r["epoch"]), *(float(r[k]) for k in HISTORY_HEADER[1:])) for r in rows])


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    gamma: float = 2.0
    label_smoothing: float = 0.1
    alpha: str | Sequence[float] | None = "balanced"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    min_lr: float = 1e-6
    scheduler: str = "plateau"
    seed: int = 0
    verify_grads: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.scheduler not in ("plateau", "constant"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")

    def loss_config(self, train_labels, n_classes: int) -> LossConfig:
        if self.alpha == "balanced":
            alpha = balanced_alpha(train_labels, n_classes)
        elif self.alpha is None or self.alpha == "none":
            alpha = None
        else:
            alpha = tuple(self.alpha)
        return LossConfig(alpha=alpha, gamma=self.gamma, epsilon=self.label_smoothing)


@dataclass
class TrainResult:
    model: FuzzyAttentionNet
    best_state: dict
    best_epoch: int
    history: TrainHistory
    loss_config: LossConfig


def _to_nchw(batch: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(batch.transpose(0, 3, 1, 2))


def evaluate_loss(model: FuzzyAttentionNet, images: np.ndarray, labels: np.ndarray, cfg: LossConfig, batch_size: int = 64):
    """Mean loss and accuracy of un-augmented NHWC images."""
    k = model.config.n_classes
    total_loss = 0.0
    correct = 0
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            xb = _to_nchw(images[start:start + batch_size]).astype(model.dtype)
            yb = labels[start:start + batch_size]
            out = model.forward(xb)
            targets = smooth_labels(one_hot(yb, k), cfg.epsilon)
            loss = focal_loss(out.probs, targets, cfg, log_probs=T.log_softmax(out.logits))
            total_loss += loss.item() * len(yb)
            correct += int((out.probs.data.argmax(axis=1) == yb).sum())
    return total_loss / len(images), correct / len(images)


def verify_batch_gradients(model: FuzzyAttentionNet, xb: np.ndarray, targets: np.ndarray, cfg: LossConfig,
                           sample: int = 3, tol: float = 1e-4) -> float:
    """Re-run one batch in 64-bit and compare against central differences
    on a few sampled entries of every parameter."""
    m64 = model.astype(np.float64)
    x = Tensor(xb.astype(np.float64))

    def loss_fn(*_):
        out = m64.forward(x)
        return focal_loss(out.probs, targets, cfg, log_probs=T.log_softmax(out.logits))

    err = T.finite_diff_check(loss_fn, m64.parameters(), sample=sample)
    if err >= tol:
        raise TrainingError(f"gradient verification failed: relative error {err:.3g} >= {tol}")
    return err


def train(model: FuzzyAttentionNet, train_set, val_set, config: TrainConfig | None = None,
          out_dir=None, metadata: dict | None = None, progress: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Run every configured epoch (no early stopping).

    ``train_set`` and ``val_set`` are ``(images, labels)`` with images as
    N x H x W x 3 floats in [0, 1]. Each epoch shuffles, augments each
    sample from its own (seed, epoch, index) stream, optionally mixes the
    batch, steps AdamW, evaluates the validation split and steps the
    scheduler. With ``out_dir`` the final and best-validation checkpoints
    and the history CSV are written there.
    """
    config = config or TrainConfig()
    x_train, y_train = np.asarray(train_set[0]), np.asarray(train_set[1], dtype=np.int64)
    x_val, y_val = np.asarray(val_set[0]), np.asarray(val_set[1], dtype=np.int64)
    if len(x_train) == 0:
        raise TrainingError("training split is empty")
    if len(x_val) == 0:
        raise TrainingError("validation split is empty")
    k = model.config.n_classes
    loss_cfg = config.loss_config(y_train, k)
    history = TrainHistory()
    opt = OptimizerState(lr=config.lr, betas=tuple(config.betas), eps=config.adam_eps, weight_decay=config.weight_decay)
    sched = PlateauScheduler(lr=config.lr, factor=config.plateau_factor, patience=config.plateau_patience, min_lr=config.min_lr)
    best_state = model.state_dict()
    best_epoch = 0
    best_val = math.inf
    aug = config.augment
    dtype = model.dtype

    with threadpool_limits(limits=1):
        for epoch in range(1, config.epochs + 1):
            order = sample_stream(config.seed, epoch, 0).permutation(len(x_train))
            loss_sum = 0.0
            correct = 0
            for b, start in enumerate(range(0, len(order), config.batch_size)):
                idx = order[start:start + config.batch_size]
                batch = np.stack([
                    augment_array(x_train[i], aug, sample_stream(config.seed, epoch, 1, int(i))) for i in idx
                ])
                targets = one_hot(y_train[idx], k)
                if aug.mixup and len(idx) > 1:
                    rng = sample_stream(config.seed, epoch, 2, b)
                    lam = sample_mixup_lambda(rng, aug.mixup_alpha)
                    perm = rng.permutation(len(idx))
                    batch = lam * batch + (1.0 - lam) * batch[perm]
                    targets = lam * targets + (1.0 - lam) * targets[perm]
                hard = targets.argmax(axis=1)
                targets = smooth_labels(targets, loss_cfg.epsilon)
                xb = _to_nchw(batch).astype(dtype)
                if config.verify_grads and epoch == 1 and b == 0:
                    err = verify_batch_gradients(model, xb[:2], targets[:2], loss_cfg)
                    logger.info("gradient verification passed (max relative error %.3g)", err)
                model.zero_grad()
                try:
                    out = model.forward(xb)
                    loss = focal_loss(out.probs, targets, loss_cfg, log_probs=T.log_softmax(out.logits))
                    loss.backward()
                    adamw_step(model.params, opt)
                except FloatingPointError as exc:
                    raise TrainingError(f"numeric failure at epoch {epoch}, batch {b}: {exc}") from exc
                if not math.isfinite(loss.item()):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
                loss_sum += loss.item() * len(idx)
                correct += int((out.probs.data.argmax(axis=1) == hard).sum())
            model.zero_grad()
            val_loss, val_acc = evaluate_loss(model, x_val, y_val, loss_cfg)
            record = EpochRecord(epoch, loss_sum / len(order), val_loss, correct / len(order), val_acc, opt.lr)
            history.append(record)
            if val_loss < best_val:
                best_val, best_epoch, best_state = val_loss, epoch, model.state_dict()
            if config.scheduler == "plateau":
                opt.lr = sched.step(val_loss)
            if progress is not None:
                progress(record)
            logger.info("epoch %d: train_loss=%.4f val_loss=%.4f train_acc=%.3f val_acc=%.3f lr=%.2e",
                        epoch, record.train_loss, val_loss, record.train_acc, val_acc, record.lr)

    result = TrainResult(model, best_state, best_epoch, history, loss_cfg)
    if out_dir is not None:
        write_training_outputs(result, out_dir, metadata)
    return result


def write_training_outputs(result: TrainResult, out_dir, metadata: dict | None = None) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = dict(metadata or {})
    last = result.history.records[-1] if result.history.records else None
    final_meta = dict(meta, epoch=last.epoch if last else 0, metrics=_record_dict(last))
    paths = {
        "final": out_dir / "final.ckpt",
        "best": out_dir / "best.ckpt",
        "history": out_dir / "history.csv",
    }
    save_checkpoint(result.model, paths["final"], final_meta)
    best_model = FuzzyAttentionNet(result.model.config, dtype=result.model.dtype)
    best_model.load_state_dict(result.best_state)
    best_rec = result.history.records[result.best_epoch - 1] if result.best_epoch else None
    save_checkpoint(best_model, paths["best"], dict(meta, epoch=result.best_epoch, metrics=_record_dict(best_rec)))
    result.history.write_csv(paths["history"])
    return paths


def _record_dict(record: EpochRecord | None) -> dict:
    if record is None:
        return {}
    return {k: getattr(record, k) for k in HISTORY_HEADER}
