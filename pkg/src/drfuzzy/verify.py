"""Self-check suites run by ``drfuzzy verify`` and the acceptance tests.

The gradient suite compares every differentiable primitive, and the
composed model plus loss, against central finite differences in 64-bit.
The metric suite compares confusion counts, per-class metrics and
one-vs-rest AUC against deliberately naive reference implementations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .evaluation import class_report, confusion, roc_auc_ovr
from .model import BackboneConfig, FuzzyAttentionNet, ModelConfig
from .tensor import Tensor
from .training import LossConfig, focal_loss, one_hot, smooth_labels

OP_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        if self.tolerance == 0:
            return self.error == 0
        return bool(self.error < self.tolerance)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<28} error={self.error:.3e}  tol={self.tolerance:.0e}"


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.05):
    """Uniform draws with |x| >= margin, so kinks (relu, max) are not probed."""
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    """Values with well-separated entries so max-pooling has no ties."""
    n = int(np.prod(shape))
    return (rng.permutation(n) / n + rng.uniform(0, 0.2 / n, n)).reshape(shape) - 0.5


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    """Fixed random weights turning a tensor output into a scalar."""
    w = Tensor(rng.normal(size=out.shape))
    return lambda y: T.tsum(y * w)


def _case(op: Callable[..., Tensor], inputs: list[np.ndarray], rng) -> tuple[Callable, list[Tensor]]:
    tensors = [_t(a) for a in inputs]
    with T.no_grad():
        proj = _project(op(*tensors), rng)
    return (lambda *xs: proj(op(*xs))), tensors


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[Tensor]]]:
    """One randomized finite-difference case per primitive."""
    n, c, h, w = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(3, 7)), int(rng.integers(3, 7))
    m, k, p = (int(v) for v in rng.integers(1, 5, size=3))
    u = lambda *s: rng.normal(size=s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    stride = int(rng.integers(1, 3))
    ksz = int(rng.choice([1, 3]))
    cases = {
        "add": (T.add, [u(m, k), u(k)]),
        "sub": (T.sub, [u(m, k), u(m, k)]),
        "mul": (T.mul, [u(m, k), u(m, 1)]),
        "div": (lambda a, b: a / b, [u(m, k), pos(m, k)]),
        "neg": (lambda a: -a, [u(m, k)]),
        "power": (lambda a: T.power(a, 2.5), [pos(m, k)]),
        "exp": (T.exp, [u(m, k)]),
        "log": (T.log, [pos(m, k)]),
        "matmul": (T.matmul, [u(m, k), u(k, p)]),
        "sum": (lambda a: T.tsum(a, axis=1, keepdims=True), [u(m, k, p)]),
        "mean": (lambda a: T.tmean(a, axis=(0, 2)), [u(m, k, p)]),
        "reshape": (lambda a: T.reshape(a, (k, m)), [u(m, k)]),
        "getitem": (lambda a: a[:, 1:], [u(m, k + 1)]),
        "relu": (T.relu, [_away_from_zero(rng, (m, k))]),
        "sigmoid": (T.sigmoid, [u(m, k) * 3]),
        "softplus": (T.softplus, [u(m, k) * 3]),
        "softmax": (T.softmax, [u(m, k + 1)]),
        "log_softmax": (T.log_softmax, [u(m, k + 1)]),
        "dense": (T.dense, [u(m, k), u(k, p), u(p)]),
        "conv2d_same": (lambda x, kk: T.conv2d(x, kk, stride, "same"), [u(n, c, h, w), u(2, c, ksz, ksz)]),
        "conv2d_valid": (lambda x, kk: T.conv2d(x, kk, 1, "valid"), [u(n, c, h, w), u(2, c, 3, 3)]),
        "global_avg_pool": (T.global_avg_pool, [u(n, c, h, w)]),
        "global_max_pool": (T.global_max_pool, [_distinct(rng, (n, c, h, w))]),
        "channel_pool": (T.channel_pool, [_distinct(rng, (n, c + 1, h, w))]),
        "scale_channels": (T.scale_channels, [u(n, c, h, w), u(n, c)]),
        "squared_distances": (T.squared_distances, [u(m, k), u(p, k)]),
    }
    return {name: _case(op, arrs, rng) for name, (op, arrs) in cases.items()}


def gradient_suite(seed: int = 0, trials: int = 3) -> list[CheckResult]:
    """Per-op checks over ``trials`` random shapes, then the full model."""
    worst: dict[str, float] = {}
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        for name, (fn, inputs) in op_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), T.finite_diff_check(fn, inputs))
    results = [CheckResult(name, err, OP_TOLERANCE) for name, err in worst.items()]
    results.append(CheckResult("full_model_focal_loss", model_gradient_error(seed), MODEL_TOLERANCE))
    return results


def model_gradient_error(seed: int = 0, size: int = 8, n_classes: int = 3, batch: int = 2, eps: float = 1e-6) -> float:
    """Finite-difference error of focal loss through the toy 8x8 network
    (every parameter, every element) in 64-bit.

    The step is smaller than the per-op default because a random network
    occasionally has a ReLU pre-activation within 1e-5 of zero, where a
    wider central difference straddles the kink.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(BackboneConfig.tiny(size), n_classes=n_classes)
    model = FuzzyAttentionNet(cfg, seed=seed, dtype=np.float64)
    x = Tensor(rng.uniform(0, 1, size=(batch, 3, size, size)))
    labels = rng.integers(0, n_classes, size=batch)
    targets = smooth_labels(one_hot(labels, n_classes), 0.1)
    loss_cfg = LossConfig(alpha=tuple(rng.uniform(0.5, 1.5, n_classes)), gamma=2.0, epsilon=0.1)

    def loss_fn(*_):
        out = model.forward(x)
        return focal_loss(out.probs, targets, loss_cfg, log_probs=T.log_softmax(out.logits))

    return T.finite_diff_check(loss_fn, model.parameters(), eps=eps)


# ---------------------------------------------------------------------------
# metric oracles
# ---------------------------------------------------------------------------

def brute_force_counts(true, pred, k):
    counts = [[0] * k for _ in range(k)]
    for t, p in zip(true, pred):
        counts[int(t)][int(p)] += 1
    return counts


def brute_force_prf(counts):
    k = len(counts)
    out = []
    for c in range(k):
        tp = counts[c][c]
        fp = sum(counts[r][c] for r in range(k)) - tp
        fn = sum(counts[c]) - tp
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out.append((prec, rec, f1))
    return out


def pairwise_auc(positive, scores):
    pos = [s for s, y in zip(scores, positive) if y]
    neg = [s for s, y in zip(scores, positive) if not y]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def metric_suite(seed: int = 0, instances: int = 100) -> list[CheckResult]:
    """Returns two results: the worst exact-count/metric mismatch (must be
    zero) and the worst AUC deviation from the pairwise oracle."""
    rng = np.random.default_rng(seed)
    count_err = 0.0
    auc_err = 0.0
    for _ in range(instances):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(2, 201))
        true = rng.integers(0, k, size=n)
        pred = rng.integers(0, k, size=n)
        # coarse scores make ties common
        scores = np.round(rng.uniform(size=(n, k)), int(rng.integers(1, 4)))
        cm = confusion(true, pred, k)
        ref = brute_force_counts(true, pred, k)
        count_err = max(count_err, float(np.abs(cm.counts - np.array(ref)).max()))
        report = class_report(cm)
        for c, (p, r, f) in enumerate(brute_force_prf(ref)):
            count_err = max(count_err, abs(report.precision[c] - p), abs(report.recall[c] - r), abs(report.f1[c] - f))
        if len(set(true.tolist())) < 2:
            continue
        roc = roc_auc_ovr(true, scores)
        for c in range(k):
            pos = true == c
            if 0 < pos.sum() < n:
                auc_err = max(auc_err, abs(roc.auc[c] - pairwise_auc(pos, scores[:, c])))
    return [
        CheckResult("confusion/precision/recall/f1", count_err, 0.0),
        CheckResult("ovr_auc_vs_pairwise", auc_err, 1e-9),
    ]
