"""Grad-CAM heatmaps, overlays and fuzzy-membership reports."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .imaging import FundusImage, resize_array
from .model import FuzzyAttentionNet


@dataclass
class Heatmap:
    values: np.ndarray  # h x w, non-negative
    target_class: int
    layer: str
    normalized: bool = False

    def normalize(self) -> "Heatmap":
        """Scale to max 1 (no-op for an all-zero map); idempotent."""
        peak = float(self.values.max()) if self.values.size else 0.0
        vals = self.values / peak if peak > 0 else self.values.copy()
        return Heatmap(vals, self.target_class, self.layer, True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for row in self.values:
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, target_class: int = -1, layer: str = "") -> "Heatmap":
        rows = [[float(v) for v in line.split(",")] for line in text.strip().splitlines()]
        return cls(np.array(rows), target_class, layer)


def _as_batch(model: FuzzyAttentionNet, image) -> np.ndarray:
    if isinstance(image, FundusImage):
        image = image.to_float().pixels.transpose(2, 0, 1)
    x = np.asarray(image)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError("explanations take a single image")
    return x.astype(model.dtype)


def grad_cam(model: FuzzyAttentionNet, image, target_class: int | None = None, layer: str = "refined",
             normalize: bool = True) -> Heatmap:
    """relu(sum_k a_k A^k) where A^k are the maps cached at ``layer`` and
    a_k is the spatial mean of d(log-membership of the target class)/dA^k.

    ``image`` is 3 x H x W (or 1 x 3 x H x W, or a FundusImage) already
    preprocessed to the model's input size. ``target_class=None`` explains
    the predicted class.
    """
    if layer not in model.layer_ids:
        raise KeyError(f"unknown layer {layer!r}; choose one of {model.layer_ids}")
    x = _as_batch(model, image)
    model.zero_grad()
    out = model.forward(x)
    if target_class is None:
        target_class = int(out.probs.data[0].argmax())
    if not 0 <= target_class < model.config.n_classes:
        raise ValueError(f"target class {target_class} outside [0, {model.config.n_classes})")
    acts = out.cache[layer]
    if acts.shape[2] == 0 or acts.shape[3] == 0:
        raise ValueError(f"layer {layer!r} has an empty spatial extent")
    score = out.logits[0, target_class]
    score.backward()
    grads = acts.grad if acts.grad is not None else np.zeros_like(acts.data)
    model.zero_grad()
    weights = grads[0].mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, acts.data[0], axes=(0, 0)), 0.0).astype(np.float64)
    hm = Heatmap(cam, target_class, layer)
    return hm.normalize() if normalize else hm


def upsample(hm: Heatmap, height: int, width: int) -> np.ndarray:
    return np.maximum(resize_array(hm.values[..., None], height, width)[..., 0], 0.0)


def mass_fraction_in_boxes(hm: Heatmap, height: int, width: int, boxes, dilation: float) -> float:
    """Share of upsampled heatmap mass inside the union of (y0, x0, y1, x1)
    boxes grown by ``dilation`` pixels on every side."""
    up = upsample(hm, height, width)
    total = up.sum()
    if total <= 0:
        return 0.0
    mask = np.zeros((height, width), dtype=bool)
    d = int(round(dilation))
    for y0, x0, y1, x1 in boxes:
        mask[max(y0 - d, 0):min(y1 + d, height), max(x0 - d, 0):min(x1 + d, width)] = True
    return float(up[mask].sum() / total)


# 256-entry red -> yellow ramp
COLORMAP = np.stack([np.ones(256), np.linspace(0.0, 1.0, 256), np.zeros(256)], axis=1)


def colormap(values: np.ndarray) -> np.ndarray:
    idx = np.clip(np.floor(np.asarray(values) * 255.0 + 0.5), 0, 255).astype(np.int64)
    return COLORMAP[idx]


def upsample_overlay(hm: Heatmap, img: FundusImage, alpha: float = 0.5) -> FundusImage:
    """Blend ``alpha * hm`` of the colour-mapped heatmap over the image."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    base = img.to_float().pixels
    if alpha == 0.0 or not np.any(hm.values > 0):
        return img.with_pixels(img.pixels.copy())
    h = upsample(hm if hm.normalized else hm.normalize(), img.height, img.width)
    h = np.clip(h, 0.0, 1.0)[..., None]
    out = (1.0 - alpha * h) * base + alpha * h * colormap(h[..., 0])
    out = np.clip(out, 0.0, 1.0)
    if img.is_integer:
        return img.with_pixels(np.clip(np.floor(out * 255 + 0.5), 0, 255).astype(np.uint8))
    return img.with_pixels(out)


@dataclass
class MembershipReport:
    memberships: np.ndarray
    probabilities: np.ndarray
    predicted: int
    entropy: float
    class_names: tuple[str, ...] = ()

    def to_text(self) -> str:
        def display(v):
            return "[" + ", ".join(f"{x:.2f}" for x in v) + "]"

        names = self.class_names or tuple(str(i) for i in range(len(self.probabilities)))
        doc = {
            "predicted_class": self.predicted,
            "predicted_label": names[self.predicted],
            "class_names": list(names),
            "probabilities_display": display(self.probabilities),
            "memberships_display": display(self.memberships),
            "probabilities": [repr(float(p)) for p in self.probabilities],
            "memberships": [repr(float(m)) for m in self.memberships],
            "entropy": repr(self.entropy),
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MembershipReport":
        doc = json.loads(text)
        return cls(
            np.array([float(v) for v in doc["memberships"]]),
            np.array([float(v) for v in doc["probabilities"]]),
            int(doc["predicted_class"]),
            float(doc["entropy"]),
            tuple(doc["class_names"]),
        )


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def membership_report(model: FuzzyAttentionNet, image) -> MembershipReport:
    with T.no_grad():
        out = model.forward(_as_batch(model, image))
    probs = out.probs.data[0].copy()
    return MembershipReport(
        memberships=out.memberships[0].copy(),
        probabilities=probs,
        predicted=int(probs.argmax()),
        entropy=entropy(probs),
        class_names=model.config.class_names,
    )

