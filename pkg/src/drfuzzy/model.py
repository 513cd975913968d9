"""Attention-augmented convolutional backbone with a Gaussian fuzzy head.

Layout of a forward pass::

    image -> [conv3x3 -> relu -> SE] x stages          (F_cnn)
          -> channel attention gate M_c  (per channel)
          -> spatial attention gate M_s  (per position) (F', Grad-CAM target)
          -> global average pool -> dense -> fuzzy head -> probabilities
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

SIGMA_MIN = 1e-3
CHECKPOINT_MAGIC = b"DRFZCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint file."""


class ConfigMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class StageConfig:
    channels: int
    stride: int = 2
    se: bool = True
    se_ratio: int = 4


def _default_stages() -> tuple[StageConfig, ...]:
    return tuple(StageConfig(c, 2, True, 4) for c in (16, 32, 64, 128))


@dataclass(frozen=True)
class BackboneConfig:
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 3
    stages: tuple[StageConfig, ...] = field(default_factory=_default_stages)
    head_dim: int = 32
    spatial_kernel: int = 7
    channel_attention: bool = True
    spatial_attention: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        stages = tuple(s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise ValueError("backbone needs at least one stage")
        for i, s in enumerate(stages):
            if s.channels < 1:
                raise ValueError(f"stage {i}: channels must be >= 1")
            if s.stride not in (1, 2):
                raise ValueError(f"stage {i}: stride must be 1 or 2")
            if s.se and (s.se_ratio < 1 or s.channels % s.se_ratio):
                raise ValueError(f"stage {i}: SE ratio {s.se_ratio} must divide {s.channels} channels")
        total_stride = math.prod(s.stride for s in stages)
        if total_stride > min(self.input_size):
            raise ValueError(f"product of strides {total_stride} exceeds input size {self.input_size}")
        if self.head_dim < 1:
            raise ValueError("head_dim must be >= 1")

    @property
    def out_channels(self) -> int:
        return self.stages[-1].channels

    def feature_size(self) -> tuple[int, int]:
        h, w = self.input_size
        for s in self.stages:
            h = T.conv_output_size(h, 3, s.stride, "same")
            w = T.conv_output_size(w, 3, s.stride, "same")
        return h, w

    @classmethod
    def tiny(cls, size: int = 8) -> "BackboneConfig":
        """Two-stage toy network for gradient verification."""
        return cls((size, size), 3, (StageConfig(4, 2, True, 2), StageConfig(4, 1, True, 2)), head_dim=3)


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    n_classes: int = 5
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            bb = dict(self.backbone)
            bb["stages"] = tuple(StageConfig(**s) for s in bb["stages"])
            object.__setattr__(self, "backbone", BackboneConfig(**bb))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.class_names and len(self.class_names) != self.n_classes:
            raise ValueError("class_names must have one entry per class")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        data = json.loads(text)
        data["class_names"] = tuple(data.get("class_names", ()))
        return cls(**data)


# ---------------------------------------------------------------------------
# building blocks (functional form)
# ---------------------------------------------------------------------------

def conv_block(x: Tensor, kernel: Tensor, bias: Tensor, stride: int) -> Tensor:
    out = T.conv2d(x, kernel, stride=stride, padding="same")
    return T.relu(out + T.reshape(bias, (1, -1, 1, 1)))


def se_gate(f: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Excitation weights s (N x C) from the globally pooled descriptor."""
    z = T.global_avg_pool(f)
    return T.sigmoid(T.dense(T.relu(T.dense(z, w1, b1)), w2, b2))


def se_block(f: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return T.scale_channels(f, se_gate(f, w1, b1, w2, b2))


def channel_attention(f: Tensor, w_avg: Tensor, b_avg: Tensor, w_max: Tensor) -> Tensor:
    """M_c (N x C): sigmoid of dense maps over average- and max-pooled descriptors."""
    return T.sigmoid(T.dense(T.global_avg_pool(f), w_avg, b_avg) + T.dense(T.global_max_pool(f), w_max))


def spatial_attention(f: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """M_s (N x 1 x h x w) from a conv over the channel-pooled planes."""
    pooled = T.channel_pool(f)
    return T.sigmoid(T.conv2d(pooled, kernel, stride=1, padding="same") + T.reshape(bias, (1, 1, 1, 1)))


def refine(f: Tensor, m_c: Tensor | None, m_s: Tensor | None) -> Tensor:
    """F' = M_s * (M_c * F), channel gate first."""
    out = f
    if m_c is not None:
        out = T.scale_channels(out, m_c)
    if m_s is not None:
        out = T.mul(out, m_s)
    return out


def sigma_from_free(rho: Tensor) -> Tensor:
    return T.softplus(rho) + SIGMA_MIN


def free_from_sigma(sigma: float) -> float:
    """Inverse of the positive width map (sigma > SIGMA_MIN)."""
    v = sigma - SIGMA_MIN
    return float(v + math.log(-math.expm1(-v)))


def fuzzy_logits(x: Tensor, centroids: Tensor, sigma: Tensor) -> Tensor:
    """log mu_k(x) = -||x - c_k||^2 / (2 sigma_k^2), shape N x K."""
    if not np.all(np.isfinite(x.data)):
        raise ValueError("fuzzy head received non-finite features")
    if x.ndim != 2 or x.shape[1] != centroids.shape[1]:
        raise ValueError(f"feature dim {x.shape} does not match centroids {centroids.shape}")
    d2 = T.squared_distances(x, centroids)
    inv = T.power(sigma, -2.0) * -0.5
    return T.mul(d2, T.reshape(inv, (1, -1)))


def fuzzy_head(x: Tensor, centroids: Tensor, sigma: Tensor) -> tuple[np.ndarray, Tensor, Tensor]:
    """Returns (memberships, probabilities, log-memberships).

    Probabilities are the softmax of the log-memberships, so large
    distances never underflow before normalisation.
    """
    logits = fuzzy_logits(x, centroids, sigma)
    memberships = np.exp(logits.data)
    return memberships, T.softmax(logits), logits


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class ForwardResult(NamedTuple):
    probs: Tensor
    memberships: np.ndarray
    logits: Tensor
    features: Tensor
    cache: dict


class FuzzyAttentionNet:
    """Parameter container plus forward pass.

    Parameters live in ``self.params`` in registration order, which is
    also their order inside a checkpoint.
    """

    gate_bias_init = 2.0

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32, zero_gates: bool = False):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._init_params(np.random.default_rng(seed), zero_gates)

    # -- parameters -----------------------------------------------------------
    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)

    def _init_params(self, rng: np.random.Generator, zero_gates: bool) -> None:
        bb = self.config.backbone
        c_in = bb.in_channels

        def gate(shape, std):
            return np.zeros(shape) if zero_gates else rng.normal(0.0, std, size=shape)

        def gate_bias(n):
            # gates start mostly open so the signal survives the stacked sigmoids
            return np.full(n, 0.0 if zero_gates else self.gate_bias_init)

        for i, st in enumerate(bb.stages, start=1):
            fan_in = c_in * 9
            self._add(f"stage{i}.conv", rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(st.channels, c_in, 3, 3)))
            self._add(f"stage{i}.bias", np.zeros(st.channels))
            if st.se:
                hidden = st.channels // st.se_ratio
                self._add(f"stage{i}.se.w1", gate((st.channels, hidden), math.sqrt(2.0 / st.channels)))
                self._add(f"stage{i}.se.b1", np.zeros(hidden))
                self._add(f"stage{i}.se.w2", gate((hidden, st.channels), math.sqrt(1.0 / hidden)))
                self._add(f"stage{i}.se.b2", gate_bias(st.channels))
            c_in = st.channels
        c = bb.out_channels
        if bb.channel_attention:
            self._add("channel.w_avg", gate((c, c), math.sqrt(1.0 / c)))
            self._add("channel.b_avg", gate_bias(c))
            self._add("channel.w_max", gate((c, c), math.sqrt(1.0 / c)))
        if bb.spatial_attention:
            k = bb.spatial_kernel
            self._add("spatial.kernel", gate((1, 2, k, k), math.sqrt(1.0 / (2 * k * k))))
            self._add("spatial.bias", gate_bias(1))
        d = bb.head_dim
        self._add("head.w", rng.normal(0.0, math.sqrt(2.0 / (c + d)), size=(c, d)))
        self._add("head.b", np.zeros(d))
        self._add("fuzzy.centroids", rng.uniform(-0.5, 0.5, size=(self.config.n_classes, d)))
        self._add("fuzzy.rho", np.full(self.config.n_classes, free_from_sigma(1.0)))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ConfigMismatchError(f"parameter names differ: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ConfigMismatchError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(self.dtype, copy=True)
            p.zero_grad()

    def astype(self, dtype) -> "FuzzyAttentionNet":
        other = FuzzyAttentionNet.__new__(FuzzyAttentionNet)
        other.config = self.config
        other.dtype = np.dtype(dtype)
        other.params = OrderedDict((k, Tensor(v.data.astype(dtype), requires_grad=True)) for k, v in self.params.items())
        return other

    def sigma(self) -> np.ndarray:
        with T.no_grad():
            return sigma_from_free(self.params["fuzzy.rho"]).data.copy()

    # -- forward ----------------------------------------------------------------
    def backbone_forward(self, x: Tensor, cache: dict | None = None) -> Tensor:
        bb = self.config.backbone
        expected = (bb.in_channels,) + bb.input_size
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"model expects N x {expected[0]} x {expected[1]} x {expected[2]} input, got {x.shape}")
        p = self.params
        f = x
        for i, st in enumerate(bb.stages, start=1):
            f = conv_block(f, p[f"stage{i}.conv"], p[f"stage{i}.bias"], st.stride)
            if st.se:
                f = se_block(f, p[f"stage{i}.se.w1"], p[f"stage{i}.se.b1"], p[f"stage{i}.se.w2"], p[f"stage{i}.se.b2"])
            if cache is not None:
                cache[f"stage{i}"] = f
        return f

    def forward(self, images) -> ForwardResult:
        """Images are N x 3 x H x W (Tensor or array)."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad)
        p = self.params
        bb = self.config.backbone
        cache: dict = {"input": x}
        f = self.backbone_forward(x, cache)
        cache["backbone"] = f
        refined = f
        if bb.channel_attention:
            m_c = channel_attention(f, p["channel.w_avg"], p["channel.b_avg"], p["channel.w_max"])
            cache["channel_gate"] = m_c
            refined = refine(refined, m_c, None)
        if bb.spatial_attention:
            # the spatial gate looks at the channel-gated map
            m_s = spatial_attention(refined, p["spatial.kernel"], p["spatial.bias"])
            cache["spatial_gate"] = m_s
            refined = refine(refined, None, m_s)
        cache["refined"] = refined
        pooled = T.global_avg_pool(refined)
        feats = T.dense(pooled, p["head.w"], p["head.b"])
        memberships, probs, logits = fuzzy_head(feats, p["fuzzy.centroids"], sigma_from_free(p["fuzzy.rho"]))
        return ForwardResult(probs, memberships, logits, feats, cache)

    __call__ = forward

    def predict_proba(self, images, batch_size: int = 64) -> np.ndarray:
        out = []
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                out.append(self.forward(images[start:start + batch_size]).probs.data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.n_classes))

    @property
    def layer_ids(self) -> list[str]:
        ids = [f"stage{i}" for i in range(1, len(self.config.backbone.stages) + 1)] + ["backbone", "refined"]
        return ids


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<Q", len(raw)) + raw


def save_checkpoint(model: FuzzyAttentionNet, path, metadata: dict | None = None) -> None:
    """Write magic, version, config text, float32 parameters, metadata text.

    Integers are little-endian; each parameter array is prefixed by its
    element count.
    """
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), _pack_text(model.config.to_json())]
    parts.append(struct.pack("<I", len(model.params)))
    for tensor in model.params.values():
        arr = np.ascontiguousarray(tensor.data, dtype="<f4")
        parts.append(struct.pack("<Q", arr.size))
        parts.append(arr.tobytes())
    parts.append(_pack_text(json.dumps(metadata or {}, sort_keys=True)))
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def uint(self, fmt: str) -> int:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def text(self) -> str:
        n = self.uint("<Q")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("checkpoint text block is corrupt") from exc


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> tuple[FuzzyAttentionNet, dict]:
    """Read a checkpoint; refuses other versions and, when
    ``expected_config`` is given, any architecture difference."""
    reader = _Reader(Path(path).read_bytes())
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = reader.uint("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    try:
        config = ModelConfig.from_json(reader.text())
    except (json.JSONDecodeError, TypeError, KeyError) as exc:
        raise CheckpointError(f"{path}: architecture block is corrupt") from exc
    if expected_config is not None and config != expected_config:
        raise ConfigMismatchError(f"{path}: checkpoint architecture differs from the requested configuration")
    model = FuzzyAttentionNet(config, dtype=np.float32)
    count = reader.uint("<I")
    if count != len(model.params):
        raise CheckpointError(f"{path}: {count} parameter arrays, architecture declares {len(model.params)}")
    for name, tensor in model.params.items():
        size = reader.uint("<Q")
        if size != tensor.size:
            raise CheckpointError(f"{path}: {name} has {size} values, expected {tensor.size}")
        tensor.data = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(tensor.shape).astype(np.float32)
    try:
        metadata = json.loads(reader.text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: metadata block is corrupt") from exc
    if reader.pos != len(reader.data):
        raise CheckpointError(f"{path}: {len(reader.data) - reader.pos} trailing bytes")
    return model, metadata
