"""Fundus image I/O, enhancement, augmentation and mixup."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass

import numpy as np

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class ImageFormatError(ValueError):
    """Malformed or unsupported image file."""


@dataclass
class FundusImage:
    """RGB retinal image, H x W x 3.

    ``pixels`` is either uint8 (storage form) or float in [0, 1]
    (processing form).
    """

    pixels: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 pixels, got shape {px.shape}")
        if px.dtype != np.uint8:
            px = px.astype(np.float64, copy=False) if px.dtype not in (np.float32, np.float64) else px
            if px.size and (px.min() < 0.0 or px.max() > 1.0):
                raise ValueError("real-valued pixels must lie in [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def is_integer(self) -> bool:
        return self.pixels.dtype == np.uint8

    def to_float(self, dtype=np.float64) -> "FundusImage":
        if self.is_integer:
            return FundusImage(self.pixels.astype(dtype) / 255.0, self.source_id)
        return FundusImage(self.pixels.astype(dtype, copy=False), self.source_id)

    def to_uint8(self) -> "FundusImage":
        if self.is_integer:
            return self
        return FundusImage(to_uint8(self.pixels), self.source_id)

    def with_pixels(self, pixels: np.ndarray) -> "FundusImage":
        return FundusImage(pixels, self.source_id)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(pixels) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _as_form(pixels: np.ndarray, like: FundusImage) -> np.ndarray:
    """Return float pixels in the storage form of ``like``."""
    return to_uint8(pixels) if like.is_integer else np.clip(pixels, 0.0, 1.0)


# ---------------------------------------------------------------------------
# decoding / encoding
# ---------------------------------------------------------------------------

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _ppm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        tokens.append(data[start:pos])
    if pos >= n or not data[pos:pos + 1].isspace():
        raise ImageFormatError("truncated PPM header")
    return tokens, pos + 1


def decode_ppm(data: bytes, source_id: str = "") -> FundusImage:
    tokens, offset = _ppm_tokens(data, 4)
    if tokens[0] != b"P6":
        raise ImageFormatError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError("malformed PPM header") from exc
    if width < 1 or height < 1:
        raise ImageFormatError("PPM dimensions must be positive")
    if maxval != 255:
        raise ImageFormatError(f"unsupported PPM bit depth (maxval {maxval}); only 255 is supported")
    expected = width * height * 3
    body = data[offset:offset + expected]
    if len(body) != expected:
        raise ImageFormatError(f"truncated PPM body: expected {expected} bytes, found {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3).copy()
    return FundusImage(pixels, source_id)


def encode_ppm(img: FundusImage) -> bytes:
    px = img.to_uint8().pixels
    header = f"P6\n{px.shape[1]} {px.shape[0]}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(px).tobytes()


def decode_png(data: bytes, source_id: str = "") -> FundusImage:
    if not data.startswith(_PNG_SIGNATURE) or len(data) < 33:
        raise ImageFormatError("not a PNG file or truncated header")
    length, kind = struct.unpack(">I4s", data[8:16])
    if kind != b"IHDR" or length != 13:
        raise ImageFormatError("PNG is missing its IHDR chunk")
    bit_depth, color_type = data[24], data[25]
    if bit_depth != 8:
        raise ImageFormatError(f"unsupported PNG bit depth {bit_depth}; only 8-bit RGB is supported")
    if color_type not in (2, 6):
        raise ImageFormatError(f"unsupported PNG color type {color_type}; only RGB/RGBA is supported")
    from PIL import Image

    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            pixels = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"corrupt PNG: {exc}") from exc
    return FundusImage(pixels, source_id)


def encode_png(img: FundusImage) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(img.to_uint8().pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode(data: bytes, format: str | None = None, source_id: str = "") -> FundusImage:
    """Decode PPM (P6) or PNG bytes; the format is sniffed when not given."""
    if format is None:
        format = "png" if data.startswith(_PNG_SIGNATURE) else "ppm"
    format = format.lower()
    if format == "ppm":
        return decode_ppm(data, source_id)
    if format == "png":
        return decode_png(data, source_id)
    raise ImageFormatError(f"unsupported image format {format!r}")


def encode(img: FundusImage, format: str = "ppm") -> bytes:
    format = format.lower()
    if format == "ppm":
        return encode_ppm(img)
    if format == "png":
        return encode_png(img)
    raise ImageFormatError(f"unsupported image format {format!r}")


def read_image(path) -> FundusImage:
    from pathlib import Path

    path = Path(path)
    suffix = path.suffix.lower().lstrip(".")
    fmt = {"ppm": "ppm", "png": "png"}.get(suffix)
    if fmt is None:
        raise ImageFormatError(f"unsupported image extension {path.suffix!r}")
    return decode(path.read_bytes(), fmt, source_id=path.stem)


def write_image(img: FundusImage, path) -> None:
    from pathlib import Path

    path = Path(path)
    path.write_bytes(encode(img, path.suffix.lower().lstrip(".") or "ppm"))


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _bilinear_sample(px: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill: float | None) -> np.ndarray:
    """Sample H x W x C ``px`` at float coordinates. ``fill=None`` clamps to
    the edge; otherwise out-of-range samples get ``fill``."""
    h, w = px.shape[:2]
    if fill is None:
        ys = np.clip(ys, 0.0, h - 1)
        xs = np.clip(xs, 0.0, w - 1)
        inside = None
    else:
        inside = (ys > -1.0) & (ys < h) & (xs > -1.0) & (xs < w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    out = np.zeros(ys.shape + (px.shape[2],), dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = px[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)].astype(np.float64)
            if fill is not None:
                vals = np.where(valid[..., None], vals, fill)
            out += wy * wx * vals
    if inside is not None:
        out = np.where(inside[..., None], out, fill)
    return out


def resize_array(px: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = px.shape[:2]
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _bilinear_sample(px, yy, xx, fill=None)


def resize(img: FundusImage, out_h: int, out_w: int) -> FundusImage:
    """Bilinear resize with edge clamping (half-pixel centres)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be at least 1x1")
    src = img.pixels.astype(np.float64)
    if img.is_integer:
        out = np.clip(np.floor(resize_array(src, out_h, out_w) + 0.5), 0, 255).astype(np.uint8)
    else:
        out = np.clip(resize_array(src, out_h, out_w), 0.0, 1.0)
    return img.with_pixels(out)


# ---------------------------------------------------------------------------
# enhancement
# ---------------------------------------------------------------------------

def circular_crop(img: FundusImage, black_threshold: float = 10) -> FundusImage:
    """Crop to a square around the retina, dropping black margins.

    Pixels whose brightest channel exceeds ``black_threshold`` (0-255
    scale) define a bounding box; the crop is the smallest square centred
    on it, zero-padded where it leaves the frame.
    """
    if not 0 <= black_threshold <= 255:
        raise ValueError("black_threshold must lie in [0, 255]")
    px = img.pixels
    level = px.max(axis=2).astype(np.float64)
    if not img.is_integer:
        level = level * 255.0
    rows = np.flatnonzero((level > black_threshold).any(axis=1))
    cols = np.flatnonzero((level > black_threshold).any(axis=0))
    if rows.size == 0:
        return img
    top, bottom = rows[0], rows[-1] + 1
    left, right = cols[0], cols[-1] + 1
    side = max(bottom - top, right - left)
    cy2 = top + bottom  # twice the centre, keeps integer arithmetic
    cx2 = left + right
    y0 = (cy2 - side) // 2
    x0 = (cx2 - side) // 2
    out = np.zeros((side, side, 3), dtype=px.dtype)
    sy0, sx0 = max(y0, 0), max(x0, 0)
    sy1, sx1 = min(y0 + side, px.shape[0]), min(x0 + side, px.shape[1])
    out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = px[sy0:sy1, sx0:sx1]
    return img.with_pixels(out)


def luminance(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) @ LUMA_WEIGHTS


def _clipped_lut(hist: np.ndarray, clip_limit: float) -> np.ndarray:
    total = hist.sum()
    hist = hist.astype(np.float64)
    if math.isfinite(clip_limit):
        if np.count_nonzero(hist) == 1:
            # a single-level tile has no contrast to stretch: the clipped
            # histogram is flat apart from one bin, so keep the identity ramp
            return np.arange(256, dtype=np.float64)
        limit = clip_limit * total / 256.0
        excess = np.maximum(hist - limit, 0.0).sum()
        hist = np.minimum(hist, limit) + excess / 256.0
    cdf = np.cumsum(hist)
    return 255.0 * cdf / total


def clahe(img: FundusImage, tiles: tuple[int, int] = (8, 8), clip_limit: float = 2.0) -> FundusImage:
    """Contrast-limited adaptive histogram equalization on luminance.

    ``tiles`` is (tx, ty): tile columns and rows. ``clip_limit`` is a
    multiple of the uniform bin height; ``math.inf`` disables clipping.
    Chroma follows the luminance change proportionally.
    """
    tx, ty = tiles
    if tx < 1 or ty < 1:
        raise ValueError("tile counts must be at least 1")
    if clip_limit < 1:
        raise ValueError("clip_limit must be >= 1")
    rgb = img.to_uint8().pixels.astype(np.float64)
    h, w = rgb.shape[:2]
    if tx > w or ty > h:
        raise ValueError(f"{tx}x{ty} tiles do not fit a {w}x{h} image")
    lum = luminance(rgb)
    # histogram bin = round-half-up of the luminance, in exact integer
    # arithmetic so ties such as 163.5 do not depend on float summation order
    rgb_int = img.to_uint8().pixels.astype(np.int64)
    bins = (rgb_int @ np.array([299, 587, 114]) + 500) // 1000
    ys = np.linspace(0, h, ty + 1).round().astype(int)
    xs = np.linspace(0, w, tx + 1).round().astype(int)
    luts = np.empty((ty, tx, 256))
    for i in range(ty):
        for j in range(tx):
            tile = bins[ys[i]:ys[i + 1], xs[j]:xs[j + 1]]
            luts[i, j] = _clipped_lut(np.bincount(tile.ravel(), minlength=256), clip_limit)

    # fractional tile coordinates of each pixel relative to tile centres
    fy = np.clip((np.arange(h) + 0.5) * ty / h - 0.5, 0, ty - 1)
    fx = np.clip((np.arange(w) + 0.5) * tx / w - 0.5, 0, tx - 1)
    iy0 = np.floor(fy).astype(int)
    ix0 = np.floor(fx).astype(int)
    iy1 = np.minimum(iy0 + 1, ty - 1)
    ix1 = np.minimum(ix0 + 1, tx - 1)
    wy = (fy - iy0)[:, None]
    wx = (fx - ix0)[None, :]
    Y0, X0 = iy0[:, None], ix0[None, :]
    Y1, X1 = iy1[:, None], ix1[None, :]
    mapped = (
        (1 - wy) * (1 - wx) * luts[Y0, X0, bins]
        + (1 - wy) * wx * luts[Y0, X1, bins]
        + wy * (1 - wx) * luts[Y1, X0, bins]
        + wy * wx * luts[Y1, X1, bins]
    )
    ratio = np.divide(mapped, lum, out=np.zeros_like(mapped), where=lum > 0)
    out = np.where((lum > 0)[..., None], rgb * ratio[..., None], mapped[..., None])
    out8 = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    if img.is_integer:
        return img.with_pixels(out8)
    return img.with_pixels(out8.astype(img.pixels.dtype) / 255.0)


def adaptive_gamma(img: FundusImage) -> float:
    """Exponent that moves mean luminance toward 0.5, clamped to [0.5, 2]."""
    mean = float(luminance(img.to_float().pixels).mean())
    if mean <= 0.0:
        return 0.5
    if mean >= 1.0:
        return 2.0
    return float(np.clip(math.log(0.5) / math.log(mean), 0.5, 2.0))


def gamma_correct(img: FundusImage, mode: str | float = "adaptive") -> FundusImage:
    """``out = in ** g`` on unit-interval pixels; ``mode`` is a fixed g in
    [0.25, 4] or ``"adaptive"``."""
    if mode == "adaptive":
        g = adaptive_gamma(img)
    else:
        g = float(mode)
        if not 0.25 <= g <= 4.0:
            raise ValueError(f"fixed gamma must lie in [0.25, 4], got {g}")
    px = img.to_float().pixels
    out = px if g == 1.0 else px ** g
    return img.with_pixels(_as_form(out, img))


@dataclass
class PreprocessConfig:
    size: int = 224
    crop: bool = True
    crop_threshold: float = 10
    clahe: bool = True
    clahe_tiles: tuple[int, int] = (8, 8)
    clahe_clip: float = 2.0
    gamma: bool = True
    gamma_mode: str | float = "adaptive"
    order: tuple[str, ...] = ("crop", "resize", "clahe", "gamma")

    def __post_init__(self):
        known = {"crop", "resize", "clahe", "gamma"}
        if set(self.order) != known or len(self.order) != 4:
            raise ValueError(f"order must be a permutation of {sorted(known)}")
        if self.size < 1:
            raise ValueError("size must be positive")


def preprocess_stages(img: FundusImage, cfg: PreprocessConfig) -> list[tuple[str, FundusImage]]:
    """Run the enhancement pipeline, returning every intermediate stage."""
    stages = []
    cur = img.to_uint8()
    for name in cfg.order:
        if name == "crop" and cfg.crop:
            cur = circular_crop(cur, cfg.crop_threshold)
        elif name == "resize":
            cur = resize(cur, cfg.size, cfg.size)
        elif name == "clahe" and cfg.clahe:
            cur = clahe(cur, cfg.clahe_tiles, cfg.clahe_clip)
        elif name == "gamma" and cfg.gamma:
            cur = gamma_correct(cur, cfg.gamma_mode)
        stages.append((name, cur))
    return stages


def preprocess(img: FundusImage, cfg: PreprocessConfig | None = None) -> FundusImage:
    return preprocess_stages(img, cfg or PreprocessConfig())[-1][1]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    rotation_degrees: float = 15.0
    zoom_range: tuple[float, float] = (0.9, 1.1)
    brightness_range: tuple[float, float] = (-0.1, 0.1)
    mixup_alpha: float = 0.2
    flip: bool = True
    rotate: bool = True
    zoom: bool = True
    brightness: bool = True
    mixup: bool = True

    def __post_init__(self):
        for name in ("hflip_prob", "vflip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.zoom_range
        if lo <= 0 or hi <= 0 or lo > hi:
            raise ValueError(f"zoom_range must be a positive interval, got {self.zoom_range}")
        if self.brightness_range[0] > self.brightness_range[1]:
            raise ValueError("brightness_range must be an ordered interval")
        if self.rotation_degrees < 0:
            raise ValueError("rotation_degrees must be non-negative")
        if self.mixup_alpha <= 0:
            raise ValueError("mixup_alpha must be positive")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(flip=False, rotate=False, zoom=False, brightness=False, mixup=False)


def rotate_array(px: np.ndarray, degrees: float) -> np.ndarray:
    h, w = px.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(degrees)
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # inverse map: rotate output coordinates back into the source
    src_x = math.cos(t) * xx + math.sin(t) * yy + cx
    src_y = -math.sin(t) * xx + math.cos(t) * yy + cy
    return _bilinear_sample(px, src_y, src_x, fill=0.0)


def zoom_array(px: np.ndarray, factor: float) -> np.ndarray:
    """Scale about the centre keeping the frame size; factor > 1 crops in."""
    h, w = px.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return _bilinear_sample(px, (yy - cy) / factor + cy, (xx - cx) / factor + cx, fill=0.0)


def augment_array(px: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Augment unit-interval H x W x 3 pixels: flip, rotate, zoom, brightness.

    The same number of draws is taken from ``rng`` whatever the enable
    flags, so toggling one transform does not reshuffle the others.
    """
    hflip = rng.random() < cfg.hflip_prob
    vflip = rng.random() < cfg.vflip_prob
    angle = rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees)
    factor = rng.uniform(*cfg.zoom_range)
    delta = rng.uniform(*cfg.brightness_range)
    out = px
    dtype = px.dtype
    if cfg.flip and hflip:
        out = out[:, ::-1]
    if cfg.flip and vflip:
        out = out[::-1]
    if cfg.rotate and angle != 0.0:
        out = rotate_array(out, angle)
    if cfg.zoom and factor != 1.0:
        out = zoom_array(out, factor)
    if cfg.brightness and delta != 0.0:
        out = np.clip(out + delta, 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=dtype)


def augment(img: FundusImage, cfg: AugmentConfig, rng: np.random.Generator) -> FundusImage:
    out = augment_array(img.to_float().pixels, cfg, rng)
    return img.with_pixels(_as_form(out, img))


def sample_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator keyed by (seed, keys...), e.g. (seed, epoch, sample)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def sample_mixup_lambda(rng: np.random.Generator, alpha: float) -> float:
    if alpha <= 0:
        raise ValueError("mixup alpha must be positive")
    return float(rng.beta(alpha, alpha))


def mixup(x_i, y_i, x_j, y_j, lam: float):
    """Convex combination of two (image, label-distribution) pairs."""
    x_i, x_j = np.asarray(x_i), np.asarray(x_j)
    y_i, y_j = np.asarray(y_i, dtype=np.float64), np.asarray(y_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise ValueError(f"mixup images differ in shape: {x_i.shape} vs {x_j.shape}")
    if y_i.shape != y_j.shape:
        raise ValueError(f"mixup label vectors differ in length: {y_i.shape} vs {y_j.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 1.0:
        return x_i.copy(), y_i.copy()
    if lam == 0.0:
        return x_j.copy(), y_j.copy()
    return lam * x_i + (1.0 - lam) * x_j, lam * y_i + (1.0 - lam) * y_j


__all__ = [
    "AugmentConfig",
    "FundusImage",
    "ImageFormatError",
    "PreprocessConfig",
    "adaptive_gamma",
    "augment",
    "augment_array",
    "circular_crop",
    "clahe",
    "decode",
    "encode",
    "gamma_correct",
    "mixup",
    "preprocess",
    "preprocess_stages",
    "read_image",
    "resize",
    "sample_mixup_lambda",
    "sample_stream",
    "write_image",
]
