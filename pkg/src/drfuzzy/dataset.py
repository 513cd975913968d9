"""APTOS-style dataset indexing, stratified splits, class merging,
oversampling and a synthetic fundus generator."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .imaging import FundusImage, read_image, sample_stream

logger = logging.getLogger(__name__)

GRADE_NAMES = ("No DR", "Mild", "Moderate", "Severe", "Proliferative DR")
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """Malformed index, bad label or missing image files."""


class LeakageError(DatasetError):
    """An operation reserved for the training split was applied elsewhere."""


@dataclass(frozen=True)
class ClassMergeMap:
    """Surjective map from raw grades 0-4 to contiguous merged class ids."""

    mapping: tuple[int, ...]
    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.mapping) != 5:
            raise ValueError("a merge map must assign every raw grade 0-4")
        ids = sorted(set(self.mapping))
        if ids != list(range(len(ids))):
            raise ValueError(f"merged ids must be contiguous from 0, got {ids}")
        if len(self.names) != len(ids):
            raise ValueError(f"{len(ids)} merged classes but {len(self.names)} names")

    @property
    def n_classes(self) -> int:
        return len(self.names)

    def __call__(self, grade: int) -> int:
        if not 0 <= grade < len(self.mapping):
            raise DatasetError(f"grade {grade} is not mapped")
        return self.mapping[grade]

    @classmethod
    def identity(cls) -> "ClassMergeMap":
        return cls((0, 1, 2, 3, 4), GRADE_NAMES)

    @classmethod
    def table1(cls) -> "ClassMergeMap":
        """No DR / Mild+Moderate / Severe+Proliferative."""
        return cls((0, 1, 1, 2, 2), ("No DR", "Mild/Moderate DR", "Severe/Proliferative DR"))

    @classmethod
    def by_name(cls, name: str) -> "ClassMergeMap":
        if name in ("5-class", "identity"):
            return cls.identity()
        if name in ("table1-3class", "3-class"):
            return cls.table1()
        raise ValueError(f"unknown class merge {name!r}; use '5-class' or 'table1-3class'")


@dataclass
class LabeledSample:
    id_code: str
    grade: int
    image_ref: Path | FundusImage | None = None
    split: str | None = None
    lesion_boxes: tuple[tuple[int, int, int, int], ...] = ()
    replica: int = 0

    def __post_init__(self):
        if self.grade not in (0, 1, 2, 3, 4):
            raise DatasetError(f"grade must be 0-4, got {self.grade}")
        if self.split is not None and self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")

    def load(self) -> FundusImage:
        if isinstance(self.image_ref, FundusImage):
            return self.image_ref
        if self.image_ref is None:
            raise DatasetError(f"sample {self.id_code} has no image")
        return read_image(self.image_ref)


@dataclass
class DatasetIndex:
    samples: list[LabeledSample] = field(default_factory=list)
    merge_map: ClassMergeMap = field(default_factory=ClassMergeMap.identity)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i) -> LabeledSample:
        return self.samples[i]

    @property
    def grades(self) -> np.ndarray:
        return np.array([s.grade for s in self.samples], dtype=np.int64)

    @property
    def labels(self) -> np.ndarray:
        """Merged class ids."""
        return np.array([self.merge_map(s.grade) for s in self.samples], dtype=np.int64)

    @property
    def n_classes(self) -> int:
        return self.merge_map.n_classes

    @property
    def class_names(self) -> tuple[str, ...]:
        return self.merge_map.names

    @property
    def is_split(self) -> bool:
        return any(s.split is not None for s in self.samples)

    def subset(self, split: str) -> "DatasetIndex":
        return DatasetIndex([s for s in self.samples if s.split == split], self.merge_map)

    def images(self) -> list[FundusImage]:
        return [s.load() for s in self.samples]

    def fingerprint(self) -> str:
        """SHA-256 over ids, grades, splits and image content."""
        h = hashlib.sha256()
        for s in self.samples:
            h.update(f"{s.id_code},{s.grade},{s.split},{s.replica};".encode())
            if isinstance(s.image_ref, FundusImage):
                h.update(np.ascontiguousarray(s.image_ref.to_uint8().pixels).tobytes())
            elif s.image_ref is not None:
                h.update(Path(s.image_ref).read_bytes())
        return h.hexdigest()

    def manifest_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id_code", "diagnosis", "merged_label", "split"])
        for s in self.samples:
            writer.writerow([s.id_code, s.grade, self.merge_map(s.grade), s.split or ""])
        return buf.getvalue()

    def write_manifest(self, path) -> None:
        Path(path).write_text(self.manifest_csv(), encoding="utf-8")


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def load_csv_index(csv_path, image_dir, extensions: Sequence[str] = (".png", ".ppm")) -> DatasetIndex:
    """Read an ``id_code,diagnosis`` CSV; images are ``<image_dir>/<id_code><ext>``.

    Missing images are collected and reported together.
    """
    image_dir = Path(image_dir)
    text = Path(csv_path).read_text(encoding="utf-8-sig")
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DatasetError(f"{csv_path}: empty CSV") from None
    if "id_code" not in header or "diagnosis" not in header:
        raise DatasetError(f"{csv_path}: header must contain id_code and diagnosis, got {header}")
    id_col, dx_col = header.index("id_code"), header.index("diagnosis")
    samples: list[LabeledSample] = []
    missing: list[str] = []
    for row_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DatasetError(f"{csv_path}: row {row_no} has {len(row)} fields, expected {len(header)}")
        id_code = row[id_col].strip()
        try:
            grade = int(row[dx_col].strip())
        except ValueError:
            raise DatasetError(f"{csv_path}: row {row_no}: diagnosis {row[dx_col]!r} is not an integer") from None
        if grade not in (0, 1, 2, 3, 4):
            raise DatasetError(f"{csv_path}: row {row_no}: diagnosis {grade} outside 0-4")
        path = next((image_dir / f"{id_code}{ext}" for ext in extensions if (image_dir / f"{id_code}{ext}").exists()), None)
        if path is None:
            missing.append(f"row {row_no} ({id_code})")
        samples.append(LabeledSample(id_code, grade, path))
    if missing:
        raise DatasetError(f"{len(missing)} image file(s) missing under {image_dir}: " + ", ".join(missing))
    return DatasetIndex(samples)


# ---------------------------------------------------------------------------
# splitting and class handling
# ---------------------------------------------------------------------------

def largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    """Integer allocation of n items proportional to ``fractions``."""
    exact = [n * f for f in fractions]
    counts = [math.floor(e) for e in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(index: DatasetIndex, fractions=(0.70, 0.15, 0.15), seed: int = 0) -> DatasetIndex:
    """Tag every record train/val/test, stratified by raw grade."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    grades = index.grades
    tags: list[str | None] = [None] * len(index)
    for g in sorted(set(grades.tolist())):
        members = np.flatnonzero(grades == g)
        if members.size < 3:
            warnings.warn(f"grade {g} has only {members.size} sample(s); placing all in train", stacklevel=2)
            for i in members:
                tags[i] = "train"
            continue
        rng = sample_stream(seed, g)
        members = members[rng.permutation(members.size)]
        n_train, n_val, _ = largest_remainder(members.size, fractions)
        for pos, i in enumerate(members):
            tags[i] = "train" if pos < n_train else "val" if pos < n_train + n_val else "test"
    samples = [replace(s, split=t) for s, t in zip(index.samples, tags)]
    return DatasetIndex(samples, index.merge_map)


def merge_classes(index: DatasetIndex, merge_map: ClassMergeMap) -> DatasetIndex:
    for s in index.samples:
        merge_map(s.grade)
    return DatasetIndex(list(index.samples), merge_map)


@dataclass
class ClassDistribution:
    names: tuple[str, ...]
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def fractions(self) -> np.ndarray:
        total = self.total
        return self.counts / total if total else np.zeros(len(self.counts))

    def to_text(self, width: int = 40) -> str:
        peak = max(int(self.counts.max()) if len(self.counts) else 0, 1)
        label_w = max((len(n) for n in self.names), default=0)
        lines = []
        for name, c, f in zip(self.names, self.counts, self.fractions):
            bar = "#" * int(round(width * c / peak))
            lines.append(f"{name:<{label_w}} {int(c):>6} {f:6.1%} {bar}")
        lines.append(f"{'Total':<{label_w}} {self.total:>6}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "name", "count", "fraction"])
        for k, (name, c, f) in enumerate(zip(self.names, self.counts, self.fractions)):
            writer.writerow([k, name, int(c), repr(float(f))])
        return buf.getvalue()


def class_distribution(index: DatasetIndex, merged: bool = True) -> ClassDistribution:
    if merged:
        names, labels = index.class_names, index.labels
    else:
        names, labels = GRADE_NAMES, index.grades
    counts = np.bincount(labels, minlength=len(names)) if len(labels) else np.zeros(len(names), dtype=np.int64)
    return ClassDistribution(tuple(names), counts.astype(np.int64))


def oversample(index: DatasetIndex, target="balanced", seed: int = 0, split: str = "train") -> DatasetIndex:
    """Replicate minority-class training records until ``target`` is met.

    ``target`` is ``"balanced"`` (every class raised to the largest count)
    or a per-class sequence of counts over merged labels. Records of other
    splits pass through untouched.
    """
    if split != "train":
        raise LeakageError(f"oversampling the {split!r} split would leak duplicates into evaluation")
    tagged = index.is_split
    train_pos = [i for i, s in enumerate(index.samples) if (s.split == "train" if tagged else True)]
    labels = index.labels
    train_labels = labels[train_pos]
    counts = np.bincount(train_labels, minlength=index.n_classes)
    if isinstance(target, str):
        if target != "balanced":
            raise ValueError(f"unknown oversampling target {target!r}")
        goal = np.full(index.n_classes, counts.max())
    else:
        goal = np.asarray(target, dtype=np.int64)
        if goal.shape != counts.shape:
            raise ValueError(f"target needs {index.n_classes} counts, got {len(goal)}")
        if np.any(goal < counts):
            raise ValueError("oversampling targets cannot be below the current counts")
    extra: list[LabeledSample] = []
    for k in range(index.n_classes):
        deficit = int(goal[k] - counts[k])
        if deficit <= 0:
            continue
        pool = [train_pos[i] for i in np.flatnonzero(train_labels == k)]
        if not pool:
            raise DatasetError(f"class {k} has no training samples to replicate")
        rng = sample_stream(seed, 7919, k)
        full, rest = divmod(deficit, len(pool))
        picks = [p for _ in range(full) for p in pool] + [pool[i] for i in np.sort(rng.choice(len(pool), rest, replace=False))]
        seen: dict[int, int] = {}
        for p in picks:
            seen[p] = seen.get(p, 0) + 1
            extra.append(replace(index.samples[p], replica=seen[p], split="train" if tagged else None))
    return DatasetIndex(list(index.samples) + extra, index.merge_map)


# ---------------------------------------------------------------------------
# synthetic fundus generator
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    size: int = 64
    counts: tuple[int, ...] = (20, 20, 20, 20, 20)
    seed: int = 0
    lesions_per_grade: int = 3
    lesion_radius: tuple[float, float] = (1.5, 2.5)
    lesion_contrast: float = 0.45

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        if len(self.counts) != 5 or any(c < 0 for c in self.counts):
            raise ValueError("counts must be five non-negative integers, one per grade")
        if self.size < 32:
            raise ValueError("synthetic images must be at least 32 pixels")
        if self.lesions_per_grade < 0:
            raise ValueError("lesions_per_grade must be non-negative")

    def lesion_count(self, grade: int) -> int:
        return self.lesions_per_grade * grade


def _soft_disc(yy, xx, cy, cx, r):
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return np.clip(r + 0.5 - d, 0.0, 1.0)


def _render_fundus(spec: SyntheticSpec, grade: int, rng: np.random.Generator):
    n = spec.size
    yy, xx = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    cy = (n - 1) / 2 + rng.uniform(-0.02, 0.02) * n
    cx = (n - 1) / 2 + rng.uniform(-0.02, 0.02) * n
    radius = n * rng.uniform(0.42, 0.46)
    disc = _soft_disc(yy, xx, cy, cx, radius)
    rr = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) / radius
    base_color = np.array([0.72, 0.33, 0.14]) * rng.uniform(0.9, 1.1)
    shade = 1.0 - 0.35 * np.clip(rr, 0, 1) ** 2
    img = np.zeros((n, n, 3)) + 0.02
    img = img * (1 - disc[..., None]) + (base_color * shade[..., None]) * disc[..., None]

    # optic disc on a random side
    side = rng.choice([-1.0, 1.0])
    od_y = cy + rng.uniform(-0.1, 0.1) * radius
    od_x = cx + side * radius * rng.uniform(0.45, 0.6)
    od = _soft_disc(yy, xx, od_y, od_x, radius * 0.16) * disc
    img = img * (1 - 0.8 * od[..., None]) + 0.8 * od[..., None] * np.array([0.95, 0.85, 0.55])

    # vessels: quadratic curves leaving the optic disc
    vessel = np.zeros((n, n))
    for _ in range(4):
        ang = rng.uniform(0, 2 * np.pi)
        end = np.array([cy + 0.85 * radius * np.sin(ang), cx + 0.85 * radius * np.cos(ang)])
        start = np.array([od_y, od_x])
        ctrl = (start + end) / 2 + rng.normal(0, 0.25 * radius, size=2)
        t = np.linspace(0, 1, 2 * n)[:, None]
        pts = (1 - t) ** 2 * start + 2 * (1 - t) * t * ctrl + t ** 2 * end
        d = np.sqrt((yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2).min(axis=-1)
        vessel = np.maximum(vessel, np.clip(1.1 - d, 0.0, 1.0))
    vessel *= disc
    img = img * (1 - 0.55 * vessel[..., None]) + 0.55 * vessel[..., None] * np.array([0.45, 0.08, 0.06])

    # lesions: alternate bright (exudate-like) and dark (hemorrhage-like)
    boxes = []
    centres: list[tuple[float, float, float]] = []
    for k in range(spec.lesion_count(grade)):
        r = rng.uniform(*spec.lesion_radius)
        for _ in range(200):
            dist = rng.uniform(0, radius - r * math.sqrt(2) - 2.0)
            ang = rng.uniform(0, 2 * np.pi)
            ly, lx = cy + dist * np.sin(ang), cx + dist * np.cos(ang)
            clear_od = math.hypot(ly - od_y, lx - od_x) > radius * 0.16 + r + 1.0
            clear_others = all(math.hypot(ly - y, lx - x) > r + q + 1.0 for y, x, q in centres)
            if clear_od and clear_others:
                break
        centres.append((ly, lx, r))
        blob = _soft_disc(yy, xx, ly, lx, r)
        if k % 2 == 0:
            color = np.array([1.0, 0.92, 0.45])
        else:
            color = np.array([0.18, 0.02, 0.02])
        a = min(1.0, 0.55 + spec.lesion_contrast) * blob
        img = img * (1 - a[..., None]) + a[..., None] * color
        y0, x0 = int(math.floor(ly - r - 0.5)), int(math.floor(lx - r - 0.5))
        y1, x1 = int(math.ceil(ly + r + 0.5)), int(math.ceil(lx + r + 0.5))
        boxes.append((y0, x0, y1, x1))

    img = img + rng.normal(0, 0.01, size=img.shape) * disc[..., None]
    return np.clip(img, 0.0, 1.0), tuple(boxes), (cy, cx, radius)


def synthesize_fundus(spec: SyntheticSpec, return_geometry: bool = False):
    """Render a deterministic synthetic fundus dataset.

    Each image has a dark background, a bright retina disc, an optic disc
    and curved vessels. Grade g adds ``spec.lesion_count(g)`` lesion blobs
    whose bounding boxes (y0, x0, y1, x1, end-exclusive) are recorded.
    """
    samples = []
    geometry = []
    for grade, count in enumerate(spec.counts):
        for i in range(count):
            rng = sample_stream(spec.seed, grade, i)
            px, boxes, geo = _render_fundus(spec, grade, rng)
            sid = f"syn{grade}_{i:05d}"
            img = FundusImage(np.clip(np.floor(px * 255 + 0.5), 0, 255).astype(np.uint8), sid)
            samples.append(LabeledSample(sid, grade, img, lesion_boxes=boxes))
            geometry.append(geo)
    index = DatasetIndex(samples)
    if return_geometry:
        return index, geometry
    return index


def toy_three_class_spec(n_per_class: int = 200, size: int = 64, seed: int = 0) -> tuple[SyntheticSpec, ClassMergeMap]:
    """Balanced 3-class toy set: grades 0, 2 and 4 merged by the Table I map."""
    spec = SyntheticSpec(size=size, counts=(n_per_class, 0, n_per_class, 0, n_per_class), seed=seed)
    return spec, ClassMergeMap.table1()
