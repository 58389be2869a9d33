"""Two-domain synthetic detection data with exact occlusion annotations.

Objects are pedestrian-proportioned filled rectangles on flat, striped, or
noisy backgrounds. The two shipped domain specs are deliberately shifted
(light background/dark objects vs. striped dark background/light objects)
so that sequential training on them degrades the first domain unless the
fine-tune is regularized.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

FORMAT_VERSION = 1
BACKGROUNDS = ("flat", "striped", "noise")
STRIPE_WIDTH = 8
MAX_OCCLUSION = 0.8
MAX_OBJECT_OVERLAP = 0.3
PLACEMENT_ATTEMPTS = 40


class DatasetIOError(RuntimeError):
    """Raised when a dataset directory cannot be read back losslessly."""


@dataclass(frozen=True)
class DomainSpec:
    """Knobs for one synthetic distribution."""

    background: str = "flat"
    background_intensity: tuple[float, float] = (0.7, 0.9)
    object_intensity: tuple[float, float] = (0.1, 0.3)
    object_height: tuple[float, float] = (52.0, 76.0)
    aspect_ratio: float = 0.41
    objects_per_image: tuple[int, int] = (1, 3)
    occluder_probability: float = 0.4
    occlusion_fraction: tuple[float, float] = (0.05, 0.6)
    noise_sigma: float = 0.02
    image_size: int = 128

    def __post_init__(self):
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")
        for name in ("background_intensity", "object_intensity",
                     "object_height", "occlusion_fraction"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} range is not well ordered")
        lo, hi = self.objects_per_image
        if not (0 <= lo <= hi):
            raise ValueError("objects_per_image range is not well ordered")
        if not (0.0 <= self.occlusion_fraction[0]
                and self.occlusion_fraction[1] <= MAX_OCCLUSION):
            raise ValueError(f"occlusion_fraction must stay within [0, {MAX_OCCLUSION}]")
        if not 0.0 <= self.occluder_probability <= 1.0:
            raise ValueError("occluder_probability must be in [0, 1]")
        if self.aspect_ratio <= 0.0:
            raise ValueError("aspect_ratio must be positive")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.image_size < 8:
            raise ValueError("image_size too small")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        kwargs = dict(d)
        for name in ("background_intensity", "object_intensity", "object_height",
                     "occlusion_fraction", "objects_per_image"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        return cls(**kwargs)


@dataclass(frozen=True)
class GroundTruthBox:
    """An annotated object: pixel box plus the rendered occlusion fraction."""

    box: tuple[float, float, float, float]
    occlusion_ratio: float
    height: float = field(init=False)

    def __post_init__(self):
        box = tuple(float(v) for v in self.box)
        x0, y0, x1, y1 = box
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"degenerate box {box}")
        if not 0.0 <= self.occlusion_ratio <= 1.0:
            raise ValueError("occlusion_ratio outside [0, 1]")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "occlusion_ratio", float(self.occlusion_ratio))
        object.__setattr__(self, "height", y1 - y0)


@dataclass
class Dataset:
    """Images with per-image ground-truth boxes and split/domain tags."""

    images: list
    annotations: list
    split: str
    domain_id: str
    spec: Optional[DomainSpec] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if len(self.images) != len(self.annotations):
            raise ValueError("images and annotations must pair up")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")
        for img, anns in zip(self.images, self.annotations):
            h, w = img.shape
            for g in anns:
                x0, y0, x1, y1 = g.box
                if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
                    raise ValueError(f"box {g.box} escapes the image bounds")

    def __len__(self) -> int:
        return len(self.images)


def _render_background(spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    lo, hi = spec.background_intensity
    if spec.background == "flat":
        return np.full((s, s), rng.uniform(lo, hi))
    if spec.background == "striped":
        a, b = rng.uniform(lo, hi), rng.uniform(lo, hi)
        cols = (np.arange(s) // STRIPE_WIDTH) % 2
        return np.where(cols[None, :] == 0, a, b) * np.ones((s, 1))
    return rng.uniform(lo, hi, (s, s))


def _place_objects(spec: DomainSpec, rng: np.random.Generator):
    """Sample integer pixel boxes with bounded pairwise overlap."""
    s = spec.image_size
    lo, hi = spec.objects_per_image
    target = int(rng.integers(lo, hi + 1))
    boxes: list[tuple[int, int, int, int]] = []
    intensities: list[float] = []
    for _ in range(target):
        for _attempt in range(PLACEMENT_ATTEMPTS):
            h = rng.uniform(*spec.object_height)
            w = h * spec.aspect_ratio * rng.uniform(0.9, 1.1)
            h_px = max(2, round(h))
            w_px = max(2, round(w))
            if h_px > s or w_px > s:
                raise ValueError("spec places objects larger than the image")
            x0 = int(rng.integers(0, s - w_px + 1))
            y0 = int(rng.integers(0, s - h_px + 1))
            cand = (x0, y0, x0 + w_px, y0 + h_px)
            if all(_box_iou(cand, b) <= MAX_OBJECT_OVERLAP for b in boxes):
                boxes.append(cand)
                intensities.append(rng.uniform(*spec.object_intensity))
                break
    return boxes, intensities


def _box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _generate_image(spec: DomainSpec, rng: np.random.Generator):
    s = spec.image_size
    img = _render_background(spec, rng).astype(np.float64)
    boxes, intensities = _place_objects(spec, rng)
    for (x0, y0, x1, y1), val in zip(boxes, intensities):
        img[y0:y1, x0:x1] = val

    # One candidate occluder per object: a band over the box bottom, drawn a
    # little wider than the box. Accepted greedily unless it would push any
    # box past the occlusion cap; ratios come from the rendered mask, so the
    # recorded values are pixel-exact.
    lo_bg, hi_bg = spec.background_intensity
    occluded_mask = np.zeros((s, s), dtype=bool)
    for (x0, y0, x1, y1) in boxes:
        wants = rng.uniform() < spec.occluder_probability
        frac = rng.uniform(*spec.occlusion_fraction)
        ext = int(rng.integers(2, 7))
        shade = rng.uniform(lo_bg, hi_bg)
        band_h = int(frac * (y1 - y0))
        if not wants or band_h < 1:
            continue
        ox0, ox1 = max(0, x0 - ext), min(s, x1 + ext)
        oy0 = y1 - band_h
        cand = occluded_mask.copy()
        cand[oy0:y1, ox0:ox1] = True
        ok = True
        for (bx0, by0, bx1, by1) in boxes:
            ratio = cand[by0:by1, bx0:bx1].mean()
            if ratio > MAX_OCCLUSION + 1e-12:
                ok = False
                break
        if not ok:
            continue
        occluded_mask = cand
        img[oy0:y1, ox0:ox1] = shade

    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, (s, s))
    img = np.clip(img, 0.0, 1.0)

    anns = []
    for (x0, y0, x1, y1) in boxes:
        ratio = float(occluded_mask[y0:y1, x0:x1].mean())
        anns.append(GroundTruthBox(box=(x0, y0, x1, y1), occlusion_ratio=ratio))
    return img, anns


def generate_domain(spec: DomainSpec, count: int, seed: int, *,
                    split: str = "train", domain_id: str = "domain") -> Dataset:
    """Deterministic dataset for (spec, count, seed).

    Each image draws from its own RNG stream keyed by (seed, index), so
    image i is the same regardless of count.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    max_h = spec.object_height[1]
    if round(max_h) > spec.image_size or round(max_h * spec.aspect_ratio * 1.1) > spec.image_size:
        raise ValueError("spec places objects larger than the image")
    images, annotations = [], []
    for i in range(count):
        rng = np.random.default_rng((seed, i))
        img, anns = _generate_image(spec, rng)
        images.append(img)
        annotations.append(anns)
    return Dataset(images=images, annotations=annotations, split=split,
                   domain_id=domain_id, spec=spec, seed=seed)


def save_dataset(dataset: Dataset, path) -> None:
    """Write a dataset directory: manifest, one .npy raster per image, and a
    plain-text annotation table. The round-trip is bit-exact."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "count": len(dataset),
        "split": dataset.split,
        "domain_id": dataset.domain_id,
        "seed": dataset.seed,
        "spec": dataset.spec.to_dict() if dataset.spec is not None else None,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    for i, img in enumerate(dataset.images):
        np.save(path / f"img_{i:05d}.npy", np.asarray(img, dtype=np.float64))
    with open(path / "annotations.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "x_min", "y_min", "x_max", "y_max",
                         "occlusion_ratio"])
        for i, anns in enumerate(dataset.annotations):
            for g in anns:
                writer.writerow([i, repr(g.box[0]), repr(g.box[1]),
                                 repr(g.box[2]), repr(g.box[3]),
                                 repr(g.occlusion_ratio)])


def load_dataset(path) -> Dataset:
    """Read a dataset directory back; fails cleanly on any inconsistency."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetIOError(f"no manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as err:
        raise DatasetIOError(f"corrupt manifest: {err}") from err
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetIOError(
            f"unsupported format_version {manifest.get('format_version')!r}")
    count = manifest["count"]
    images = []
    for i in range(count):
        img_path = path / f"img_{i:05d}.npy"
        if not img_path.is_file():
            raise DatasetIOError(f"dataset truncated: missing {img_path.name}")
        try:
            images.append(np.load(img_path))
        except ValueError as err:
            raise DatasetIOError(f"corrupt raster {img_path.name}: {err}") from err
    annotations = [[] for _ in range(count)]
    ann_path = path / "annotations.csv"
    if not ann_path.is_file():
        raise DatasetIOError("dataset truncated: missing annotations.csv")
    with open(ann_path, newline="") as fh:
        reader = csv.DictReader(fh)
        try:
            for row in reader:
                idx = int(row["image_id"])
                if not 0 <= idx < count:
                    raise DatasetIOError(f"annotation references image {idx}")
                annotations[idx].append(GroundTruthBox(
                    box=(float(row["x_min"]), float(row["y_min"]),
                         float(row["x_max"]), float(row["y_max"])),
                    occlusion_ratio=float(row["occlusion_ratio"])))
        except (KeyError, TypeError, ValueError) as err:
            raise DatasetIOError(f"corrupt annotations.csv: {err}") from err
    spec = (DomainSpec.from_dict(manifest["spec"])
            if manifest.get("spec") is not None else None)
    return Dataset(images=images, annotations=annotations,
                   split=manifest["split"], domain_id=manifest["domain_id"],
                   spec=spec, seed=manifest.get("seed"))


def dataset_hash(dataset: Dataset) -> str:
    """sha256 over image bytes and annotation values; the corpus fingerprint."""
    h = hashlib.sha256()
    h.update(f"{dataset.domain_id}|{dataset.split}|{len(dataset)}".encode())
    for img, anns in zip(dataset.images, dataset.annotations):
        arr = np.ascontiguousarray(np.asarray(img, dtype=np.float64))
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
        for g in anns:
            h.update(repr((g.box, g.occlusion_ratio)).encode())
    return h.hexdigest()


# Shipped two-domain benchmark shift: light flat background with dark objects
# versus darker striped background with lighter, larger, more occluded
# objects. The reversed contrast polarity is what makes naive fine-tuning
# forget domain A.
DOMAIN_A = DomainSpec(
    background="flat",
    background_intensity=(0.72, 0.92),
    object_intensity=(0.05, 0.30),
    object_height=(52.0, 78.0),
    aspect_ratio=0.41,
    objects_per_image=(1, 3),
    occluder_probability=0.45,
    occlusion_fraction=(0.05, 0.60),
    noise_sigma=0.02,
    image_size=128,
)

DOMAIN_B = DomainSpec(
    background="striped",
    background_intensity=(0.22, 0.45),
    object_intensity=(0.60, 0.88),
    object_height=(58.0, 88.0),
    aspect_ratio=0.41,
    objects_per_image=(2, 4),
    occluder_probability=0.60,
    occlusion_fraction=(0.10, 0.70),
    noise_sigma=0.02,
    image_size=128,
)
