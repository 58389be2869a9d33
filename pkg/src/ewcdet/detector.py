"""Single-stage anchor-based detector with exact, hand-written gradients.

The network is deliberately small: three 3x3 conv stages with average
pooling down to the anchor grid, then 1x1 classification and regression
heads. All parameters live in a single flat float64 vector with a named
slice layout, so optimizers and regularizers can treat the model as a
plain k-vector. Images are grayscale grids with intensities in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import netops
from .netops import sigmoid

# decode caps |t_w|, |t_h|; exp(10) times an anchor side is already absurd,
# and the cap keeps runaway regression heads from producing inf boxes.
LOG_EXTENT_CLAMP = 10.0


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor grid geometry plus inference thresholds."""

    image_size: int = 128
    grid_stride: int = 8
    anchor_heights: tuple[float, ...] = (48.0, 72.0)
    anchor_aspect_ratios: tuple[float, ...] = (0.41,)
    score_threshold: float = 0.3
    nms_iou_threshold: float = 0.5
    max_detections: int = 64

    def __post_init__(self):
        object.__setattr__(self, "anchor_heights",
                           tuple(float(h) for h in self.anchor_heights))
        object.__setattr__(self, "anchor_aspect_ratios",
                           tuple(float(r) for r in self.anchor_aspect_ratios))
        if self.image_size <= 0 or self.grid_stride <= 0:
            raise ValueError("image_size and grid_stride must be positive")
        if self.image_size % self.grid_stride != 0:
            raise ValueError("image_size must be divisible by grid_stride")
        if not self.anchor_heights or any(h <= 0 for h in self.anchor_heights):
            raise ValueError("anchor heights must be positive")
        if not self.anchor_aspect_ratios or any(r <= 0 for r in self.anchor_aspect_ratios):
            raise ValueError("anchor aspect ratios must be positive")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("score_threshold must be in [0, 1]")
        if not 0.0 <= self.nms_iou_threshold <= 1.0:
            raise ValueError("nms_iou_threshold must be in [0, 1]")
        if self.max_detections < 1:
            raise ValueError("max_detections must be >= 1")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.grid_stride

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_heights) * len(self.anchor_aspect_ratios)

    @property
    def total_anchors(self) -> int:
        return self.grid_size * self.grid_size * self.anchors_per_cell


@dataclass(frozen=True)
class ParamSlice:
    """One named, contiguous piece of the flat parameter vector."""

    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(math.prod(self.shape))


@dataclass(frozen=True)
class Architecture:
    """Backbone/head shapes; pooling factors come from the anchor grid stride."""

    in_channels: int = 1
    channels: tuple[int, ...] = (8, 16, 16)
    anchors_per_cell: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.in_channels != 1:
            raise ValueError("detector takes single-channel grayscale input")
        if len(self.channels) != 3 or any(c < 1 for c in self.channels):
            raise ValueError("backbone uses exactly three conv stages with >=1 channels")
        if self.anchors_per_cell < 1:
            raise ValueError("anchors_per_cell must be >= 1")

    @classmethod
    def for_config(cls, config: AnchorConfig, channels=(8, 16, 16)) -> "Architecture":
        return cls(in_channels=1, channels=tuple(channels),
                   anchors_per_cell=config.anchors_per_cell)

    def layout(self) -> tuple[ParamSlice, ...]:
        c1, c2, c3 = self.channels
        a = self.anchors_per_cell
        shapes = [
            ("conv1.weight", (c1, self.in_channels, 3, 3)),
            ("conv1.bias", (c1,)),
            ("conv2.weight", (c2, c1, 3, 3)),
            ("conv2.bias", (c2,)),
            ("conv3.weight", (c3, c2, 3, 3)),
            ("conv3.bias", (c3,)),
            ("cls.weight", (a, c3)),
            ("cls.bias", (a,)),
            ("reg.weight", (4 * a, c3)),
            ("reg.bias", (4 * a,)),
        ]
        slices = []
        offset = 0
        for name, shape in shapes:
            slices.append(ParamSlice(name, offset, shape))
            offset += slices[-1].size
        return tuple(slices)

    def to_dict(self) -> dict:
        return {"in_channels": self.in_channels,
                "channels": list(self.channels),
                "anchors_per_cell": self.anchors_per_cell}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(in_channels=int(d["in_channels"]),
                   channels=tuple(int(c) for c in d["channels"]),
                   anchors_per_cell=int(d["anchors_per_cell"]))


@dataclass(frozen=True)
class DetectorParams:
    """Flat parameter vector theta plus the named-slice layout covering it."""

    values: np.ndarray
    layout: tuple[ParamSlice, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True, order="C")
        if values.ndim != 1:
            raise ValueError("parameter vector must be one-dimensional")
        offset = 0
        for sl in self.layout:
            if sl.offset != offset:
                raise ValueError(f"layout slice {sl.name} is not contiguous")
            offset += sl.size
        if offset != values.size:
            raise ValueError("layout does not cover the parameter vector exactly")
        if not np.isfinite(values).all():
            raise ValueError("parameter vector contains non-finite values")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple(self.layout))

    @property
    def k(self) -> int:
        return self.values.size

    def get(self, name: str) -> np.ndarray:
        for sl in self.layout:
            if sl.name == name:
                return self.values[sl.offset:sl.offset + sl.size].reshape(sl.shape)
        raise KeyError(name)

    def with_values(self, values: np.ndarray) -> "DetectorParams":
        return DetectorParams(values, self.layout)


@dataclass(frozen=True)
class RawPrediction:
    """Per-anchor head outputs in anchor enumeration order."""

    logits: np.ndarray   # (n_anchors,)
    deltas: np.ndarray   # (n_anchors, 4) rows (t_x, t_y, t_w, t_h)


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    score: float

    def __post_init__(self):
        box = tuple(float(v) for v in self.box)
        x0, y0, x1, y1 = box
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"degenerate box {box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "score", float(self.score))


def generate_anchors(config: AnchorConfig) -> np.ndarray:
    """Enumerate anchor boxes as an (N, 4) float64 array of (x0, y0, x1, y1).

    Order: row-major over grid cells, then the heights x ratios product
    within each cell. The anchor for cell (r, c) is centered at
    ((c + 0.5) * stride, (r + 0.5) * stride) with height h and width h * ratio.
    """
    g, s = config.grid_size, config.grid_stride
    boxes = np.empty((config.total_anchors, 4), dtype=np.float64)
    i = 0
    for r in range(g):
        cy = (r + 0.5) * s
        for c in range(g):
            cx = (c + 0.5) * s
            for h in config.anchor_heights:
                for ratio in config.anchor_aspect_ratios:
                    w = h * ratio
                    boxes[i] = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
                    i += 1
    return boxes


@lru_cache(maxsize=16)
def _anchors_cached(config: AnchorConfig) -> np.ndarray:
    boxes = generate_anchors(config)
    boxes.flags.writeable = False
    return boxes


def iou(box_a, box_b) -> float:
    """Intersection-over-union of two (x0, y0, x1, y1) boxes."""
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return float(inter / union) if union > 0.0 else 0.0


def pairwise_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """IoU matrix of shape (len(a), len(b))."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    iw = (np.minimum(a[:, None, 2], b[None, :, 2])
          - np.maximum(a[:, None, 0], b[None, :, 0]))
    ih = (np.minimum(a[:, None, 3], b[None, :, 3])
          - np.maximum(a[:, None, 1], b[None, :, 1]))
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Boxes -> (t_x, t_y, t_w, t_h) offsets relative to anchors."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    if boxes.shape != anchors.shape:
        raise ValueError("boxes and anchors must have equal counts")
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchors must have positive extent")
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    if np.any(bw <= 0) or np.any(bh <= 0):
        raise ValueError("boxes must have positive extent")
    t = np.empty_like(boxes)
    t[:, 0] = ((boxes[:, 0] + boxes[:, 2]) - (anchors[:, 0] + anchors[:, 2])) / 2 / aw
    t[:, 1] = ((boxes[:, 1] + boxes[:, 3]) - (anchors[:, 1] + anchors[:, 3])) / 2 / ah
    t[:, 2] = np.log(bw / aw)
    t[:, 3] = np.log(bh / ah)
    return t


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Offsets -> absolute boxes; inverse of encode_boxes.

    center = anchor center + t * anchor extent, extent = anchor extent
    * exp(t); log extents are clamped to +-LOG_EXTENT_CLAMP.
    """
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    if deltas.shape != anchors.shape:
        raise ValueError("deltas and anchors must have equal counts")
    if not np.isfinite(deltas).all():
        raise ValueError("non-finite deltas")
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = (anchors[:, 0] + anchors[:, 2]) / 2
    acy = (anchors[:, 1] + anchors[:, 3]) / 2
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(np.clip(deltas[:, 2], -LOG_EXTENT_CLAMP, LOG_EXTENT_CLAMP))
    h = ah * np.exp(np.clip(deltas[:, 3], -LOG_EXTENT_CLAMP, LOG_EXTENT_CLAMP))
    out = np.empty_like(deltas)
    out[:, 0] = cx - w / 2
    out[:, 1] = cy - h / 2
    out[:, 2] = cx + w / 2
    out[:, 3] = cy + h / 2
    return out


def init_params(seed: int, arch: Architecture) -> DetectorParams:
    """Seeded init: zero-mean normals scaled by fan-in for weights, zero biases.

    Conv stages use sqrt(2/fan_in) (rectifier gain), heads sqrt(1/fan_in).
    """
    rng = np.random.default_rng(seed)
    layout = arch.layout()
    values = np.zeros(sum(sl.size for sl in layout), dtype=np.float64)
    for sl in layout:
        if sl.name.endswith(".bias"):
            continue
        fan_in = math.prod(sl.shape[1:])
        gain = 2.0 if sl.name.startswith("conv") else 1.0
        std = math.sqrt(gain / fan_in)
        values[sl.offset:sl.offset + sl.size] = rng.normal(0.0, std, sl.size)
    return DetectorParams(values, layout)


def _pool_factors(stride: int) -> tuple[int, int, int]:
    """Split the grid stride into three pooling factors, largest last."""
    m = stride.bit_length() - 1
    if stride != 1 << m:
        raise ValueError("grid_stride must be a power of two for this backbone")
    base, rem = divmod(m, 3)
    exps = [base, base, base]
    for i in range(rem):
        exps[2 - i] += 1
    return tuple(1 << e for e in exps)


def _arch_from(params: DetectorParams, config: AnchorConfig) -> Architecture:
    shapes = {sl.name: sl.shape for sl in params.layout}
    try:
        channels = tuple(shapes[f"conv{i}.weight"][0] for i in (1, 2, 3))
        in_channels = shapes["conv1.weight"][1]
        apc = shapes["cls.weight"][0]
    except KeyError as err:
        raise ValueError(f"parameter layout is missing slice {err}") from err
    if apc != config.anchors_per_cell:
        raise ValueError(
            f"params built for {apc} anchors per cell, config has {config.anchors_per_cell}")
    return Architecture(in_channels=in_channels, channels=channels, anchors_per_cell=apc)


def forward_cached(params: DetectorParams, image: np.ndarray, config: AnchorConfig):
    """Forward pass that keeps every intermediate needed for backprop.

    Returns (RawPrediction, cache); feed the cache to backward_params.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (config.image_size, config.image_size):
        raise ValueError(
            f"image shape {image.shape} does not match image_size {config.image_size}")
    arch = _arch_from(params, config)
    pools = _pool_factors(config.grid_stride)
    x = (image - 0.5)[None, :, :]  # center intensities around 0
    stage_caches = []
    for i, p in zip((1, 2, 3), pools):
        w = params.get(f"conv{i}.weight")
        b = params.get(f"conv{i}.bias")
        z, conv_cache = netops.conv3x3_forward(x, w, b)
        a = netops.relu_forward(z)
        x, pool_cache = netops.avgpool_forward(a, p)
        stage_caches.append((conv_cache, z, pool_cache))
    g = config.grid_size
    fm = x.reshape(arch.channels[-1], g * g)
    wc, bc = params.get("cls.weight"), params.get("cls.bias")
    wr, br = params.get("reg.weight"), params.get("reg.bias")
    logit_map = wc @ fm + bc[:, None]          # (apc, g*g)
    delta_map = wr @ fm + br[:, None]          # (4*apc, g*g)
    apc = arch.anchors_per_cell
    logits = np.ascontiguousarray(logit_map.T).reshape(-1)
    deltas = np.ascontiguousarray(delta_map.T).reshape(g * g * apc, 4)
    pred = RawPrediction(logits=logits, deltas=deltas)
    cache = (stage_caches, fm, arch, g)
    return pred, cache


def forward(params: DetectorParams, image: np.ndarray, config: AnchorConfig) -> RawPrediction:
    """Pure forward inference: one logit and one delta 4-vector per anchor."""
    pred, _ = forward_cached(params, image, config)
    return pred


def backward_params(params: DetectorParams, cache, dlogits: np.ndarray,
                    ddeltas: np.ndarray) -> np.ndarray:
    """Backpropagate head gradients into a flat gradient over params.values."""
    stage_caches, fm, arch, g = cache
    apc = arch.anchors_per_cell
    dlog_map = np.ascontiguousarray(dlogits.reshape(g * g, apc).T)
    ddel_map = np.ascontiguousarray(ddeltas.reshape(g * g, 4 * apc).T)
    wc = params.get("cls.weight")
    wr = params.get("reg.weight")
    grads = {
        "cls.weight": dlog_map @ fm.T,
        "cls.bias": dlog_map.sum(axis=1),
        "reg.weight": ddel_map @ fm.T,
        "reg.bias": ddel_map.sum(axis=1),
    }
    dfm = wc.T @ dlog_map + wr.T @ ddel_map
    dx = dfm.reshape(arch.channels[-1], g, g)
    for i in (3, 2, 1):
        conv_cache, z, pool_cache = stage_caches[i - 1]
        da = netops.avgpool_backward(dx, pool_cache)
        dz = netops.relu_backward(da, z)
        dx, dw, db = netops.conv3x3_backward(dz, conv_cache)
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db
    flat = np.empty(params.k, dtype=np.float64)
    for sl in params.layout:
        flat[sl.offset:sl.offset + sl.size] = grads[sl.name].reshape(-1)
    return flat


def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy descending-score suppression.

    A detection is removed iff its IoU with an already-kept detection
    exceeds the threshold. Equal scores keep the earlier list entry first
    (anchor order, when the list comes from detect), so the result is
    deterministic. Output is sorted by descending score.
    """
    if not detections:
        return []
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].score, i))
    boxes = np.asarray([d.box for d in detections], dtype=np.float64)
    kept: list[int] = []
    for i in order:
        if kept:
            ious = pairwise_iou(boxes[i:i + 1], boxes[kept])[0]
            if np.any(ious > iou_threshold):
                continue
        kept.append(i)
    return [detections[i] for i in kept]


def detect(params: DetectorParams, image: np.ndarray,
           config: AnchorConfig) -> list[Detection]:
    """Full inference: score anchors, decode survivors, suppress overlaps.

    Anchors whose sigmoid score exceeds config.score_threshold are decoded
    and NMS-ed; at most config.max_detections survive.
    """
    pred = forward(params, image, config)
    scores = sigmoid(pred.logits)
    keep = scores > config.score_threshold
    if not keep.any():
        return []
    anchors = _anchors_cached(config)
    boxes = decode_boxes(pred.deltas[keep], anchors[keep])
    dets = [Detection(box=tuple(b), score=float(s))
            for b, s in zip(boxes, scores[keep])]
    return nms(dets, config.nms_iou_threshold)[:config.max_detections]
