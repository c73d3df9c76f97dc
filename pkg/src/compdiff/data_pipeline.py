"""Self-supervised training data: synthetic sources, augmentation, four-task tuples.

Images inside the pipeline are float64 numpy arrays ``[3,H,W]`` in [0, 1];
masks are boolean ``[H,W]``. Conversion to the model's [-1, 1] range happens
at the PNG/model boundary.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from matplotlib.path import Path as PolyPath
from PIL import Image
from scipy.ndimage import correlate

from .errors import GeometryError, ValidationError
from .generator import ALL_INDICATORS, BoundingBox, Indicator
from .numerics import Rng, resize_bilinear

MIN_AREA = 0.02
MAX_AREA = 0.80
JITTER_RANGE = (0.8, 1.2)
HUE_RANGE = (-0.05, 0.05)
FLIP_PROB = 0.2
MAX_ROTATION = 20.0
CORNER_JITTER = 0.1
BLUR_PROB = 0.3
BLUR_SIGMA = (0.5, 1.5)
BLUR_KERNEL = 5
FILL_VALUE = 0.5
GEOMETRY_RETRIES = 10


@dataclass
class SourceRecord:
    image: np.ndarray
    box: BoundingBox
    object_mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        _, h, w = self.image.shape
        r0, r1, c0, c1 = self.box.to_pixels(h, w)
        outside = self.object_mask.copy()
        outside[r0:r1, c0:c1] = False
        if outside.any():
            raise ValidationError("object mask extends outside its box")


@dataclass
class TrainingTuple:
    I_b: np.ndarray
    I_f: np.ndarray
    B: BoundingBox
    M: np.ndarray
    S: Indicator
    I_c: np.ndarray
    fg_mask: np.ndarray
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Resizing helpers
# ---------------------------------------------------------------------------


def resize_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return resize_bilinear(torch.from_numpy(np.ascontiguousarray(img)), size).numpy()


def _nearest_index(n_out: int, n_in: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def resize_nearest(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes (pixel-centre mapping)."""
    ri = _nearest_index(size[0], arr.shape[-2])
    ci = _nearest_index(size[1], arr.shape[-1])
    return arr[..., ri[:, None], ci[None, :]]


# ---------------------------------------------------------------------------
# Synthetic sources
# ---------------------------------------------------------------------------


def filter_box(record, min_area: float = MIN_AREA, max_area: float = MAX_AREA) -> bool:
    """True iff the box covers between ``min_area`` and ``max_area`` of the image (inclusive)."""
    if isinstance(record, SourceRecord):
        frac = record.box.area
    elif isinstance(record, BoundingBox):
        frac = record.area
    else:
        frac = float(record)
    return min_area <= frac <= max_area


def _sample_pixel_box(rng: Rng, h: int, w: int, min_area: float, max_area: float) -> tuple[int, int, int, int]:
    while True:
        frac = rng.uniform(min_area, max_area)
        aspect = math.exp(rng.uniform(-0.5, 0.5))
        bw = int(np.clip(round(math.sqrt(frac * h * w * aspect)), 2, w))
        bh = int(np.clip(round(frac * h * w / bw), 2, h))
        if min_area <= bw * bh / (h * w) <= max_area:
            break
    r0 = int(rng.integers(0, h - bh + 1))
    c0 = int(rng.integers(0, w - bw + 1))
    return r0, r0 + bh, c0, c0 + bw


def _render_background(rng: Rng, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    yy = (yy + 0.5) / h
    xx = (xx + 0.5) / w
    c1, c2 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    theta = rng.uniform(0, 2 * math.pi)
    ramp = (xx * math.cos(theta) + yy * math.sin(theta))
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
    freq = rng.uniform(2, 8, 2)
    tex = 0.06 * np.sin(2 * math.pi * (freq[0] * xx + freq[1] * yy) + rng.uniform(0, 2 * math.pi))
    img = c1[:, None, None] * (1 - ramp) + c2[:, None, None] * ramp + tex
    return np.clip(img, 0.0, 1.0)


def _shape_mask(rng: Rng, h: int, w: int, r0: int, r1: int, c0: int, c1: int) -> tuple[np.ndarray, str]:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    cy, cx = (r0 + r1) / 2, (c0 + c1) / 2
    ry, rx = (r1 - r0) / 2, (c1 - c0) / 2
    kind = ("ellipse", "rectangle", "polygon")[int(rng.integers(0, 3))]
    if kind == "ellipse":
        mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    elif kind == "rectangle":
        ix, iy = rng.uniform(0.0, 0.15, 2)
        mask = (np.abs(xx - cx) <= rx * (1 - ix)) & (np.abs(yy - cy) <= ry * (1 - iy))
    else:
        k = int(rng.integers(5, 9))
        ang = np.sort(rng.uniform(0, 2 * math.pi, k))
        rad = rng.uniform(0.7, 1.0, k)
        verts = np.stack([cx + rx * rad * np.cos(ang), cy + ry * rad * np.sin(ang)], axis=1)
        inside = PolyPath(verts).contains_points(np.stack([xx.ravel(), yy.ravel()], axis=1))
        mask = inside.reshape(h, w)
    box_only = np.zeros((h, w), dtype=bool)
    box_only[r0:r1, c0:c1] = True
    mask &= box_only
    if not mask.any():
        mask[int(cy), int(cx)] = True
    return mask, kind


def generate_synthetic_source(rng: Rng, H: int = 64, W: int = 64, min_area: float = MIN_AREA,
                              max_area: float = MAX_AREA) -> SourceRecord:
    """Gradient/texture background with one coloured, shaded shape and its exact mask."""
    img = _render_background(rng.substream("bg"), H, W)
    r0, r1, c0, c1 = _sample_pixel_box(rng.substream("box"), H, W, min_area, max_area)
    mask, kind = _shape_mask(rng.substream("shape"), H, W, r0, r1, c0, c1)
    srng = rng.substream("paint")
    base = srng.uniform(0.0, 1.0, 3)
    yy, xx = np.mgrid[0:H, 0:W]
    u = (xx - c0 + 0.5) / max(c1 - c0, 1)
    v = (yy - r0 + 0.5) / max(r1 - r0, 1)
    shade = 0.75 + 0.35 * u - 0.1 * v
    stripes = 0.08 * np.sign(np.sin(2 * math.pi * srng.uniform(1.5, 3.5) * (u + 0.3 * v)))
    obj = np.clip(base[:, None, None] * shade + stripes, 0.0, 1.0)
    img = np.where(mask[None], obj, img)
    box = BoundingBox.from_pixels(r0, r1, c0, c1, H, W)
    return SourceRecord(img, box, mask, {"shape": kind})


def load_source_record(image_path: str | Path, box: BoundingBox, mask_path: str | Path) -> SourceRecord:
    """External (image, box, mask) record; images become [0, 1] float arrays."""
    img = np.asarray(Image.open(image_path).convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0
    mask = np.asarray(Image.open(mask_path).convert("L")) >= 128
    return SourceRecord(img, box, mask)


# ---------------------------------------------------------------------------
# Illumination augmentation
# ---------------------------------------------------------------------------

JITTER_OPS = ("brightness", "contrast", "saturation", "hue")


@dataclass(frozen=True)
class JitterParams:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    order: tuple[str, ...] = JITTER_OPS

    @classmethod
    def identity(cls) -> "JitterParams":
        return cls()


def sample_jitter(rng: Rng) -> JitterParams:
    b, c, s = rng.uniform(*JITTER_RANGE, 3)
    hue = rng.uniform(*HUE_RANGE)
    order = tuple(JITTER_OPS[i] for i in rng.permutation(4))
    return JitterParams(float(b), float(c), float(s), float(hue), order)


def _gray(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def apply_jitter(img: np.ndarray, params: JitterParams) -> np.ndarray:
    """Per-pixel colour jitter; contrast pivots on mid-grey so the op stays pointwise."""
    out = img
    for op in params.order:
        if op == "brightness" and params.brightness != 1.0:
            out = out * params.brightness
        elif op == "contrast" and params.contrast != 1.0:
            out = (out - 0.5) * params.contrast + 0.5
        elif op == "saturation" and params.saturation != 1.0:
            g = _gray(out)[None]
            out = g + params.saturation * (out - g)
        elif op == "hue" and params.hue != 0.0:
            hsv = rgb_to_hsv(np.clip(out, 0, 1).transpose(1, 2, 0))
            hsv[..., 0] = np.mod(hsv[..., 0] + params.hue, 1.0)
            out = hsv_to_rgb(hsv).transpose(2, 0, 1)
        out = np.clip(out, 0.0, 1.0)
    return np.array(out, dtype=np.float64, copy=True)


def color_jitter(image: np.ndarray, rng: Rng) -> np.ndarray:
    return apply_jitter(image, sample_jitter(rng))


# ---------------------------------------------------------------------------
# Composite augmentation: object-preserving random crop + jitter
# ---------------------------------------------------------------------------


def sample_crop_window(rng: Rng, h: int, w: int, r0: int, r1: int, c0: int, c1: int) -> tuple[int, int, int, int]:
    """Integer window ``(top, left, height, width)`` containing rows r0:r1 and cols c0:c1."""
    ch = int(rng.integers(r1 - r0, h + 1))
    cw = int(rng.integers(c1 - c0, w + 1))
    top = int(rng.integers(max(0, r1 - ch), min(r0, h - ch) + 1))
    left = int(rng.integers(max(0, c1 - cw), min(c0, w - cw) + 1))
    return top, left, ch, cw


def augment_composite(image: np.ndarray, box: BoundingBox, rng: Rng, mask: np.ndarray | None = None):
    """Random crop that keeps the box, resized back to full size, then colour jitter.

    Returns ``(I_c^u, B, info)``; ``info`` holds the window, jitter parameters and
    the object mask carried into the crop frame.
    """
    _, h, w = image.shape
    r0, r1, c0, c1 = box.to_pixels(h, w)
    top, left, ch, cw = sample_crop_window(rng.substream("crop"), h, w, r0, r1, c0, c1)
    crop = image[:, top:top + ch, left:left + cw]
    crop = resize_image(crop, (h, w))
    new_box = BoundingBox((c0 - left) / cw, (r0 - top) / ch, (c1 - left) / cw, (r1 - top) / ch)
    jitter = sample_jitter(rng.substream("jitter"))
    out = apply_jitter(crop, jitter)
    info = {"window": (top, left, ch, cw), "jitter": jitter}
    if mask is not None:
        info["mask"] = resize_nearest(mask[top:top + ch, left:left + cw], (h, w))
    return out, new_box, info


def uncrop_box(box: BoundingBox, window: tuple[int, int, int, int], h: int, w: int) -> BoundingBox:
    top, left, ch, cw = window
    return BoundingBox((left + box.x0 * cw) / w, (top + box.y0 * ch) / h,
                       (left + box.x1 * cw) / w, (top + box.y1 * ch) / h)


# ---------------------------------------------------------------------------
# Foreground augmentation: background swap, jitter, object-only geometry, blur
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeometryParams:
    flip: bool = False
    angle: float = 0.0
    corners: tuple[tuple[float, float], ...] = ((0.0, 0.0),) * 4
    blur: bool = False
    sigma: float = 0.0

    @property
    def is_identity_warp(self) -> bool:
        return not self.flip and self.angle == 0.0 and all(c == (0.0, 0.0) for c in self.corners)


def sample_geometry(rng: Rng) -> GeometryParams:
    flip = bool(rng.random() < FLIP_PROB)
    angle = float(rng.uniform(-MAX_ROTATION, MAX_ROTATION))
    corners = tuple((float(a), float(b)) for a, b in rng.uniform(-CORNER_JITTER, CORNER_JITTER, (4, 2)))
    blur = bool(rng.random() < BLUR_PROB)
    sigma = float(rng.uniform(*BLUR_SIGMA))
    return GeometryParams(flip, angle, corners, blur, sigma if blur else 0.0)


def homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 projective map sending the four ``src`` points to ``dst``."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs += [u, v]
    sol = np.linalg.solve(np.asarray(rows, dtype=np.float64), np.asarray(rhs, dtype=np.float64))
    return np.append(sol, 1.0).reshape(3, 3)


def geometry_homography(params: GeometryParams, size: int) -> np.ndarray:
    """Forward map (flip, rotate about centre, perturb corners) on a ``size`` square frame."""
    s = float(size)
    src = np.array([[0, 0], [s, 0], [s, s], [0, s]], dtype=np.float64)
    pts = src.copy()
    if params.flip:
        pts[:, 0] = s - pts[:, 0]
    a = math.radians(params.angle)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    pts = (pts - s / 2) @ rot.T + s / 2
    pts = pts + np.asarray(params.corners) * s
    return homography_from_points(src, pts)


def warp_object(layer: np.ndarray, mask: np.ndarray, params: GeometryParams) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour inverse warp of an object layer and its mask."""
    if params.is_identity_warp:
        return layer.copy(), mask.copy()
    size = mask.shape[0]
    hinv = np.linalg.inv(geometry_homography(params, size))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    pts = np.stack([xx.ravel(), yy.ravel(), np.ones(xx.size)])
    q = hinv @ pts
    qx, qy = q[0] / q[2], q[1] / q[2]
    ix, iy = np.floor(qx).astype(np.int64), np.floor(qy).astype(np.int64)
    valid = (ix >= 0) & (ix < size) & (iy >= 0) & (iy < size) & (q[2] > 0)
    ixc, iyc = np.clip(ix, 0, size - 1), np.clip(iy, 0, size - 1)
    wmask = (valid & mask[iyc, ixc]).reshape(size, size)
    wlayer = layer[:, iyc, ixc].reshape(layer.shape[0], size, size)
    return np.where(wmask[None], wlayer, 0.0), wmask


def gaussian_blur(img: np.ndarray, sigma: float, ksize: int = BLUR_KERNEL) -> np.ndarray:
    r = ksize // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    k /= k.sum()
    return np.stack([correlate(c, k, mode="reflect") for c in img])


@dataclass
class ForegroundAug:
    fg_u: np.ndarray
    fg_g: np.ndarray
    mask_u: np.ndarray
    mask_g: np.ndarray
    jitter: JitterParams
    geometry: GeometryParams
    swap_origin: tuple[int, int]


def augment_foreground(image: np.ndarray, record: SourceRecord, other_source, rng: Rng, fg_size: int = 32,
                       geometry: GeometryParams | None = None) -> ForegroundAug:
    """Background swap, jitter (-> I_f^u), object-only warp and optional blur (-> I_f^g)."""
    other = other_source.image if isinstance(other_source, SourceRecord) else other_source
    if other is image:
        raise ValidationError("background swap needs a different source image")
    _, h, w = image.shape
    r0, r1, c0, c1 = record.box.to_pixels(h, w)
    bh, bw = r1 - r0, c1 - c0
    size = (fg_size, fg_size)
    obj = resize_nearest(image[:, r0:r1, c0:c1], size)
    mask = resize_nearest(record.object_mask[r0:r1, c0:c1], size)
    oh, ow = other.shape[1:]
    srng = rng.substream("swap")
    sy = int(srng.integers(0, max(oh - bh, 0) + 1))
    sx = int(srng.integers(0, max(ow - bw, 0) + 1))
    patch = resize_image(other[:, sy:sy + bh, sx:sx + bw], size)
    swapped = np.where(mask[None], obj, patch)

    jitter = sample_jitter(rng.substream("jitter"))
    fg_u = apply_jitter(swapped, jitter)
    bg_j = apply_jitter(patch, jitter)

    grng = rng.substream("geometry")
    for attempt in range(GEOMETRY_RETRIES):
        params = geometry if geometry is not None else sample_geometry(grng.substream(attempt))
        warped, wmask = warp_object(fg_u, mask, params)
        if wmask.any():
            break
        if geometry is not None:
            raise GeometryError("fixed geometry pushes the object out of frame")
    else:
        raise GeometryError(f"object left the frame in {GEOMETRY_RETRIES} geometry draws")
    fg_g = np.where(wmask[None], warped, bg_j)
    if params.blur:
        fg_g = np.clip(gaussian_blur(fg_g, params.sigma), 0.0, 1.0)
    return ForegroundAug(fg_u, fg_g, mask, wmask, jitter, params, (sy, sx))


def paste_mask(fg_mask: np.ndarray, box: BoundingBox, h: int, w: int) -> np.ndarray:
    r0, r1, c0, c1 = box.to_pixels(h, w)
    out = np.zeros((h, w), dtype=bool)
    out[r0:r1, c0:c1] = resize_nearest(fg_mask, (r1 - r0, c1 - c0))
    return out


def paste_object(composite: np.ndarray, foreground: np.ndarray, box: BoundingBox, fg_mask: np.ndarray) -> np.ndarray:
    """Stretch the foreground's object to the box and overwrite those pixels only."""
    if not fg_mask.any():
        raise GeometryError("empty foreground mask")
    _, h, w = composite.shape
    r0, r1, c0, c1 = box.to_pixels(h, w)
    resized = resize_image(foreground, (r1 - r0, c1 - c0))
    pm = paste_mask(fg_mask, box, h, w)
    if not pm.any():
        raise GeometryError("object vanished when resized to the box")
    out = composite.copy()
    region = out[:, r0:r1, c0:c1]
    out[:, r0:r1, c0:c1] = np.where(pm[None, r0:r1, c0:c1], resized, region)
    return out


# ---------------------------------------------------------------------------
# Tuples
# ---------------------------------------------------------------------------


@dataclass
class AugmentedPair:
    comp_u: np.ndarray
    comp_n: np.ndarray
    fg_u: np.ndarray
    fg_g: np.ndarray
    box: BoundingBox
    mask_u: np.ndarray
    mask_g: np.ndarray
    comp_mask: np.ndarray
    params: dict = field(default_factory=dict)


def build_pair(record: SourceRecord, other: SourceRecord, rng: Rng, fg_size: int = 32) -> AugmentedPair:
    comp_u, box, info = augment_composite(record.image, record.box, rng.substream("composite"), record.object_mask)
    fg = augment_foreground(record.image, record, other, rng.substream("foreground"), fg_size)
    comp_n = paste_object(comp_u, fg.fg_u, box, fg.mask_u)
    params = {
        "crop_window": list(info["window"]),
        "composite_jitter": asdict(info["jitter"]),
        "foreground_jitter": asdict(fg.jitter),
        "geometry": asdict(fg.geometry),
        "geometry_identity": fg.geometry.is_identity_warp,
        "swap_origin": list(fg.swap_origin),
        "paste_resize": "stretch",
    }
    return AugmentedPair(comp_u, comp_n, fg.fg_u, fg.fg_g, box, fg.mask_u, fg.mask_g, info["mask"], params)


# Indicator -> (foreground, composite) selection
TASK_TABLE = {
    (0, 0): ("fg_u", "comp_n"),
    (1, 0): ("fg_u", "comp_u"),
    (0, 1): ("fg_g", "comp_n"),
    (1, 1): ("fg_g", "comp_u"),
}


def mask_out_box(image: np.ndarray, box: BoundingBox, fill: float = FILL_VALUE) -> np.ndarray:
    _, h, w = image.shape
    r0, r1, c0, c1 = box.to_pixels(h, w)
    out = image.copy()
    out[:, r0:r1, c0:c1] = fill
    return out


def make_tuple(pair: AugmentedPair, S: Indicator, fill: float = FILL_VALUE) -> TrainingTuple:
    fg_name, comp_name = TASK_TABLE[S.as_tuple()]
    I_f = getattr(pair, fg_name)
    I_c = getattr(pair, comp_name)
    fg_mask = pair.mask_u if fg_name == "fg_u" else pair.mask_g
    _, h, w = I_c.shape
    M = pair.box.mask(h, w).numpy()
    meta = {"foreground": fg_name, "composite": comp_name, **pair.params}
    return TrainingTuple(mask_out_box(I_c, pair.box, fill), I_f.copy(), pair.box, M, S, I_c.copy(), fg_mask.copy(), meta)


def make_plain_tuple(record: SourceRecord, fg_size: int = 32, fill: float = FILL_VALUE) -> TrainingTuple:
    """Un-augmented tuple: the source is its own target and the box crop is the foreground."""
    _, h, w = record.image.shape
    r0, r1, c0, c1 = record.box.to_pixels(h, w)
    I_f = resize_image(record.image[:, r0:r1, c0:c1], (fg_size, fg_size))
    fg_mask = resize_nearest(record.object_mask[r0:r1, c0:c1], (fg_size, fg_size))
    M = record.box.mask(h, w).numpy()
    return TrainingTuple(mask_out_box(record.image, record.box, fill), I_f, record.box, M, Indicator(0, 0),
                         record.image.copy(), fg_mask, {"plain": True})


def make_sources(n_sources: int, seed: int, image_size: int = 64) -> list[SourceRecord]:
    root = Rng(seed, ("dataset",))
    return [generate_synthetic_source(root.substream("source", i), image_size, image_size) for i in range(n_sources)]


def swap_partner(i: int, n: int, rng: Rng) -> int:
    if n < 2:
        return -1
    return (i + 1 + int(rng.integers(0, n - 1))) % n


def build_tuples(sources: list[SourceRecord], seed: int, fg_size: int = 32) -> list[TrainingTuple]:
    """All four indicator tuples per source, in-memory."""
    root = Rng(seed, ("dataset",))
    out = []
    for i, rec in enumerate(sources):
        rng = root.substream("pair", i)
        j = swap_partner(i, len(sources), rng.substream("partner"))
        other = sources[j] if j >= 0 else generate_synthetic_source(rng.substream("extra"), *rec.image.shape[1:])
        pair = build_pair(rec, other, rng, fg_size)
        for S in ALL_INDICATORS:
            tp = make_tuple(pair, S)
            tp.meta.update({"source": i, "swap_source": j})
            out.append(tp)
    return out


# ---------------------------------------------------------------------------
# Files: PNG images (8-bit sRGB) + JSON metadata
# ---------------------------------------------------------------------------


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: str | Path, img: np.ndarray) -> None:
    """Save a [0, 1] image ``[3,H,W]`` or a boolean mask ``[H,W]``."""
    if img.ndim == 2:
        Image.fromarray(img.astype(np.uint8) * 255, mode="L").save(path)
    else:
        Image.fromarray(_to_uint8(img).transpose(1, 2, 0), mode="RGB").save(path)


def _read01(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0


def read_png(path: str | Path) -> torch.Tensor:
    """PNG -> float64 tensor ``[3,H,W]`` in [-1, 1]."""
    return torch.from_numpy(_read01(path) * 2.0 - 1.0)


def write_png(path: str | Path, image: torch.Tensor) -> None:
    """float tensor ``[3,H,W]`` in [-1, 1] -> PNG."""
    save_png(path, (image.detach().numpy() + 1.0) / 2.0)


def _read_mask(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) >= 128


def save_tuple(tp: TrainingTuple, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    save_png(directory / "I_b.png", tp.I_b)
    save_png(directory / "I_f.png", tp.I_f)
    save_png(directory / "I_c.png", tp.I_c)
    save_png(directory / "M.png", tp.M[0] > 0.5)
    save_png(directory / "M_f.png", tp.fg_mask)
    meta = {"B": list(tp.B.as_tuple()), "S": list(tp.S.as_tuple()), "task": tp.S.task, **tp.meta}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_tuple(directory: str | Path) -> TrainingTuple:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    box = BoundingBox(*meta["B"])
    M = _read_mask(d / "M.png")[None].astype(np.float64)
    return TrainingTuple(_read01(d / "I_b.png"), _read01(d / "I_f.png"), box, M, Indicator(*meta["S"]),
                         _read01(d / "I_c.png"), _read_mask(d / "M_f.png"), meta)


def save_source(rec: SourceRecord, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    save_png(directory / "image.png", rec.image)
    save_png(directory / "mask.png", rec.object_mask)
    (directory / "meta.json").write_text(json.dumps({"B": list(rec.box.as_tuple()), **rec.meta}, sort_keys=True))


def load_source(directory: str | Path) -> SourceRecord:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    return SourceRecord(_read01(d / "image.png"), BoundingBox(*meta.pop("B")), _read_mask(d / "mask.png"), meta)


def build_dataset(n_sources: int, seed: int, out_dir: str | Path, image_size: int = 64, fg_size: int = 32) -> dict:
    """Write sources, four tuples per source and ``manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sources = make_sources(n_sources, seed, image_size)
    tuples = build_tuples(sources, seed, fg_size)
    for i, rec in enumerate(sources):
        save_source(rec, out / "sources" / f"{i:05d}")
    entries = []
    counts = {str(S): 0 for S in ALL_INDICATORS}
    for k, tp in enumerate(tuples):
        name = f"tuples/{k:06d}_{tp.S.task}"
        save_tuple(tp, out / name)
        counts[str(tp.S)] += 1
        entries.append({"dir": name, "source": tp.meta["source"], "indicator": list(tp.S.as_tuple()),
                        "rng_path": ["dataset", "pair", tp.meta["source"]]})
    manifest = {
        "version": 1,
        "seed": seed,
        "n_sources": n_sources,
        "image_size": image_size,
        "fg_size": fg_size,
        "counts": counts,
        "sources": [f"sources/{i:05d}" for i in range(n_sources)],
        "tuples": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(root: str | Path, plain: bool = False) -> list[TrainingTuple]:
    """Tuples listed in a manifest; ``plain`` rebuilds un-augmented tuples from the stored sources."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if plain:
        return [make_plain_tuple(load_source(root / s), manifest["fg_size"]) for s in manifest["sources"]]
    return [load_tuple(root / e["dir"]) for e in manifest["tuples"]]


def manifest_hash(root: str | Path) -> str:
    """SHA-256 over the manifest and every source/tuple file (run configs excluded)."""
    root = Path(root)
    h = hashlib.sha256((root / "manifest.json").read_bytes())
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.parent != root:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
