"""Masked composition metrics and pairwise/rank scoring of methods."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import jsonschema
import numpy as np
import torch
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import GeometryError, RankDeficientError, ShapeError, ValidationError
from .generator import BoundingBox
from .numerics import resize_bilinear

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
BT_FLOOR = math.log(1e-8)


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().numpy()
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' Gaussian filtering over the last two axes."""
    k = len(g)
    rows = sum(g[i] * img[..., i:img.shape[-2] - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[..., :, j:rows.shape[-1] - k + 1 + j] for j in range(k))


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ShapeError(f"SSIM inputs differ in shape: {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over valid windows (and channels, for ``[C,H,W]`` inputs)."""
    return float(ssim_map(a, b, data_range).mean())


def black_out_box(image, box: BoundingBox) -> np.ndarray:
    img = _np(image).copy()
    r0, r1, c0, c1 = box.to_pixels(*img.shape[-2:])
    img[..., r0:r1, c0:c1] = 0.0
    return img


def masked_background_ssim(background, composite, box: BoundingBox) -> float:
    """SSIM with the box filled black in both images; inputs in [0, 1]."""
    bg, comp = _np(background), _np(composite)
    if bg.shape != comp.shape:
        raise ShapeError(f"background {bg.shape} and composite {comp.shape} differ in extent")
    return ssim(black_out_box(bg, box), black_out_box(comp, box))


# ---------------------------------------------------------------------------
# Foreground similarity through the toy encoder
# ---------------------------------------------------------------------------


def _nearest_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    ri = np.minimum(((np.arange(size[0]) + 0.5) * mask.shape[0] / size[0]).astype(np.int64), mask.shape[0] - 1)
    ci = np.minimum(((np.arange(size[1]) + 0.5) * mask.shape[1] / size[1]).astype(np.int64), mask.shape[1] - 1)
    return mask[ri[:, None], ci[None, :]]


def _global_embedding(encoder: Callable, images: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        out = encoder(images)
    return getattr(out, "global_embedding", out)


def masked_fg_similarity(composite, input_fg, box: BoundingBox, object_mask, encoder: Callable) -> float:
    """Cosine similarity of global embeddings of the object regions only.

    ``composite`` is ``[3,H,W]`` and ``input_fg`` ``[3,s,s]``, both in [0, 1];
    ``object_mask`` is the input foreground's ``[s,s]`` object mask. Non-object
    pixels are blacked out in both crops before encoding, and the composite's
    are blacked out before resizing so nothing outside the object leaks in.
    """
    comp, fg = _np(composite), _np(input_fg)
    mask = _np(object_mask).reshape(fg.shape[-2:]) > 0.5
    if not mask.any():
        raise GeometryError("empty object mask")
    r0, r1, c0, c1 = box.to_pixels(*comp.shape[-2:])
    crop = comp[:, r0:r1, c0:c1] * _nearest_mask(mask, (r1 - r0, c1 - c0))[None]
    crop = resize_bilinear(torch.from_numpy(np.ascontiguousarray(crop)), fg.shape[-2:]).numpy() * mask[None]
    ref = fg * mask[None]
    batch = torch.from_numpy(np.stack([crop, ref]) * 2.0 - 1.0)
    e = _global_embedding(encoder, batch)
    denom = float(torch.linalg.vector_norm(e[0]) * torch.linalg.vector_norm(e[1]))
    if denom == 0.0:
        return 0.0
    return float(torch.dot(e[0], e[1])) / denom


# ---------------------------------------------------------------------------
# Bradley-Terry scoring
# ---------------------------------------------------------------------------


@dataclass
class PairwiseTable:
    methods: list[str]
    wins: np.ndarray

    def __post_init__(self):
        self.wins = np.asarray(self.wins, dtype=np.float64)
        m = len(self.methods)
        if self.wins.shape != (m, m):
            raise ValidationError(f"wins matrix must be {m}x{m}")
        if np.any(self.wins < 0) or np.any(np.diag(self.wins) != 0):
            raise ValidationError("wins must be non-negative with a zero diagonal")

    @property
    def comparisons(self) -> np.ndarray:
        return self.wins + self.wins.T

    @classmethod
    def from_records(cls, records: Sequence[tuple[str, str, float, float]]) -> "PairwiseTable":
        methods: list[str] = []
        for a, b, _, _ in records:
            for name in (a, b):
                if name not in methods:
                    methods.append(name)
        idx = {n: i for i, n in enumerate(methods)}
        w = np.zeros((len(methods), len(methods)))
        for a, b, wa, wb in records:
            if a == b:
                raise ValidationError(f"self comparison for {a!r}")
            w[idx[a], idx[b]] += float(wa)
            w[idx[b], idx[a]] += float(wb)
        return cls(methods, w)

    @classmethod
    def from_csv(cls, path: str | Path) -> "PairwiseTable":
        """Rows ``method_a, method_b, wins_a, wins_b`` with that header."""
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            need = {"method_a", "method_b", "wins_a", "wins_b"}
            if reader.fieldnames is None or not need <= set(reader.fieldnames):
                raise ValidationError(f"CSV needs columns {sorted(need)}")
            try:
                rows = [(r["method_a"], r["method_b"], float(r["wins_a"]), float(r["wins_b"])) for r in reader]
            except ValueError as exc:
                raise ValidationError(f"bad count in {path}: {exc}") from exc
        return cls.from_records(rows)


@dataclass
class BTScores:
    methods: list[str]
    scores: np.ndarray
    iterations: int
    converged: bool
    clamped: list[str] = field(default_factory=list)

    def as_dict(self) -> dict[str, float]:
        return {m: float(s) for m, s in zip(self.methods, self.scores)}

    def format(self) -> str:
        width = max(len(m) for m in self.methods)
        return "\n".join(f"{m:<{width}} {s:.3f}" for m, s in zip(self.methods, self.scores))


def _mm(w: np.ndarray, tol: float, max_iter: int) -> tuple[np.ndarray, int, bool]:
    n = w + w.T
    wins = w.sum(axis=1)
    logp = np.zeros(len(w))
    for it in range(1, max_iter + 1):
        p = np.exp(logp)
        denom = (n / (p[:, None] + p[None, :])).sum(axis=1)
        new = np.log(wins / denom)
        new -= new.mean()
        delta = np.max(np.abs(new - logp))
        logp = new
        if delta < tol:
            return logp, it, True
    return logp, max_iter, False


def bt_fit(table: PairwiseTable, tol: float = 1e-10, max_iter: int = 10000) -> BTScores:
    """Bradley-Terry MLE by minorization-maximization; scores are mean-zero log-strengths.

    Methods that never win are pinned at ln(1e-8) relative to the fitted pool
    (their MLE is at minus infinity) and listed in ``clamped``.
    """
    m = len(table.methods)
    if m < 2:
        raise ValidationError("need at least two methods")
    n = table.comparisons
    k, _ = connected_components(csr_matrix(n > 0), directed=False)
    if k > 1:
        raise RankDeficientError(f"comparison graph has {k} components")
    wins = table.wins.sum(axis=1)
    active = wins > 0
    if active.sum() == 0:
        raise RankDeficientError("no method has any wins")
    logp = np.full(m, BT_FLOOR)
    sub = table.wins[np.ix_(active, active)]
    if active.sum() == 1:
        fitted, iters, conv = np.zeros(1), 0, True
    else:
        if connected_components(csr_matrix((sub + sub.T) > 0), directed=False)[0] > 1:
            raise RankDeficientError("methods with wins do not form a connected comparison graph")
        fitted, iters, conv = _mm(sub, tol, max_iter)
    logp[active] = fitted
    scores = logp - logp.mean()
    clamped = [name for name, a in zip(table.methods, active) if not a]
    return BTScores(list(table.methods), scores, iters, conv, clamped)


# ---------------------------------------------------------------------------
# Average ranking
# ---------------------------------------------------------------------------


def average_rank(rankings: Sequence[Sequence[int]]) -> np.ndarray:
    """Mean rank per method; each rater's vector must be a permutation of 1..m."""
    if len(rankings) == 0:
        raise ValidationError("no rankings given")
    arr = np.asarray([list(r) for r in rankings])
    if arr.ndim != 2:
        raise ValidationError("rankings must all have the same length")
    m = arr.shape[1]
    expected = np.arange(1, m + 1)
    for i, r in enumerate(arr):
        if not np.array_equal(np.sort(r), expected):
            raise ValidationError(f"ranking {i} is not a permutation of 1..{m}")
    return arr.mean(axis=0).astype(np.float64)


def format_rank_table(methods: Sequence[str], columns: dict[str, np.ndarray]) -> str:
    """Rows of ``method  col1  col2 ...`` with two decimals."""
    width = max(len(m) for m in methods)
    head = " ".join([" " * width] + [f"{c:>8}" for c in columns])
    lines = [head]
    for i, m in enumerate(methods):
        lines.append(" ".join([f"{m:<{width}}"] + [f"{float(v[i]):8.2f}" for v in columns.values()]))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["metric", "items", "aggregate"],
    "properties": {
        "metric": {"type": "string"},
        "items": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "score"],
                "properties": {"id": {"type": ["string", "integer"]}, "score": {"type": "number"}},
            },
        },
        "aggregate": {"type": "object", "additionalProperties": {"type": "number"}},
        "meta": {"type": "object"},
    },
}


def make_report(metric: str, items: Sequence[tuple[str | int, float]], meta: dict | None = None) -> dict:
    scores = np.asarray([s for _, s in items], dtype=np.float64)
    aggregate = {"mean": float(scores.mean()), "min": float(scores.min()), "max": float(scores.max())} if len(items) else {}
    report = {"metric": metric, "items": [{"id": i, "score": float(s)} for i, s in items], "aggregate": aggregate,
              "meta": meta or {}}
    validate_report(report)
    return report


def validate_report(report: dict) -> None:
    try:
        jsonschema.validate(report, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ValidationError(f"report does not match schema: {exc.message}") from exc
