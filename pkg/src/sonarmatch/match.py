"""Prediction stage: score fused keypoint pairs, threshold, RANSAC false-match
elimination, the normalized-patch ratio-test baseline, and match overlays."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .detect import DoGParams, FastParams, Keypoint, detect_combined, detect_pair
from .errors import (InsufficientMatchesError, NoConsensusError, NoKeypointsError, SingularTransformError)
from .imagecore import AffineTransform, GrayImage
from .net import SiameseModel
from .patches import BoundaryError, extract_patch

log = logging.getLogger(__name__)

Scorer = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class MatchResult:
    kp_a: Keypoint
    kp_b: Keypoint
    score: float
    accepted: bool = False
    inlier: bool = False

    def __post_init__(self):
        if self.inlier and not self.accepted:
            raise ValueError("an inlier must also be accepted")


@dataclass(frozen=True)
class MatchConfig:
    m: int = 16
    n: int = 16
    threshold: float = 0.5
    ransac_iterations: int = 1000
    inlier_tolerance: float = 2.0
    min_inliers: int = 3
    seed: int = 42
    dedup_radius: float = 3.0
    overlap_margin: float | None = None
    dog: DoGParams = field(default_factory=DoGParams)
    fast: FastParams = field(default_factory=FastParams)

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("similarity threshold must lie in (0, 1)")
        if not self.inlier_tolerance > 0:
            raise ValueError("inlier tolerance must be positive")
        if self.min_inliers < 3:
            raise ValueError("min_inliers must be at least 3 (affine minimal sample)")

    @property
    def margin(self) -> float:
        """Border kept clear so that both windows of a pair show surveyed ground.

        A rotated copy of an axis-aligned patch reaches sqrt(2) half-widths out.
        """
        if self.overlap_margin is not None:
            return self.overlap_margin
        return float(math.ceil(math.sqrt(2) * max(self.m, self.n)))


def model_scorer(model: SiameseModel) -> Scorer:
    return model.predict


def ncc_scorer(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Normalized cross-correlation clipped to [0, 1]; identical patches score exactly 1."""
    a = xa.reshape(len(xa), -1).astype(np.float64)
    b = xb.reshape(len(xb), -1).astype(np.float64)
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    denom = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    flat = denom == 0
    ncc = np.sum(a * b, axis=1) / np.where(flat, 1.0, denom)
    equal = np.all(xa.reshape(len(xa), -1) == xb.reshape(len(xb), -1), axis=1)
    ncc = np.where(equal, 1.0, np.where(flat, 0.0, ncc))
    return np.clip(ncc, 0.0, 1.0)


def _as_scorer(model_or_scorer) -> Scorer:
    if isinstance(model_or_scorer, SiameseModel):
        return model_scorer(model_or_scorer)
    return model_or_scorer


# ---------------------------------------------------------------------------
# affine estimation


def fit_affine(src: np.ndarray, dst: np.ndarray) -> AffineTransform:
    """Least-squares affine with ``dst ~ T(src)``; exact for three non-collinear points."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    design = np.column_stack([src, np.ones(len(src))])
    coef, *_ = np.linalg.lstsq(design, dst, rcond=None)
    return AffineTransform(coef[0, 0], coef[1, 0], coef[2, 0], coef[0, 1], coef[1, 1], coef[2, 1])


def reprojection_errors(t: AffineTransform, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return np.linalg.norm(t.apply(src) - dst, axis=1)


def ransac_affine(src: np.ndarray, dst: np.ndarray, iterations: int = 1000, tolerance: float = 2.0,
                  min_inliers: int = 3, seed: int = 42) -> tuple[AffineTransform, np.ndarray]:
    """Consensus affine from 3-point samples, refit by least squares on the winning set.

    The winner is the largest consensus, earliest iteration on ties. Returned inlier
    flags are residuals under the *refit* transform, so every flagged point
    reprojects within ``tolerance``.
    """
    n = len(src)
    if n < 3:
        raise InsufficientMatchesError(f"affine RANSAC needs at least 3 matches, got {n}")
    rng = np.random.default_rng(seed)
    best_mask, best_count = None, -1
    for _ in range(iterations):
        pick = rng.choice(n, 3, replace=False)
        p = src[pick]
        area = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1])
        if abs(area) < 1e-9:
            continue
        try:
            t = fit_affine(p, dst[pick])
        except SingularTransformError:
            continue
        mask = reprojection_errors(t, src, dst) <= tolerance
        count = int(mask.sum())
        if count > best_count:
            best_mask, best_count = mask, count
    if best_mask is None or best_count < min_inliers:
        raise NoConsensusError(f"no affine consensus of at least {min_inliers} matches")
    mask = best_mask
    t = fit_affine(src[mask], dst[mask])
    # refit until the consensus stops changing (bounded)
    for _ in range(5):
        new_mask = reprojection_errors(t, src, dst) <= tolerance
        if new_mask.sum() < 3 or np.array_equal(new_mask, mask):
            break
        mask = new_mask
        try:
            t = fit_affine(src[mask], dst[mask])
        except SingularTransformError:
            break
    final = reprojection_errors(t, src, dst) <= tolerance
    if final.sum() < min_inliers:
        raise NoConsensusError(f"refit consensus fell below {min_inliers} matches")
    return t, final


def reject_outliers(matches: Sequence[MatchResult], cfg: MatchConfig = MatchConfig()
                    ) -> tuple[list[MatchResult], AffineTransform]:
    accepted = [i for i, mt in enumerate(matches) if mt.accepted]
    if len(accepted) < max(3, cfg.min_inliers):
        raise InsufficientMatchesError(f"need at least {max(3, cfg.min_inliers)} accepted matches, got {len(accepted)}")
    src = np.array([[matches[i].kp_a.x, matches[i].kp_a.y] for i in accepted])
    dst = np.array([[matches[i].kp_b.x, matches[i].kp_b.y] for i in accepted])
    t, mask = ransac_affine(src, dst, cfg.ransac_iterations, cfg.inlier_tolerance, cfg.min_inliers, cfg.seed)
    flags = dict(zip(accepted, mask))
    out = [replace(mt, inlier=bool(flags.get(i, False))) for i, mt in enumerate(matches)]
    return out, t


def _flag_inliers(results: list[MatchResult], cfg: MatchConfig) -> list[MatchResult]:
    try:
        results, _ = reject_outliers(results, cfg)
    except InsufficientMatchesError as exc:
        log.info("outlier rejection skipped: %s", exc)
    return results


# ---------------------------------------------------------------------------
# matching


def _patch_stack(img: GrayImage, kps: Sequence[Keypoint], m: int, n: int):
    out, ok = [], []
    for i, kp in enumerate(kps):
        try:
            out.append(extract_patch(img, kp, m, n, i).data)
            ok.append(i)
        except BoundaryError:
            continue
    arr = np.stack(out) if out else np.zeros((0, 2 * n, 2 * m))
    return arr, ok


def score_pairs(img_a: GrayImage, img_b: GrayImage, fused_a: Sequence[Keypoint], fused_b: Sequence[Keypoint],
                scorer: Scorer, cfg: MatchConfig) -> list[MatchResult]:
    """Score index-aligned pairs; pairs whose windows leave either image are dropped."""
    pa, ok_a = _patch_stack(img_a, fused_a, cfg.m, cfg.n)
    pb, ok_b = _patch_stack(img_b, fused_b, cfg.m, cfg.n)
    both = sorted(set(ok_a) & set(ok_b))
    if not both:
        return []
    ia = {k: j for j, k in enumerate(ok_a)}
    ib = {k: j for j, k in enumerate(ok_b)}
    scores = np.asarray(scorer(pa[[ia[k] for k in both]], pb[[ib[k] for k in both]]), dtype=np.float64)
    results = [MatchResult(fused_a[k], fused_b[k], float(s), bool(s >= cfg.threshold)) for k, s in zip(both, scores)]
    order = sorted(range(len(results)), key=lambda j: (-results[j].score, j))
    return [results[j] for j in order]


def match_images(img_a: GrayImage, img_b: GrayImage, t_align: AffineTransform, model,
                 cfg: MatchConfig = MatchConfig()) -> list[MatchResult]:
    """Detect, cross-map and fuse, score each aligned pair, threshold, then flag RANSAC inliers.

    ``model`` is a :class:`SiameseModel` or any scorer ``(xa, xb) -> scores in [0, 1]``.
    Results are sorted by score (descending), fused index breaking ties.
    """
    fused_a, fused_b = detect_pair(img_a, img_b, t_align, cfg.dog, cfg.fast, cfg.dedup_radius, cfg.margin)
    results = score_pairs(img_a, img_b, fused_a, fused_b, _as_scorer(model), cfg)
    if not results:
        raise NoKeypointsError("no fused keypoint pair survived detection and patch extraction")
    return _flag_inliers(results, cfg)


# ---------------------------------------------------------------------------
# baseline


def patch_descriptors(x: np.ndarray) -> np.ndarray:
    """Flattened, mean-subtracted, unit-length patches (constant patches become zero)."""
    d = x.reshape(len(x), -1).astype(np.float64)
    d = d - d.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    return d / np.where(norm > 0, norm, 1.0)


def knn_ratio_match(desc_a: np.ndarray, desc_b: np.ndarray, d_ratio: float = 0.85):
    """Two nearest B descriptors per A descriptor; returns (nn index, d1, d2, accepted)."""
    if len(desc_b) < 2:
        raise InsufficientMatchesError("ratio test needs at least 2 candidate descriptors")
    sq = (np.sum(desc_a ** 2, axis=1)[:, None] + np.sum(desc_b ** 2, axis=1)[None, :]
          - 2.0 * desc_a @ desc_b.T)
    dist = np.sqrt(np.maximum(sq, 0.0))
    two = np.argsort(dist, axis=1, kind="stable")[:, :2]
    rows = np.arange(len(desc_a))
    d1, d2 = dist[rows, two[:, 0]], dist[rows, two[:, 1]]
    return two[:, 0], d1, d2, d1 < d_ratio * d2


def baseline_ratio_match(img_a: GrayImage, img_b: GrayImage, cfg: MatchConfig = MatchConfig(),
                         d_ratio: float = 0.85) -> list[MatchResult]:
    """Classical pipeline on raw normalized patches: independent detection, KNN (k=2), ratio test."""
    kps_a = detect_combined(img_a, cfg.dog, cfg.fast, cfg.dedup_radius)
    kps_b = detect_combined(img_b, cfg.dog, cfg.fast, cfg.dedup_radius)
    pa, ok_a = _patch_stack(img_a, kps_a, cfg.m, cfg.n)
    pb, ok_b = _patch_stack(img_b, kps_b, cfg.m, cfg.n)
    if len(ok_a) < 2 or len(ok_b) < 2:
        raise InsufficientMatchesError(f"baseline needs >= 2 keypoints per image, got {len(ok_a)} and {len(ok_b)}")
    nn, d1, d2, ok = knn_ratio_match(patch_descriptors(pa), patch_descriptors(pb), d_ratio)
    results = [MatchResult(kps_a[ok_a[i]], kps_b[ok_b[nn[i]]], float(1.0 - d1[i] / 2.0), bool(ok[i]))
               for i in range(len(ok_a))]
    order = sorted(range(len(results)), key=lambda j: (-results[j].score, j))
    return _flag_inliers([results[j] for j in order], cfg)


def inlier_rate(matches: Sequence[MatchResult], truth: AffineTransform, tolerance: float = 2.0) -> float:
    """Fraction of accepted matches consistent with the ground-truth transform (0 if none accepted)."""
    acc = [mt for mt in matches if mt.accepted]
    if not acc:
        return 0.0
    src = np.array([[mt.kp_a.x, mt.kp_a.y] for mt in acc])
    dst = np.array([[mt.kp_b.x, mt.kp_b.y] for mt in acc])
    return float(np.mean(reprojection_errors(truth, src, dst) <= tolerance))


# ---------------------------------------------------------------------------
# overlay

INLIER_LEVEL = 1.0
OUTLIER_LEVEL = 0.55


def _draw_line(canvas: np.ndarray, x0: float, y0: float, x1: float, y1: float, level: float):
    steps = int(math.ceil(max(abs(x1 - x0), abs(y1 - y0)))) + 1
    ts = np.linspace(0.0, 1.0, steps)
    xs = np.floor(x0 + ts * (x1 - x0) + 0.5).astype(int)
    ys = np.floor(y0 + ts * (y1 - y0) + 0.5).astype(int)
    ok = (xs >= 0) & (xs < canvas.shape[1]) & (ys >= 0) & (ys < canvas.shape[0])
    canvas[ys[ok], xs[ok]] = np.maximum(canvas[ys[ok], xs[ok]], level) if level < 1 else level


def render_overlay(img_a: GrayImage, img_b: GrayImage, matches: Sequence[MatchResult]) -> GrayImage:
    """Side-by-side canvas with accepted matches drawn as lines (inliers brightest)."""
    h = max(img_a.height, img_b.height)
    canvas = np.zeros((h, img_a.width + img_b.width))
    canvas[:img_a.height, :img_a.width] = img_a.data
    canvas[:img_b.height, img_a.width:] = img_b.data
    # outliers first so inlier lines stay on top
    for mt in sorted((mt for mt in matches if mt.accepted), key=lambda mt: mt.inlier):
        level = INLIER_LEVEL if mt.inlier else OUTLIER_LEVEL
        _draw_line(canvas, mt.kp_a.x, mt.kp_a.y, mt.kp_b.x + img_a.width, mt.kp_b.y, level)
    return GrayImage(canvas)
