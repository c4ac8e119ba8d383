"""Keypoint detection: DoG blobs and FAST corners, plus fusion of the two views across an alignment.

Fusion takes the detections of two aligned images, carries the richer set across
the alignment into the other image, merges it with that image's own detections
and keeps only index-aligned pairs, so ``fused_a[i]`` and ``fused_b[i]`` always
depict the same ground location.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from .errors import ImageTooSmallError
from .imagecore import AffineTransform, GrayImage

DOG = "DoG"
FAST = "FAST"
MAPPED = "Mapped"

ASSUMED_INPUT_BLUR = 0.5


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float = 1.0
    response: float = 0.0
    source: str = DOG

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"keypoint scale must be positive, got {self.scale}")
        if self.source not in (DOG, FAST, MAPPED):
            raise ValueError(f"unknown keypoint source {self.source!r}")

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class DoGParams:
    octaves: int = 3
    scales_per_octave: int = 3
    base_sigma: float = 1.6
    contrast_threshold: float = 0.015
    edge_threshold: float = 10.0

    def __post_init__(self):
        if min(self.octaves, self.scales_per_octave) < 1 or min(
                self.base_sigma, self.contrast_threshold, self.edge_threshold) <= 0:
            raise ValueError("DoG parameters must all be positive")


@dataclass(frozen=True)
class FastParams:
    intensity_threshold: float = 0.08
    arc_length: int = 9
    nms_radius: float = 4.0

    def __post_init__(self):
        if not 0 < self.intensity_threshold < 1:
            raise ValueError("FAST intensity threshold must be in (0, 1)")
        if not 1 <= self.arc_length <= 16:
            raise ValueError("FAST arc length must be in 1..16")
        if self.nms_radius < 0:
            raise ValueError("nms_radius must be non-negative")


def points_of(kps: Sequence[Keypoint]) -> np.ndarray:
    return np.array([[k.x, k.y] for k in kps], dtype=np.float64).reshape(-1, 2)


# ---------------------------------------------------------------------------
# DoG


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(4.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(a: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return a.copy()
    k = gaussian_kernel(sigma)
    return correlate1d(correlate1d(a, k, axis=0, mode="mirror"), k, axis=1, mode="mirror")


def upsample2(a: np.ndarray) -> np.ndarray:
    """Double the resolution by linear interpolation; output pixel u sits at input u/2."""
    h, w = a.shape

    def axis_weights(n):
        pos = np.arange(2 * n) / 2.0
        i0 = np.minimum(np.floor(pos).astype(int), n - 1)
        i1 = np.minimum(i0 + 1, n - 1)
        return i0, i1, pos - i0

    r0, r1, fr = axis_weights(h)
    c0, c1, fc = axis_weights(w)
    rows = a[r0] * (1 - fr)[:, None] + a[r1] * fr[:, None]
    return rows[:, c0] * (1 - fc)[None, :] + rows[:, c1] * fc[None, :]


def dog_pyramid(img: GrayImage, p: DoGParams) -> list[np.ndarray]:
    """One ``(S + 2, h, w)`` DoG stack per octave; octave 0 is at twice the input resolution."""
    s = p.scales_per_octave
    k = 2.0 ** (1.0 / s)
    sigmas = [p.base_sigma * k ** i for i in range(s + 3)]
    start_blur = 2.0 * ASSUMED_INPUT_BLUR
    base = gaussian_blur(upsample2(img.data), math.sqrt(max(sigmas[0] ** 2 - start_blur ** 2, 0.0)))
    stacks = []
    for _ in range(p.octaves):
        levels = [base]
        for i in range(1, s + 3):
            levels.append(gaussian_blur(levels[-1], math.sqrt(sigmas[i] ** 2 - sigmas[i - 1] ** 2)))
        g = np.stack(levels)
        stacks.append(g[1:] - g[:-1])
        base = levels[s][::2, ::2]
        if min(base.shape) < 8:
            break
    return stacks


def _local_extrema(d: np.ndarray, floor: float) -> np.ndarray:
    """Indices ``(s, y, x)`` of strict 26-neighbour extrema in the interior of a DoG stack."""
    core = d[1:-1, 1:-1, 1:-1]
    is_max = core > floor
    is_min = core < -floor
    ns, nh, nw = d.shape
    for ds in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if ds == dy == dx == 0:
                    continue
                nb = d[1 + ds:ns - 1 + ds, 1 + dy:nh - 1 + dy, 1 + dx:nw - 1 + dx]
                is_max &= core > nb
                is_min &= core < nb
    idx = np.argwhere(is_max | is_min)
    return idx + 1


def _refine(d: np.ndarray, s: int, y: int, x: int):
    """One quadratic step: returns (offset (ds, dy, dx) clamped to +/-0.5, value, 2-D Hessian)."""
    c = d[s, y, x]
    gx = 0.5 * (d[s, y, x + 1] - d[s, y, x - 1])
    gy = 0.5 * (d[s, y + 1, x] - d[s, y - 1, x])
    gs = 0.5 * (d[s + 1, y, x] - d[s - 1, y, x])
    dxx = d[s, y, x + 1] + d[s, y, x - 1] - 2 * c
    dyy = d[s, y + 1, x] + d[s, y - 1, x] - 2 * c
    dss = d[s + 1, y, x] + d[s - 1, y, x] - 2 * c
    dxy = 0.25 * (d[s, y + 1, x + 1] - d[s, y + 1, x - 1] - d[s, y - 1, x + 1] + d[s, y - 1, x - 1])
    dxs = 0.25 * (d[s + 1, y, x + 1] - d[s + 1, y, x - 1] - d[s - 1, y, x + 1] + d[s - 1, y, x - 1])
    dys = 0.25 * (d[s + 1, y + 1, x] - d[s + 1, y - 1, x] - d[s - 1, y + 1, x] + d[s - 1, y - 1, x])
    grad = np.array([gs, gy, gx])
    hess = np.array([[dss, dys, dxs], [dys, dyy, dxy], [dxs, dxy, dxx]])
    try:
        offset = -np.linalg.solve(hess, grad)
    except np.linalg.LinAlgError:
        offset = np.zeros(3)
    if not np.all(np.isfinite(offset)):
        offset = np.zeros(3)
    offset = np.clip(offset, -0.5, 0.5)
    value = c + 0.5 * float(grad @ offset)
    return offset, value, (dxx, dyy, dxy)


def passes_edge_test(dxx: float, dyy: float, dxy: float, r: float) -> bool:
    tr = dxx + dyy
    det = dxx * dyy - dxy * dxy
    return det > 0 and tr * tr * r < (r + 1) ** 2 * det


def detect_dog(img: GrayImage, p: DoGParams = DoGParams()) -> list[Keypoint]:
    if min(img.width, img.height) < 32:
        raise ImageTooSmallError(f"DoG detection needs at least 32x32 pixels, got {img.width}x{img.height}")
    s_per = p.scales_per_octave
    found = []
    for o, d in enumerate(dog_pyramid(img, p)):
        # octave o pixel j sits at base pixel j * 2**(o - 1)
        step = 2.0 ** (o - 1)
        for s, y, x in _local_extrema(d, 0.5 * p.contrast_threshold):
            offset, value, (dxx, dyy, dxy) = _refine(d, s, y, x)
            if abs(value) < p.contrast_threshold:
                continue
            if not passes_edge_test(dxx, dyy, dxy, p.edge_threshold):
                continue
            bx = (x + offset[2]) * step
            by = (y + offset[1]) * step
            if not (0 <= bx < img.width and 0 <= by < img.height):
                continue
            scale = p.base_sigma * 2.0 ** ((s + offset[0]) / s_per) * step
            found.append(Keypoint(float(bx), float(by), float(scale), float(value), DOG))
    found.sort(key=lambda k: (-abs(k.response), k.y, k.x))
    return found


# ---------------------------------------------------------------------------
# FAST

CIRCLE = np.array([
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
])


def _arc_members(flags: np.ndarray, arc: int) -> np.ndarray:
    """Mark circle positions lying on a circular run of True of length >= ``arc``.

    ``flags`` has the 16 circle positions on axis 0.
    """
    n = flags.shape[0]
    tripled = np.concatenate([flags, flags, flags]).astype(np.int32)
    fwd = np.zeros_like(tripled)
    bwd = np.zeros_like(tripled)
    run = np.zeros(flags.shape[1:], dtype=np.int32)
    for i in range(3 * n):
        run = (run + 1) * tripled[i]
        fwd[i] = run
    run = np.zeros(flags.shape[1:], dtype=np.int32)
    for i in range(3 * n - 1, -1, -1):
        run = (run + 1) * tripled[i]
        bwd[i] = run
    length = np.minimum(fwd[n:2 * n] + bwd[n:2 * n] - 1, n)
    return flags & (length >= arc)


def fast_scores(a: np.ndarray, t: float, arc: int) -> np.ndarray:
    """Segment-test score for every pixel (0 where not a corner or within 3 px of the border)."""
    h, w = a.shape
    scores = np.zeros((h, w))
    if h < 7 or w < 7:
        return scores
    center = a[3:h - 3, 3:w - 3]
    ring = np.stack([a[3 + dy:h - 3 + dy, 3 + dx:w - 3 + dx] for dx, dy in CIRCLE])
    diff = ring - center[None]
    bright = _arc_members(diff > t, arc)
    dark = _arc_members(diff < -t, arc)
    score = (np.abs(diff) * (bright | dark)).sum(axis=0)
    scores[3:h - 3, 3:w - 3] = score
    return scores


def greedy_nms(points: np.ndarray, order: np.ndarray, radius: float) -> list[int]:
    """Visit ``order``; keep a point unless a kept point lies within ``radius`` (inclusive)."""
    if radius <= 0 or len(points) == 0:
        return list(order)
    tree = cKDTree(points)
    suppressed = np.zeros(len(points), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed[tree.query_ball_point(points[i], radius)] = True
    return keep


def detect_fast(img: GrayImage, p: FastParams = FastParams()) -> list[Keypoint]:
    if min(img.width, img.height) < 8:
        raise ImageTooSmallError(f"FAST detection needs at least 8x8 pixels, got {img.width}x{img.height}")
    scores = fast_scores(img.data, p.intensity_threshold, p.arc_length)
    ys, xs = np.nonzero(scores > 0)
    vals = scores[ys, xs]
    order = np.lexsort((xs, ys, -vals))
    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    keep = greedy_nms(pts, order, p.nms_radius)
    return [Keypoint(float(xs[i]), float(ys[i]), 1.0, float(vals[i]), FAST) for i in keep]


# ---------------------------------------------------------------------------
# cross-mapping fusion


def _in_bounds(pt, bounds: tuple[int, int] | None, margin: float) -> bool:
    if bounds is None:
        return True
    w, h = bounds
    return margin <= pt[0] < w - margin and margin <= pt[1] < h - margin


class _Occupancy:
    """Grid hash answering "is any kept point closer than r?" in O(1)."""

    def __init__(self, radius: float):
        self.r = radius
        self.cell = max(radius, 1e-9)
        self.grid: dict[tuple[int, int], list[tuple[float, float]]] = {}

    def _key(self, x, y):
        return int(math.floor(x / self.cell)), int(math.floor(y / self.cell))

    def conflicts(self, x: float, y: float) -> bool:
        if self.r <= 0:
            return False
        kx, ky = self._key(x, y)
        r2 = self.r * self.r
        for gx in (kx - 1, kx, kx + 1):
            for gy in (ky - 1, ky, ky + 1):
                for px, py in self.grid.get((gx, gy), ()):
                    if (px - x) ** 2 + (py - y) ** 2 < r2:
                        return True
        return False

    def add(self, x: float, y: float):
        self.grid.setdefault(self._key(x, y), []).append((x, y))


def joint_dedup(candidates: Iterable[tuple[Keypoint, Keypoint]], radius: float,
                kept: list[tuple[Keypoint, Keypoint]] | None = None) -> list[tuple[Keypoint, Keypoint]]:
    """Greedy pair selection: a pair survives only if neither side crowds a kept point."""
    out = list(kept or [])
    occ_a, occ_b = _Occupancy(radius), _Occupancy(radius)
    for ka, kb in out:
        occ_a.add(ka.x, ka.y)
        occ_b.add(kb.x, kb.y)
    for ka, kb in candidates:
        if occ_a.conflicts(ka.x, ka.y) or occ_b.conflicts(kb.x, kb.y):
            continue
        occ_a.add(ka.x, ka.y)
        occ_b.add(kb.x, kb.y)
        out.append((ka, kb))
    return out


def _mapped_copy(kp: Keypoint, t: AffineTransform) -> Keypoint:
    x, y = t.apply((kp.x, kp.y))
    return Keypoint(float(x), float(y), kp.scale * math.sqrt(abs(t.determinant)), kp.response, MAPPED)


def _candidate_pairs(kps_a, kps_b, t_ab, bounds_a, bounds_b, margin):
    """Every raw point paired with its image across the alignment, in priority order."""
    t_ba = t_ab.inverse()
    a_richer = len(kps_a) >= len(kps_b)
    cands = []
    for idx, ka in enumerate(kps_a):
        kb = _mapped_copy(ka, t_ab)
        cands.append(((-abs(ka.response), 0 if a_richer else 1, idx), ka, kb))
    for idx, kb in enumerate(kps_b):
        ka = _mapped_copy(kb, t_ba)
        cands.append(((-abs(kb.response), 1 if a_richer else 0, idx), ka, kb))
    cands.sort(key=lambda c: c[0])
    return [(ka, kb) for _, ka, kb in cands
            if _in_bounds(ka.xy, bounds_a, margin) and _in_bounds(kb.xy, bounds_b, margin)]


def cross_map_fuse(kps_a: Sequence[Keypoint], kps_b: Sequence[Keypoint], t_ab: AffineTransform,
                   dedup_radius: float = 3.0, bounds_a: tuple[int, int] | None = None,
                   bounds_b: tuple[int, int] | None = None, margin: float = 0.0
                   ) -> tuple[list[Keypoint], list[Keypoint]]:
    """Fuse two detection sets into index-aligned lists.

    The richer set (ties go to A) is mapped into the other image and merged with
    that image's own points, highest |response| first; a point closer than
    ``dedup_radius`` to an already kept point on either side is dropped together
    with its partner. Bounds are ``(width, height)`` (``None`` disables the check);
    ``margin`` shrinks them on every side.
    """
    pairs = joint_dedup(_candidate_pairs(kps_a, kps_b, t_ab, bounds_a, bounds_b, margin), dedup_radius)
    return [a for a, _ in pairs], [b for _, b in pairs]


def detect_pair(img_a: GrayImage, img_b: GrayImage, t_ab: AffineTransform,
                dog: DoGParams = DoGParams(), fast: FastParams = FastParams(),
                dedup_radius: float = 3.0, margin: float = 0.0,
                max_points: int | None = None) -> tuple[list[Keypoint], list[Keypoint]]:
    """Run both detectors on both images, fuse each across the alignment, then
    add the FAST pairs to the DoG pairs wherever they do not crowd them."""
    ba, bb = (img_a.width, img_a.height), (img_b.width, img_b.height)
    dog_pairs = joint_dedup(
        _candidate_pairs(detect_dog(img_a, dog), detect_dog(img_b, dog), t_ab, ba, bb, margin), dedup_radius)
    fast_cands = joint_dedup(
        _candidate_pairs(detect_fast(img_a, fast), detect_fast(img_b, fast), t_ab, ba, bb, margin), dedup_radius)
    pairs = joint_dedup(fast_cands, dedup_radius, kept=dog_pairs)
    if max_points is not None:
        pairs = pairs[:max_points]
    return [a for a, _ in pairs], [b for _, b in pairs]


def detect_combined(img: GrayImage, dog: DoGParams = DoGParams(), fast: FastParams = FastParams(),
                    dedup_radius: float = 3.0) -> list[Keypoint]:
    """Single-image union of DoG and FAST points (DoG first), without any cross-mapping."""
    pairs = joint_dedup(((k, k) for k in detect_dog(img, dog)), dedup_radius)
    pairs = joint_dedup(((k, k) for k in detect_fast(img, fast)), dedup_radius, kept=pairs)
    return [a for a, _ in pairs]

