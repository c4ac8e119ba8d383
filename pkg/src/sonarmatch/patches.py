"""Patch extraction, self-labelled pair construction, augmentation and the SMP1 file format."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .detect import Keypoint
from .errors import BoundaryError, DatasetError
from .imagecore import AffineTransform, GrayImage, sample_bilinear

DATASET_MAGIC = b"SMP1"


@dataclass(frozen=True, eq=False)
class Patch:
    """A ``(2n, 2m)`` window of intensities centred on keypoint ``origin``."""

    data: np.ndarray
    origin: int = -1

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[0] % 2 or arr.shape[1] % 2 or min(arr.shape) < 8:
            raise ValueError(f"patch sides must be even and >= 8, got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def size_w(self) -> int:
        return self.data.shape[1]

    @property
    def size_h(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Patch):
            return NotImplemented
        return self.origin == other.origin and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class SamplePair:
    patch_a: Patch
    patch_b: Patch
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.patch_a.data.shape != self.patch_b.data.shape:
            raise ValueError("both patches of a pair must have the same size")


@dataclass(frozen=True)
class AugmentConfig:
    noise_sigma: float = 0.0
    max_rotation: float = 0.0
    max_translation: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        lo, hi = self.scale_range
        if min(self.noise_sigma, self.max_rotation, self.max_translation, lo) < 0 or not lo <= 1 <= hi:
            raise ValueError("augment config needs non-negative values and scale_range lo <= 1 <= hi")

    def is_noop(self) -> bool:
        return (self.noise_sigma == 0 and self.max_rotation == 0 and self.max_translation == 0
                and self.scale_range == (1.0, 1.0))


def patch_window(kp: Keypoint, m: int, n: int) -> tuple[int, int, int, int]:
    """(x0, y0, x1, y1) half-open window around the rounded keypoint."""
    cx, cy = math.floor(kp.x + 0.5), math.floor(kp.y + 0.5)
    return cx - m, cy - n, cx + m, cy + n


def extract_patch(img: GrayImage, kp: Keypoint, m: int, n: int, origin: int = -1) -> Patch:
    x0, y0, x1, y1 = patch_window(kp, m, n)
    if x0 < 0 or y0 < 0 or x1 > img.width or y1 > img.height:
        raise BoundaryError(f"patch window [{x0},{x1})x[{y0},{y1}) leaves the {img.width}x{img.height} image")
    return Patch(img.data[y0:y1, x0:x1], origin)


def _try_extract(img, kp, m, n, origin):
    try:
        return extract_patch(img, kp, m, n, origin)
    except BoundaryError:
        return None


def random_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform permutation of ``range(n)`` with no fixed point (rejection sampling)."""
    if n < 2:
        raise DatasetError("a derangement needs at least 2 elements")
    idx = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == idx):
            return perm


def _near_miss(img_b: GrayImage, kp: Keypoint, m: int, n: int, rng: np.random.Generator):
    """A patch 1-3 patch widths away from ``kp`` in a random direction, if it fits."""
    for _ in range(8):
        angle = rng.uniform(0, 2 * math.pi)
        dist = rng.uniform(1.0, 3.0) * 2 * max(m, n)
        shifted = Keypoint(kp.x + dist * math.cos(angle), kp.y + dist * math.sin(angle), kp.scale,
                           kp.response, kp.source)
        patch = _try_extract(img_b, shifted, m, n, -1)
        if patch is not None:
            return patch
    return None


def build_dataset(img_a: GrayImage, img_b: GrayImage, fused_a: Sequence[Keypoint], fused_b: Sequence[Keypoint],
                  m: int, n: int, seed: int = 0, hard_negatives: bool = False) -> list[SamplePair]:
    """One positive and one negative pair per in-bounds correspondence, shuffled.

    Negatives pair ``A_i`` with ``B_sigma(i)`` for a random derangement ``sigma``;
    with ``hard_negatives`` a near-miss patch from around ``B_i`` is used instead
    whenever one fits in the image.
    """
    if len(fused_a) != len(fused_b):
        raise DatasetError("fused keypoint lists must be index-aligned")
    rng = np.random.default_rng(seed)
    survivors = []
    for i, (ka, kb) in enumerate(zip(fused_a, fused_b)):
        pa, pb = _try_extract(img_a, ka, m, n, i), _try_extract(img_b, kb, m, n, i)
        if pa is not None and pb is not None:
            survivors.append((pa, pb))
    if len(survivors) < 2:
        raise DatasetError(f"need at least 2 in-bounds correspondences, found {len(survivors)}")
    sigma = random_derangement(len(survivors), rng)
    pairs = []
    for j, (pa, pb) in enumerate(survivors):
        pairs.append(SamplePair(pa, pb, 1))
        negative = None
        if hard_negatives:
            negative = _near_miss(img_b, fused_b[pb.origin], m, n, rng)
        pairs.append(SamplePair(pa, negative if negative is not None else survivors[sigma[j]][1], 0))
    order = rng.permutation(len(pairs))
    return [pairs[k] for k in order]


def perturb_patch(data: np.ndarray, angle_deg: float = 0.0, shift: tuple[float, float] = (0.0, 0.0),
                  scale: float = 1.0, noise_sigma: float = 0.0,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Rotate/scale about the keypoint pixel ``(m, n)``, shift, then add clamped Gaussian noise."""
    h, w = data.shape
    out = np.asarray(data, dtype=np.float64)
    if angle_deg != 0.0 or scale != 1.0 or shift != (0.0, 0.0):
        t = AffineTransform.similarity(angle_deg, scale, shift[0], shift[1], center=(w // 2, h // 2))
        inv = t.inverse()
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        out = sample_bilinear(out, inv.a * xs + inv.b * ys + inv.tx, inv.c * xs + inv.d * ys + inv.ty)
    if noise_sigma > 0:
        out = out + rng.normal(0.0, noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0)


def augment_array(data: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.is_noop():
        return data
    angle = rng.uniform(-cfg.max_rotation, cfg.max_rotation) if cfg.max_rotation else 0.0
    shift = ((rng.uniform(-cfg.max_translation, cfg.max_translation),
              rng.uniform(-cfg.max_translation, cfg.max_translation)) if cfg.max_translation else (0.0, 0.0))
    lo, hi = cfg.scale_range
    scale = rng.uniform(lo, hi) if hi > lo else 1.0
    return perturb_patch(data, angle, shift, scale, cfg.noise_sigma, rng)


def augment_sample(s: SamplePair, cfg: AugmentConfig, seed: int | np.random.Generator = 0) -> SamplePair:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if cfg.is_noop():
        return s
    return SamplePair(Patch(augment_array(s.patch_a.data, cfg, rng), s.patch_a.origin),
                      Patch(augment_array(s.patch_b.data, cfg, rng), s.patch_b.origin), s.label)


def stack_pairs(pairs: Sequence[SamplePair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(N, h, w)`` arrays for both sides plus the ``(N,)`` label vector."""
    if not pairs:
        raise DatasetError("empty dataset")
    shapes = {p.patch_a.data.shape for p in pairs}
    if len(shapes) != 1:
        raise DatasetError(f"mixed patch sizes in one batch: {sorted(shapes)}")
    xa = np.stack([p.patch_a.data for p in pairs])
    xb = np.stack([p.patch_b.data for p in pairs])
    y = np.array([p.label for p in pairs], dtype=np.float64)
    return xa, xb, y


def save_dataset(pairs: Sequence[SamplePair], path: str | os.PathLike) -> None:
    xa, xb, y = stack_pairs(pairs)
    n, h, w = xa.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC + struct.pack("<III", n, w, h))
        for i in range(n):
            fh.write(struct.pack("<B", int(y[i])))
            fh.write(xa[i].astype("<f4").tobytes())
            fh.write(xb[i].astype("<f4").tobytes())


def load_dataset(path: str | os.PathLike) -> list[SamplePair]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != DATASET_MAGIC or len(raw) < 16:
        raise DatasetError(f"{path}: not an SMP1 dataset")
    n, w, h = struct.unpack("<III", raw[4:16])
    record = 1 + 2 * 4 * w * h
    if len(raw) != 16 + n * record:
        raise DatasetError(f"{path}: expected {16 + n * record} bytes, found {len(raw)}")
    pairs = []
    for i in range(n):
        off = 16 + i * record
        label = raw[off]
        a = np.frombuffer(raw, "<f4", w * h, off + 1).reshape(h, w)
        b = np.frombuffer(raw, "<f4", w * h, off + 1 + 4 * w * h).reshape(h, w)
        pairs.append(SamplePair(Patch(a, i), Patch(b, i), int(label)))
    return pairs
