"""Grayscale images, PGM IO, affine warping and monotone intensity curves."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import MalformedHeaderError, PGMError, PixelCountError, SingularTransformError

_DET_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-channel raster with intensities in [0, 1].

    ``data`` is a read-only ``(height, width)`` float64 array in row-major order.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"GrayImage needs a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("GrayImage intensities must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_values(cls, width: int, height: int, values: Sequence[float]) -> "GrayImage":
        values = np.asarray(values, dtype=np.float64)
        if values.size != width * height:
            raise ValueError(f"expected {width * height} values, got {values.size}")
        return cls(values.reshape(height, width))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None


@dataclass(frozen=True)
class AffineTransform:
    """Maps ``(x, y)`` to ``(a*x + b*y + tx, c*x + d*y + ty)``."""

    a: float = 1.0
    b: float = 0.0
    tx: float = 0.0
    c: float = 0.0
    d: float = 1.0
    ty: float = 0.0

    def __post_init__(self):
        for name in ("a", "b", "tx", "c", "d", "ty"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise SingularTransformError(f"non-finite coefficient {name}={value}")
            object.__setattr__(self, name, value)
        if abs(self.determinant) < _DET_EPS:
            raise SingularTransformError(f"transform is singular (det={self.determinant:g})")

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls()

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineTransform":
        return cls(1.0, 0.0, tx, 0.0, 1.0, ty)

    @classmethod
    def similarity(cls, angle_deg: float = 0.0, scale: float = 1.0, tx: float = 0.0, ty: float = 0.0,
                   center: tuple[float, float] = (0.0, 0.0)) -> "AffineTransform":
        """Rotation by ``angle_deg`` and isotropic ``scale`` about ``center``, then a shift."""
        th = math.radians(angle_deg)
        ca, sa = scale * math.cos(th), scale * math.sin(th)
        cx, cy = center
        return cls(ca, -sa, cx - ca * cx + sa * cy + tx, sa, ca, cy - sa * cx - ca * cy + ty)

    @classmethod
    def from_matrix(cls, m) -> "AffineTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[0, 0], m[0, 1], m[0, 2], m[1, 0], m[1, 1], m[1, 2])

    @property
    def coefficients(self) -> tuple[float, float, float, float, float, float]:
        return (self.a, self.b, self.tx, self.c, self.d, self.ty)

    @property
    def determinant(self) -> float:
        return self.a * self.d - self.b * self.c

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a, self.b, self.tx], [self.c, self.d, self.ty], [0.0, 0.0, 1.0]])

    def is_identity(self) -> bool:
        return self.coefficients == (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)

    def inverse(self) -> "AffineTransform":
        det = self.determinant
        ia, ib = self.d / det, -self.b / det
        ic, id_ = -self.c / det, self.a / det
        return AffineTransform(ia, ib, -(ia * self.tx + ib * self.ty), ic, id_, -(ic * self.tx + id_ * self.ty))

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """Return ``self o other`` (apply ``other`` first)."""
        return AffineTransform.from_matrix(self.matrix @ other.matrix)

    def apply(self, points) -> np.ndarray:
        """Map an ``(N, 2)`` array (or a single ``(2,)`` point) of ``(x, y)`` coordinates."""
        pts = np.asarray(points, dtype=np.float64)
        x, y = pts[..., 0], pts[..., 1]
        return np.stack([self.a * x + self.b * y + self.tx, self.c * x + self.d * y + self.ty], axis=-1)


@dataclass(frozen=True)
class IntensityCurve:
    """Monotone non-decreasing map of [0, 1] into [0, 1].

    kinds:
      * ``gamma``: ``params = (gamma,)``, ``v ** gamma``
      * ``piecewise-linear``: ``params = (x0, y0, x1, y1, ...)`` with increasing x and
        non-decreasing y, covering [0, 1]
      * ``logistic``: ``params = (gain, midpoint)``, a sigmoid rescaled so 0 -> 0 and 1 -> 1
    """

    kind: str = "gamma"
    params: tuple[float, ...] = field(default=(1.0,))

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        p = self.params
        if self.kind == "gamma":
            if len(p) != 1 or not p[0] > 0:
                raise ValueError("gamma curve needs one positive exponent")
        elif self.kind == "piecewise-linear":
            if len(p) < 4 or len(p) % 2:
                raise ValueError("piecewise-linear curve needs at least two (x, y) knots")
            xs, ys = np.array(p[0::2]), np.array(p[1::2])
            if np.any(np.diff(xs) <= 0) or np.any(np.diff(ys) < 0):
                raise ValueError("piecewise-linear knots must be increasing in x and non-decreasing in y")
            if xs[0] > 0 or xs[-1] < 1 or ys.min() < 0 or ys.max() > 1:
                raise ValueError("piecewise-linear knots must cover [0, 1] with y in [0, 1]")
        elif self.kind == "logistic":
            if len(p) != 2 or not p[0] > 0:
                raise ValueError("logistic curve needs (gain > 0, midpoint)")
        else:
            raise ValueError(f"unknown curve kind {self.kind!r}")

    @classmethod
    def identity(cls) -> "IntensityCurve":
        return cls("gamma", (1.0,))

    @classmethod
    def gamma(cls, g: float) -> "IntensityCurve":
        return cls("gamma", (g,))

    def is_identity(self) -> bool:
        return self.kind == "gamma" and self.params == (1.0,)

    def __call__(self, values) -> np.ndarray:
        v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
        if self.kind == "gamma":
            out = v ** self.params[0]
        elif self.kind == "piecewise-linear":
            out = np.interp(v, self.params[0::2], self.params[1::2])
        else:
            gain, mid = self.params
            lo = _sigmoid(-gain * mid)
            hi = _sigmoid(gain * (1.0 - mid))
            out = (_sigmoid(gain * (v - mid)) - lo) / (hi - lo)
        return np.clip(out, 0.0, 1.0)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def apply_intensity_curve(img: GrayImage, curve: IntensityCurve) -> GrayImage:
    if curve.is_identity():
        return img
    return GrayImage(curve(img.data))


def _read_header(raw: bytes) -> tuple[str, int, int, int, int]:
    """Return (magic, width, height, maxval, offset of first pixel byte)."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise MalformedHeaderError("truncated PGM header")
        if raw[pos:pos + 1] == b"#":
            end = raw.find(b"\n", pos)
            pos = len(raw) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(raw[start:pos])
    magic = tokens[0].decode("ascii", "replace")
    if magic not in ("P2", "P5"):
        raise MalformedHeaderError(f"unsupported PGM magic {magic!r} (expected P2 or P5)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise MalformedHeaderError(f"non-integer header field: {exc}") from None
    if width <= 0 or height <= 0:
        raise MalformedHeaderError(f"invalid dimensions {width}x{height}")
    if not 0 < maxval <= 255:
        raise MalformedHeaderError(f"maxval must be in 1..255, got {maxval}")
    # exactly one whitespace byte separates maxval from P5 pixel data
    return magic, width, height, maxval, pos + 1


def load_pgm(path: str | os.PathLike) -> GrayImage:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, width, height, maxval, offset = _read_header(raw)
    n = width * height
    if magic == "P5":
        body = raw[offset:]
        if len(body) != n:
            raise PixelCountError(f"expected {n} pixel bytes, found {len(body)}")
        pixels = np.frombuffer(body, dtype=np.uint8).astype(np.float64)
    else:
        text = raw[offset - 1:]
        lines = [ln.split(b"#", 1)[0] for ln in text.splitlines()]
        try:
            pixels = np.array([int(t) for ln in lines for t in ln.split()], dtype=np.float64)
        except ValueError as exc:
            raise PGMError(f"non-integer pixel value: {exc}") from None
        if pixels.size != n:
            raise PixelCountError(f"expected {n} pixel values, found {pixels.size}")
    if pixels.size and pixels.max() > maxval:
        raise PGMError(f"pixel value {int(pixels.max())} exceeds maxval {maxval}")
    return GrayImage((pixels / maxval).reshape(height, width))


def to_bytes(img: GrayImage) -> np.ndarray:
    """Quantize to 0..255 with round-half-up."""
    return np.floor(img.data * 255.0 + 0.5).astype(np.uint8)


def save_pgm(img: GrayImage, path: str | os.PathLike) -> None:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(to_bytes(img).tobytes())


def sample_bilinear(src: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Bilinear samples of ``src`` at float coordinates; taps outside the array read 0."""
    h, w = src.shape
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros(np.shape(sx), dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = np.where(ok, src[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)], 0.0)
            out += wx * wy * vals
    return out


def warp_array(src: np.ndarray, t: AffineTransform, out_w: int, out_h: int) -> np.ndarray:
    if t.is_identity() and src.shape == (out_h, out_w):
        return np.array(src, dtype=np.float64)
    inv = t.inverse()
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    sx = inv.a * xs + inv.b * ys + inv.tx
    sy = inv.c * xs + inv.d * ys + inv.ty
    return sample_bilinear(src, sx, sy)


def warp_affine(img: GrayImage, t: AffineTransform, out_w: int, out_h: int) -> GrayImage:
    """Resample ``img`` so that output pixel p shows source location ``t^-1(p)``."""
    return GrayImage(np.clip(warp_array(img.data, t, out_w, out_h), 0.0, 1.0))
