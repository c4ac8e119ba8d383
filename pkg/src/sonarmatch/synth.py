"""Synthetic side-scan-style survey pairs with known geometry and tonal differences.

The seafloor is multi-octave value noise with scattered bright targets that cast
dark acoustic shadows along the range (horizontal) axis. A survey pair renders the
same seafloor twice: once as captured, once through an affine transform, each pass
with its own intensity curve, insonification ramp, speckle and sensor noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ImageTooSmallError
from .imagecore import AffineTransform, GrayImage, IntensityCurve, warp_array

OCTAVES = 4
PERSISTENCE = 0.5
BASE_CELL = 32
SHADING_GAIN = 0.3
MIN_SIDE = 16
SHADOW_EDGE = 2.0
FOOTPRINT_SIGMA = 0.8


@dataclass(frozen=True)
class SurveyConfig:
    seed: int = 42
    width: int = 256
    height: int = 256
    transform: AffineTransform = field(default_factory=AffineTransform.identity)
    curve_a: IntensityCurve = field(default_factory=IntensityCurve.identity)
    curve_b: IntensityCurve = field(default_factory=IntensityCurve.identity)
    speckle_strength: float = 0.0
    shading_direction: str = "none"
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.speckle_strength < 0 or self.noise_sigma < 0:
            raise ValueError("speckle_strength and noise_sigma must be non-negative")
        if self.shading_direction not in ("left", "right", "none"):
            raise ValueError(f"shading_direction must be left, right or none, got {self.shading_direction!r}")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "width": self.width,
            "height": self.height,
            "transform": list(self.transform.coefficients),
            "curve_a": {"kind": self.curve_a.kind, "params": list(self.curve_a.params)},
            "curve_b": {"kind": self.curve_b.kind, "params": list(self.curve_b.params)},
            "speckle_strength": self.speckle_strength,
            "shading_direction": self.shading_direction,
            "noise_sigma": self.noise_sigma,
        }


def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def _value_noise(rng: np.random.Generator, width: int, height: int, cell: int) -> np.ndarray:
    gx, gy = width // cell + 2, height // cell + 2
    lattice = rng.random((gy, gx))
    xs = np.arange(width) / cell
    ys = np.arange(height) / cell
    x0, y0 = xs.astype(int), ys.astype(int)
    u, v = _smoothstep(xs - x0), _smoothstep(ys - y0)
    top = lattice[y0][:, x0] * (1 - u) + lattice[y0][:, x0 + 1] * u
    bottom = lattice[y0 + 1][:, x0] * (1 - u) + lattice[y0 + 1][:, x0 + 1] * u
    return top * (1 - v)[:, None] + bottom * v[:, None]


def gen_seafloor(seed: int, width: int, height: int) -> GrayImage:
    if width < MIN_SIDE or height < MIN_SIDE:
        raise ImageTooSmallError(f"seafloor needs at least {MIN_SIDE}x{MIN_SIDE} pixels, got {width}x{height}")
    rng = np.random.default_rng(seed)
    terrain = np.zeros((height, width))
    amp, total = 1.0, 0.0
    for k in range(OCTAVES):
        terrain += amp * _value_noise(rng, width, height, max(BASE_CELL >> k, 1))
        total += amp
        amp *= PERSISTENCE
    terrain /= total
    lo, hi = terrain.min(), terrain.max()
    terrain = 0.2 + 0.5 * (terrain - lo) / max(hi - lo, 1e-12)

    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    n_targets = max(1, (width * height) // 2048)
    for _ in range(n_targets):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        sigma = rng.uniform(2.0, 4.0)
        amplitude = rng.uniform(0.25, 0.5)
        # shadow falls away from the track, i.e. toward the nearer image edge in x
        direction = 1.0 if cx >= width / 2 else -1.0
        length = rng.uniform(3.0, 7.0) * sigma
        along = (xs - cx) * direction
        # soft-edged mask so the texture survives bilinear resampling
        shadow = (np.clip((along - sigma) / SHADOW_EDGE, 0, 1) * np.clip((sigma + length - along) / SHADOW_EDGE, 0, 1)
                  * np.clip((1.2 * sigma - np.abs(ys - cy)) / SHADOW_EDGE, 0, 1))
        terrain = terrain * (1.0 - shadow * (1.0 - rng.uniform(0.25, 0.5)))
        terrain += amplitude * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma ** 2))
    # beam-footprint blur; also keeps the texture resampling-friendly
    return GrayImage(np.clip(gaussian_filter(terrain, FOOTPRINT_SIGMA, mode="nearest"), 0.0, 1.0))


def shading_ramp(width: int, direction: str) -> np.ndarray:
    """Horizontal gain profile, brighter on the ``direction`` side by +/-30%."""
    if direction == "none":
        return np.ones(width)
    ramp = np.linspace(1.0 + SHADING_GAIN, 1.0 - SHADING_GAIN, width)
    return ramp if direction == "left" else ramp[::-1]


def add_speckle(values: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative unit-mean speckle: ``(1 - s) + s * Exp(1)``."""
    if strength == 0:
        return values
    return values * ((1.0 - strength) + strength * rng.standard_exponential(values.shape))


def _render_pass(values: np.ndarray, curve: IntensityCurve, direction: str, cfg: SurveyConfig,
                 rng: np.random.Generator) -> GrayImage:
    out = curve(values)
    out = out * shading_ramp(out.shape[1], direction)[None, :]
    out = add_speckle(out, cfg.speckle_strength, rng)
    if cfg.noise_sigma > 0:
        out = out + rng.normal(0.0, cfg.noise_sigma, out.shape)
    return GrayImage(np.clip(out, 0.0, 1.0))


_OPPOSITE = {"left": "right", "right": "left", "none": "none"}


def make_survey_pair(base: GrayImage, cfg: SurveyConfig) -> tuple[GrayImage, GrayImage, AffineTransform]:
    """Render two passes over ``base``; the returned transform maps A pixels to B pixels."""
    t = cfg.transform
    rng = np.random.default_rng(cfg.seed)
    img_a = _render_pass(base.data, cfg.curve_a, cfg.shading_direction, cfg, rng)
    warped = np.clip(warp_array(base.data, t, base.width, base.height), 0.0, 1.0)
    img_b = _render_pass(warped, cfg.curve_b, _OPPOSITE[cfg.shading_direction], cfg, rng)
    return img_a, img_b, t


def random_survey_transform(rng: np.random.Generator, width: int, height: int,
                            max_rotation: float = 8.0, max_shift: float = 12.0) -> AffineTransform:
    """Small rotation about the image center plus a shift, as left by imperfect track repeat."""
    return AffineTransform.similarity(
        angle_deg=rng.uniform(-max_rotation, max_rotation),
        tx=rng.uniform(-max_shift, max_shift),
        ty=rng.uniform(-max_shift, max_shift),
        center=((width - 1) / 2, (height - 1) / 2),
    )
