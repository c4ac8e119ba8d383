"""Shared-weight Siamese patch network written directly on numpy.

Tower (the embedding map applied to each patch)::

    [conv3x3 -> ReLU -> maxpool2] * (len(channels) - 1) -> conv3x3 -> ReLU
    -> global average pool -> dense(embed_dim)

Head (the decision layer)::

    |e1 - e2| -> dense(head_hidden) -> ReLU -> dense(1) -> sigmoid

Both branches run through the *same* parameter arrays: the two patch batches
are concatenated and pushed through the tower once, so the backward pass sums
both branches' contributions into the single weight storage automatically.
Activations are NHWC.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DatasetError, ModelFormatError, ShapeMismatchError
from .patches import Patch, SamplePair, stack_pairs

MODEL_MAGIC = b"SMDL"
MODEL_VERSION = 1
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class ArchConfig:
    channels: tuple[int, ...] = (8, 16, 32)
    embed_dim: int = 64
    head_hidden: int = 32
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or min(self.channels) < 1 or min(self.embed_dim, self.head_hidden, self.in_channels) < 1:
            raise ValueError("architecture widths must be positive")

    @property
    def min_side(self) -> int:
        return 2 ** len(self.channels)

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in declaration (and serialization) order."""
        shapes = []
        c_in = self.in_channels
        for i, c in enumerate(self.channels, 1):
            shapes += [(f"conv{i}.w", (c, c_in, 3, 3)), (f"conv{i}.b", (c,))]
            c_in = c
        shapes += [("embed.w", (c_in, self.embed_dim)), ("embed.b", (self.embed_dim,)),
                   ("head1.w", (self.embed_dim, self.head_hidden)), ("head1.b", (self.head_hidden,)),
                   ("head2.w", (self.head_hidden, 1)), ("head2.b", (1,))]
        return shapes


TINY_ARCH = ArchConfig(channels=(2, 2, 2))


@dataclass(frozen=True)
class LossConfig:
    lambda_contrastive: float = 0.1
    margin: float = 1.0

    def __post_init__(self):
        if self.lambda_contrastive < 0 or not self.margin > 0:
            raise ValueError("need lambda_contrastive >= 0 and margin > 0")


class SiameseModel:
    """Tower and head parameters; exactly one copy of the tower weights exists."""

    def __init__(self, arch: ArchConfig, params: dict[str, np.ndarray]):
        expected = arch.param_shapes()
        if [k for k, _ in expected] != list(params):
            raise ShapeMismatchError("parameter names do not match the architecture")
        for name, shape in expected:
            if params[name].shape != shape:
                raise ShapeMismatchError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.arch = arch
        self.params = params

    @classmethod
    def init(cls, arch: ArchConfig = ArchConfig(), seed: int = 42, dtype=np.float32,
             bias_scale: float = 0.0) -> "SiameseModel":
        """He-uniform weights over fan-in; biases zero unless ``bias_scale`` asks for
        uniform(-bias_scale, bias_scale) (handy for gradient checks, where exact-zero
        pre-activations sit on a ReLU kink)."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in arch.param_shapes():
            if name.endswith(".b"):
                params[name] = rng.uniform(-bias_scale, bias_scale, shape).astype(dtype) if bias_scale \
                    else np.zeros(shape, dtype=dtype)
            else:
                fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
                limit = math.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-limit, limit, shape).astype(dtype)
        return cls(arch, params)

    @classmethod
    def zeros(cls, arch: ArchConfig = ArchConfig(), dtype=np.float32) -> "SiameseModel":
        return cls(arch, {name: np.zeros(shape, dtype=dtype) for name, shape in arch.param_shapes()})

    @property
    def dtype(self):
        return self.params["conv1.w"].dtype

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self, dtype=None) -> "SiameseModel":
        dtype = dtype or self.dtype
        return SiameseModel(self.arch, {k: v.astype(dtype, copy=True) for k, v in self.params.items()})

    def equals(self, other: "SiameseModel") -> bool:
        return self.arch == other.arch and all(
            self.params[k].dtype == other.params[k].dtype and np.array_equal(self.params[k], other.params[k])
            for k in self.params)

    # -- inference -----------------------------------------------------------

    def embed_batch(self, x: np.ndarray, chunk: int = 512) -> np.ndarray:
        x = self._check_input(x)
        out = [_tower_forward(self.params, self.arch, x[i:i + chunk])[0] for i in range(0, len(x), chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.arch.embed_dim), self.dtype)

    def decide_batch(self, e1: np.ndarray, e2: np.ndarray) -> np.ndarray:
        return _head_forward(self.params, e1, e2)[0]

    def predict(self, xa: np.ndarray, xb: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Match probability for each patch pair ``(xa[i], xb[i])``."""
        xa, xb = self._check_input(xa), self._check_input(xb)
        probs = []
        for i in range(0, len(xa), chunk):
            n = len(xa[i:i + chunk])
            e, _ = _tower_forward(self.params, self.arch, np.concatenate([xa[i:i + chunk], xb[i:i + chunk]]))
            probs.append(self.decide_batch(e[:n], e[n:]))
        return np.concatenate(probs) if probs else np.zeros(0)

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3:
            raise ShapeMismatchError(f"expected (N, h, w) patches, got shape {x.shape}")
        if min(x.shape[1:]) < self.arch.min_side:
            raise ShapeMismatchError(f"patch side must be >= {self.arch.min_side}, got {x.shape[1:]}")
        return x


# ---------------------------------------------------------------------------
# layers


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """3x3 'same' convolution (cross-correlation), NHWC in and out; returns (y, im2col matrix)."""
    n, h, wd, c = x.shape
    f = w.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).reshape(n * h * wd, c * 9)
    y = cols @ w.reshape(f, c * 9).T + b
    return y.reshape(n, h, wd, f), cols


def conv2d_backward(dy: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape):
    n, h, wd, c = x_shape
    f = w.shape[0]
    dyf = dy.reshape(-1, f)
    dw = (dyf.T @ cols).reshape(w.shape)
    db = dyf.sum(axis=0)
    dcols = (dyf @ w.reshape(f, c * 9)).reshape(n, h, wd, c, 3, 3)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dy.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + wd, :] += dcols[..., i, j]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def maxpool2_forward(x: np.ndarray):
    """2x2/stride-2 max pooling; odd trailing rows/columns are dropped."""
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x[:, :2 * h2, :2 * w2].reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    arg = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg


def maxpool2_backward(dy: np.ndarray, arg: np.ndarray, x_shape):
    n, h, w, c = x_shape
    h2, w2 = h // 2, w // 2
    dblocks = np.zeros((n, h2, w2, c, 4), dtype=dy.dtype)
    np.put_along_axis(dblocks, arg[..., None], dy[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, :2 * h2, :2 * w2] = dblocks.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
    return dx


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _tower_forward(params, arch: ArchConfig, x: np.ndarray):
    """x: (N, h, w) -> embeddings (N, embed_dim) plus the cache for backprop."""
    h = x[..., None]
    cache = []
    last = len(arch.channels)
    for i in range(1, last + 1):
        y, cols = conv2d_forward(h, params[f"conv{i}.w"], params[f"conv{i}.b"])
        a = np.maximum(y, 0)
        step = {"x_shape": h.shape, "cols": cols, "mask": y > 0}
        if i < last:
            pooled, arg = maxpool2_forward(a)
            step.update(pool_arg=arg, pool_shape=a.shape)
            a = pooled
        cache.append(step)
        h = a
    gap = h.mean(axis=(1, 2))
    cache.append({"gap_shape": h.shape, "gap": gap})
    emb = gap @ params["embed.w"] + params["embed.b"]
    return emb, cache


def _tower_backward(params, arch: ArchConfig, demb: np.ndarray, cache, grads: dict):
    gap_step = cache[-1]
    grads["embed.w"] = gap_step["gap"].T @ demb
    grads["embed.b"] = demb.sum(axis=0)
    dgap = demb @ params["embed.w"].T
    n, hh, ww, c = gap_step["gap_shape"]
    dh = np.broadcast_to(dgap[:, None, None, :] / (hh * ww), (n, hh, ww, c))
    for i in range(len(arch.channels), 0, -1):
        step = cache[i - 1]
        if "pool_arg" in step:
            dh = maxpool2_backward(dh, step["pool_arg"], step["pool_shape"])
        dy = dh * step["mask"]
        dh, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = conv2d_backward(
            dy, step["cols"], params[f"conv{i}.w"], step["x_shape"])


def _head_forward(params, e1, e2):
    diff = np.abs(e1 - e2)
    pre = diff @ params["head1.w"] + params["head1.b"]
    hidden = np.maximum(pre, 0)
    z = (hidden @ params["head2.w"] + params["head2.b"])[:, 0]
    return _sigmoid(z), (diff, pre, hidden)


# ---------------------------------------------------------------------------
# public single-sample operations


def embed(model: SiameseModel, patch: Patch | np.ndarray) -> np.ndarray:
    data = patch.data if isinstance(patch, Patch) else patch
    return model.embed_batch(np.asarray(data)[None])[0]


def energy(e1: Sequence[float], e2: Sequence[float]) -> float:
    """Euclidean distance between two embeddings."""
    e1, e2 = np.asarray(e1, dtype=np.float64), np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise ShapeMismatchError(f"embedding lengths differ: {e1.shape} vs {e2.shape}")
    return float(np.sqrt(np.sum((e1 - e2) ** 2)))


def decide(model: SiameseModel, e1, e2) -> float:
    e1 = np.asarray(e1, dtype=model.dtype)[None]
    e2 = np.asarray(e2, dtype=model.dtype)[None]
    return float(model.decide_batch(e1, e2)[0])


# ---------------------------------------------------------------------------
# loss


def _forward(model: SiameseModel, xa, xb, y, cfg: LossConfig) -> dict:
    params, dt = model.params, model.dtype
    xa, xb = model._check_input(xa), model._check_input(xb)
    y = np.asarray(y, dtype=dt)
    bsz = len(y)
    emb, cache = _tower_forward(params, model.arch, np.concatenate([xa, xb]))
    e1, e2 = emb[:bsz], emb[bsz:]
    p, (diff, pre, hidden) = _head_forward(params, e1, e2)
    lo, hi = dt.type(PROB_CLAMP), dt.type(1.0 - PROB_CLAMP)
    pc = np.clip(p, lo, hi)
    bce = -(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    delta = e1 - e2
    dist = np.sqrt(np.sum(delta * delta, axis=1))
    hinge = np.maximum(cfg.margin - dist, 0)
    contrast = y * dist ** 2 + (1 - y) * hinge ** 2
    loss = float(np.mean(bce + cfg.lambda_contrastive * contrast))
    return dict(loss=loss, p=p, y=y, bsz=bsz, cache=cache, diff=diff, pre=pre, hidden=hidden,
                delta=delta, dist=dist, hinge=hinge, lo=lo, hi=hi)


def _kink_pattern(f: dict) -> list[np.ndarray]:
    """Which side of every non-differentiable point the forward pass landed on."""
    pattern = []
    for step in f["cache"][:-1]:
        pattern.append(step["mask"])
        if "pool_arg" in step:
            pattern.append(step["pool_arg"])
    pattern += [f["pre"] > 0, np.sign(f["delta"]), f["hinge"] > 0, f["p"] > f["lo"], f["p"] < f["hi"]]
    return pattern


def forward_backward(model: SiameseModel, xa: np.ndarray, xb: np.ndarray, y: np.ndarray,
                     cfg: LossConfig = LossConfig(), need_grad: bool = True):
    """Return ``(mean loss, probabilities, grads)``; ``grads`` is None unless ``need_grad``.

    loss_i = BCE(clamp(p_i), y_i) + lambda * (y_i E_i^2 + (1 - y_i) max(0, margin - E_i)^2)
    with E_i the Euclidean distance between the two embeddings.
    """
    f = _forward(model, xa, xb, y, cfg)
    if not need_grad:
        return f["loss"], f["p"], None
    params, dt = model.params, model.dtype
    p, y, bsz, delta, dist, hinge = f["p"], f["y"], f["bsz"], f["delta"], f["dist"], f["hinge"]

    grads: dict[str, np.ndarray] = {}
    dz = np.where((p > f["lo"]) & (p < f["hi"]), p - y, 0).astype(dt) / bsz
    grads["head2.w"] = f["hidden"].T @ dz[:, None]
    grads["head2.b"] = np.array([dz.sum()], dtype=dt)
    dpre = (dz[:, None] @ params["head2.w"].T) * (f["pre"] > 0)
    grads["head1.w"] = f["diff"].T @ dpre
    grads["head1.b"] = dpre.sum(axis=0)
    de1 = (dpre @ params["head1.w"].T) * np.sign(delta)

    if cfg.lambda_contrastive:
        safe = np.where(dist > 0, dist, 1)
        coef = 2 * y - 2 * (1 - y) * hinge / safe * (dist > 0)
        de1 = de1 + (cfg.lambda_contrastive / bsz) * coef[:, None] * delta
    demb = np.concatenate([de1, -de1]).astype(dt)
    _tower_backward(params, model.arch, demb, f["cache"], grads)
    ordered = {name: grads[name].astype(dt, copy=False) for name in params}
    return f["loss"], p, ordered


def loss_and_grad(model: SiameseModel, batch: Sequence[SamplePair], cfg: LossConfig = LossConfig()):
    if not batch:
        raise DatasetError("loss_and_grad needs a non-empty batch")
    xa, xb, y = stack_pairs(batch)
    loss, _, grads = forward_backward(model, xa, xb, y, cfg)
    return loss, grads


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    """Per-layer worst relative error over the coordinates that were checked.

    When the +/-step probe lands on a different side of a kink (ReLU, max-pool
    winner, |e1 - e2|, hinge or probability clamp) than the unperturbed pass, the
    central difference is not a derivative estimate; such coordinates are retried
    at step/10 and step/100 (*refined*) and *skipped* if every probe crosses.
    """

    errors: dict[str, float]
    tol: float
    step: float
    checked: dict[str, int] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)
    refined: dict[str, int] = field(default_factory=dict)
    max_skip_fraction: float = 0.05

    @property
    def n_params(self) -> int:
        return sum(self.checked.values()) + sum(self.skipped.values())

    def layer_passed(self, layer: str) -> bool:
        total = self.checked.get(layer, 0) + self.skipped.get(layer, 0)
        too_many_skips = self.skipped.get(layer, 0) > self.max_skip_fraction * total
        return self.errors[layer] < self.tol and not too_many_skips

    @property
    def passed(self) -> bool:
        return all(self.layer_passed(k) for k in self.errors)

    @property
    def failing(self) -> list[str]:
        return [k for k in self.errors if not self.layer_passed(k)]

    def to_dict(self) -> dict:
        return {"step": self.step, "tol": self.tol, "n_params": self.n_params, "passed": self.passed,
                "layers": {k: {"max_relative_error": self.errors[k], "checked": self.checked.get(k, 0),
                               "refined_at_kink": self.refined.get(k, 0),
                               "skipped_at_kink": self.skipped.get(k, 0), "passed": self.layer_passed(k)}
                           for k in self.errors}}


def layer_of(param_name: str) -> str:
    return param_name.split(".", 1)[0]


def _same_pattern(p1, p2) -> bool:
    return all(np.array_equal(a, b) for a, b in zip(p1, p2))


def grad_check(model: SiameseModel, batch: Sequence[SamplePair], cfg: LossConfig = LossConfig(),
               step: float = 1e-4, tol: float = 1e-3, analytic: dict[str, np.ndarray] | None = None
               ) -> GradCheckReport:
    """Compare analytic gradients with central differences, in float64.

    ``analytic`` overrides the backprop gradients (used to confirm that a corrupted
    gradient is caught). Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    m64 = model.copy(np.float64)
    xa, xb, y = stack_pairs(batch)
    if analytic is None:
        _, _, analytic = forward_backward(m64, xa, xb, y, cfg)
    base_pattern = _kink_pattern(_forward(m64, xa, xb, y, cfg))
    errors: dict[str, float] = {}
    checked: dict[str, int] = {}
    skipped: dict[str, int] = {}
    refined: dict[str, int] = {}
    for name, arr in m64.params.items():
        layer = layer_of(name)
        flat = arr.reshape(-1)
        ana = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        worst = errors.get(layer, 0.0)
        for i in range(flat.size):
            num = None
            for k, h in enumerate((step, step / 10, step / 100)):
                orig = flat[i]
                flat[i] = orig + h
                fp = _forward(m64, xa, xb, y, cfg)
                flat[i] = orig - h
                fm = _forward(m64, xa, xb, y, cfg)
                flat[i] = orig
                if (_same_pattern(base_pattern, _kink_pattern(fp))
                        and _same_pattern(base_pattern, _kink_pattern(fm))):
                    num = (fp["loss"] - fm["loss"]) / (2 * h)
                    if k:
                        refined[layer] = refined.get(layer, 0) + 1
                    break
            if num is None:
                skipped[layer] = skipped.get(layer, 0) + 1
                continue
            worst = max(worst, abs(ana[i] - num) / max(abs(ana[i]), abs(num), 1e-8))
            checked[layer] = checked.get(layer, 0) + 1
        errors[layer] = worst
    return GradCheckReport(errors, tol, step, checked, skipped, refined)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def optimizer_step(model: SiameseModel, grads: dict[str, np.ndarray], state: AdamState, lr: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, applied to the model's arrays in place."""
    for name, p in model.params.items():
        if name not in grads or grads[name].shape != p.shape:
            raise ShapeMismatchError(f"gradient for {name} missing or misshapen")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in model.params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        if lr:
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return model, state


# ---------------------------------------------------------------------------
# serialization


def save_model(model: SiameseModel, path: str | os.PathLike) -> None:
    arch = model.arch
    header = MODEL_MAGIC + struct.pack("<B", MODEL_VERSION)
    header += struct.pack("<II", arch.in_channels, len(arch.channels))
    header += struct.pack(f"<{len(arch.channels)}I", *arch.channels)
    header += struct.pack("<II", arch.embed_dim, arch.head_hidden)
    with open(path, "wb") as fh:
        fh.write(header)
        for name, _ in arch.param_shapes():
            fh.write(model.params[name].astype("<f4").tobytes())


def load_model(path: str | os.PathLike) -> SiameseModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 5 or raw[4] != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported model version")
    try:
        in_ch, n_conv = struct.unpack_from("<II", raw, 5)
        off = 13
        if n_conv > 64:
            raise ModelFormatError(f"{path}: implausible layer count {n_conv}")
        channels = struct.unpack_from(f"<{n_conv}I", raw, off)
        off += 4 * n_conv
        embed_dim, head_hidden = struct.unpack_from("<II", raw, off)
        off += 8
    except struct.error:
        raise ModelFormatError(f"{path}: truncated header") from None
    arch = ArchConfig(tuple(channels), embed_dim, head_hidden, in_ch)
    params = {}
    for name, shape in arch.param_shapes():
        count = int(np.prod(shape))
        if off + 4 * count > len(raw):
            raise ModelFormatError(f"{path}: truncated while reading {name}")
        params[name] = np.frombuffer(raw, "<f4", count, off).reshape(shape).astype(np.float32)
        off += 4 * count
    if off != len(raw):
        raise ModelFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return SiameseModel(arch, params)
