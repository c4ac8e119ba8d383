import math
import types

import numpy as np
import pytest

from oracles import conv_same_loops
from sonarmatch.errors import DatasetError, ModelFormatError, ShapeMismatchError
from sonarmatch.net import (TINY_ARCH, AdamState, ArchConfig, LossConfig, SiameseModel, conv2d_forward, decide,
                            embed, energy, forward_backward, grad_check, load_model, loss_and_grad, maxpool2_forward,
                            optimizer_step, save_model)
from sonarmatch.patches import Patch, SamplePair


def tiny_batch(seed=0, side=8):
    rng = np.random.default_rng(seed)
    return [SamplePair(Patch(rng.random((side, side))), Patch(rng.random((side, side))), lab)
            for lab in (1, 0, 1, 0)]


@pytest.fixture(scope="module")
def tiny_model():
    return SiameseModel.init(TINY_ARCH, seed=3, bias_scale=0.1)


@pytest.fixture(scope="module")
def tiny_report(tiny_model):
    return grad_check(tiny_model, tiny_batch(), LossConfig(), step=1e-4, tol=1e-3)


def test_default_architecture_shapes():
    m = SiameseModel.init()
    shapes = dict(m.arch.param_shapes())
    assert shapes["conv1.w"] == (8, 1, 3, 3) and shapes["conv2.w"] == (16, 8, 3, 3)
    assert shapes["conv3.w"] == (32, 16, 3, 3) and shapes["embed.w"] == (32, 64)
    assert shapes["head1.w"] == (64, 32) and shapes["head2.w"] == (32, 1)
    assert all(not k.startswith(("tower_a", "tower_b")) for k in m.params)


@pytest.mark.parametrize("side", [8, 16, 32, 64])
def test_embedding_length_is_fixed(side):
    m = SiameseModel.init(seed=1)
    e = embed(m, Patch(np.random.default_rng(side).random((side, side))))
    assert e.shape == (64,)


def test_embed_rejects_tiny_patch():
    with pytest.raises(ShapeMismatchError):
        SiameseModel.init().embed_batch(np.zeros((1, 4, 4)))


def test_zero_model_embedding_and_decision():
    m = SiameseModel.zeros()
    e = embed(m, Patch(np.random.default_rng(0).random((16, 16))))
    assert np.all(e == 0)
    assert decide(m, e, e + 1) == 0.5


def test_identical_patches_identical_embeddings():
    m = SiameseModel.init(seed=2)
    p = Patch(np.random.default_rng(1).random((16, 16)))
    e1, e2 = embed(m, p), embed(m, Patch(p.data.copy()))
    assert np.array_equal(e1, e2)
    assert energy(e1, e2) == 0.0


def test_energy_examples_and_metric_axioms():
    v = np.zeros(64)
    v[:2] = (3, 4)
    assert energy(v, np.zeros(64)) == 5.0
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b, c = rng.normal(size=(3, 64))
        assert energy(a, b) >= 0
        assert energy(a, b) == energy(b, a)
        assert energy(a, c) <= energy(a, b) + energy(b, c) + 1e-12
    with pytest.raises(ShapeMismatchError):
        energy(np.zeros(3), np.zeros(4))


def test_decide_symmetric_and_in_open_interval():
    m = SiameseModel.init(seed=4, bias_scale=0.5)
    rng = np.random.default_rng(2)
    for _ in range(20):
        e1, e2 = rng.normal(size=(2, 64)) * 3
        p = decide(m, e1, e2)
        assert p == decide(m, e2, e1)
        assert 0 < p < 1


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n, h, w, c, f = (int(v) for v in rng.integers(1, [3, 7, 7, 4, 4], endpoint=True))
        x = rng.normal(size=(n, h, w, c))
        k = rng.normal(size=(f, c, 3, 3))
        b = rng.normal(size=f)
        y, _ = conv2d_forward(x, k, b)
        assert np.max(np.abs(y - conv_same_loops(x, k, b))) <= 1e-6


def test_maxpool_crops_odd_edges():
    x = np.arange(5 * 5, dtype=float).reshape(1, 5, 5, 1)
    y, _ = maxpool2_forward(x)
    assert y[0, :, :, 0].tolist() == [[6.0, 8.0], [16.0, 18.0]]


def test_gradcheck_passes_every_layer(tiny_report):
    assert set(tiny_report.errors) == {"conv1", "conv2", "conv3", "embed", "head1", "head2"}
    assert tiny_report.passed, tiny_report.to_dict()
    assert all(e < 1e-3 for e in tiny_report.errors.values())


def test_gradcheck_catches_scaled_layer(tiny_model):
    batch = tiny_batch()
    m64 = tiny_model.copy(np.float64)
    xa = np.stack([s.patch_a.data for s in batch])
    xb = np.stack([s.patch_b.data for s in batch])
    _, _, grads = forward_backward(m64, xa, xb, np.array([s.label for s in batch], float))
    grads = {k: v * 1.01 if k.startswith("conv2") else v for k, v in grads.items()}
    report = grad_check(tiny_model, batch, analytic=grads)
    assert report.failing == ["conv2"]


def test_gradcheck_step_sensitivity_is_mild(tiny_model, tiny_report):
    fine = grad_check(tiny_model, tiny_batch(), step=1e-5)
    assert fine.passed
    for layer, coarse_err in tiny_report.errors.items():
        assert fine.errors[layer] <= 10 * max(coarse_err, 1e-6)


def test_gradcheck_passes_across_seeds():
    for seed in range(2):
        model = SiameseModel.init(TINY_ARCH, seed=10 + seed, bias_scale=0.1)
        assert grad_check(model, tiny_batch(seed + 5), LossConfig(lambda_contrastive=0.5)).passed


def test_pure_classification_loss_gradcheck():
    model = SiameseModel.init(TINY_ARCH, seed=21, bias_scale=0.1)
    assert grad_check(model, tiny_batch(9), LossConfig(lambda_contrastive=0.0)).passed


def test_loss_vanishes_for_confident_identical_positive():
    m = SiameseModel.zeros(TINY_ARCH, dtype=np.float64)
    m.params["head2.b"][:] = 40.0
    p = Patch(np.random.default_rng(0).random((8, 8)))
    loss, _ = loss_and_grad(m, [SamplePair(p, p, 1)])
    assert 0 <= loss < 1e-6


def test_hinge_saturates_beyond_margin():
    m = SiameseModel.init(TINY_ARCH, seed=5, dtype=np.float64)
    rng = np.random.default_rng(1)
    batch = [SamplePair(Patch(np.zeros((8, 8))), Patch(rng.random((8, 8))), 0)]
    xa = np.stack([s.patch_a.data for s in batch])
    xb = np.stack([s.patch_b.data for s in batch])
    e = m.embed_batch(np.concatenate([xa, xb]))
    margin = 0.5 * float(np.linalg.norm(e[0] - e[1]))
    assert margin > 0
    with_term, _ = loss_and_grad(m, batch, LossConfig(0.1, margin))
    without, _ = loss_and_grad(m, batch, LossConfig(0.0, margin))
    assert with_term == without


def test_loss_is_finite_at_extremes():
    m = SiameseModel.zeros(TINY_ARCH, dtype=np.float64)
    m.params["head2.b"][:] = 1e4
    batch = [SamplePair(Patch(np.zeros((8, 8))), Patch(np.ones((8, 8))), 0)]
    loss, grads = loss_and_grad(m, batch)
    # clamped BCE plus the hinge at E = 0: lambda * margin**2
    assert math.isfinite(loss) and loss == pytest.approx(-math.log(1e-7) + 0.1, rel=1e-6)
    assert all(np.all(np.isfinite(g)) for g in grads.values())


def test_loss_errors():
    m = SiameseModel.init(TINY_ARCH)
    with pytest.raises(DatasetError):
        loss_and_grad(m, [])
    mixed = tiny_batch() + [SamplePair(Patch(np.zeros((10, 10))), Patch(np.zeros((10, 10))), 1)]
    with pytest.raises(DatasetError):
        loss_and_grad(m, mixed)


def scalar_adam(w, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2.0 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return w


def test_adam_matches_scalar_recursion():
    model = types.SimpleNamespace(params={"w": np.array([1.0])})
    state = AdamState()
    for _ in range(200):
        optimizer_step(model, {"w": 2.0 * model.params["w"]}, state, lr=0.1)
    expected = scalar_adam(1.0, 200, 0.1)
    assert abs(expected) < 0.01
    assert model.params["w"][0] == pytest.approx(expected, abs=1e-12)


def test_adam_zero_lr_and_determinism():
    m = SiameseModel.init(TINY_ARCH, seed=1)
    before = m.copy()
    _, grads = loss_and_grad(m, tiny_batch())
    optimizer_step(m, grads, AdamState(), lr=0.0)
    assert m.equals(before)
    m1, m2 = before.copy(), before.copy()
    optimizer_step(m1, grads, AdamState(), lr=1e-2)
    optimizer_step(m2, grads, AdamState(), lr=1e-2)
    assert m1.equals(m2) and not m1.equals(before)


def test_adam_rejects_misshapen_gradients():
    m = SiameseModel.init(TINY_ARCH)
    with pytest.raises(ShapeMismatchError):
        optimizer_step(m, {"conv1.w": np.zeros(3)}, AdamState())


def test_tower_shared_after_update():
    m = SiameseModel.init(TINY_ARCH, seed=2)
    _, grads = loss_and_grad(m, tiny_batch())
    optimizer_step(m, grads, AdamState(), lr=1e-2)
    p = np.random.default_rng(3).random((1, 8, 8))
    q = np.random.default_rng(4).random((1, 8, 8))
    # the same patch in either branch position yields the same embedding
    assert np.array_equal(m.embed_batch(np.concatenate([p, q]))[0], m.embed_batch(np.concatenate([q, p]))[1])


def test_model_round_trip(tmp_path):
    m = SiameseModel.init(seed=9, bias_scale=0.05)
    path = tmp_path / "m.smdl"
    save_model(m, path)
    back = load_model(path)
    assert back.equals(m)
    p = Patch(np.random.default_rng(0).random((32, 32)))
    assert np.array_equal(embed(back, p), embed(m, p))
    raw = path.read_bytes()
    assert raw[:4] == b"SMDL" and raw[4] == 1


def test_model_file_errors(tmp_path):
    m = SiameseModel.init(TINY_ARCH)
    path = tmp_path / "m.smdl"
    save_model(m, path)
    raw = path.read_bytes()
    bad = tmp_path / "bad.smdl"
    for blob in (raw[:-4], raw[:10], b"XXXX" + raw[4:], raw[:4] + b"\x09" + raw[5:], raw + b"\x00"):
        bad.write_bytes(blob)
        with pytest.raises(ModelFormatError):
            load_model(bad)


def test_arch_validation():
    with pytest.raises(ValueError):
        ArchConfig(channels=())
    with pytest.raises(ShapeMismatchError):
        SiameseModel(TINY_ARCH, {})
