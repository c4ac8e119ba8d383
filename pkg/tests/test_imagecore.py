import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sonarmatch.errors import MalformedHeaderError, PGMError, PixelCountError, SingularTransformError
from sonarmatch.imagecore import (AffineTransform, GrayImage, IntensityCurve, apply_intensity_curve, load_pgm,
                                  save_pgm, to_bytes, warp_affine)

images = arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                elements=st.floats(0.0, 1.0, allow_nan=False))


def test_gray_image_rejects_out_of_range():
    with pytest.raises(ValueError):
        GrayImage(np.array([[0.0, 1.5]]))
    with pytest.raises(ValueError):
        GrayImage(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        GrayImage.from_values(2, 2, [0.1, 0.2, 0.3])


def test_gray_image_is_read_only():
    img = GrayImage(np.zeros((2, 3)))
    assert (img.width, img.height) == (3, 2)
    with pytest.raises(ValueError):
        img.data[0, 0] = 1.0


def test_load_p2_normalizes(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_text("P2\n# comment line\n2 2\n255\n0 255\n128 64\n")
    img = load_pgm(p)
    assert np.allclose(img.data.ravel(), [0.0, 1.0, 128 / 255, 64 / 255])


def test_load_p5_with_comment(tmp_path):
    p = tmp_path / "b.pgm"
    p.write_bytes(b"P5 # c\n3 1 # dims\n100\n" + bytes([0, 50, 100]))
    assert np.allclose(load_pgm(p).data, [[0.0, 0.5, 1.0]])


@pytest.mark.parametrize("content,err", [
    (b"P7\n2 2\n255\n" + bytes(4), MalformedHeaderError),
    (b"P5\n2 x\n255\n" + bytes(4), MalformedHeaderError),
    (b"P5\n2 2\n300\n" + bytes(4), MalformedHeaderError),
    (b"P5\n2 2\n255\n" + bytes(3), PixelCountError),
    (b"P2\n2 2\n255\n1 2 3\n", PixelCountError),
    (b"P2\n1 1\n10\n11\n", PGMError),
])
def test_load_errors_are_distinct(tmp_path, content, err):
    p = tmp_path / "bad.pgm"
    p.write_bytes(content)
    with pytest.raises(err):
        load_pgm(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_pgm(tmp_path / "nope.pgm")


def test_save_zero_image_bytes(tmp_path):
    p = tmp_path / "z.pgm"
    save_pgm(GrayImage(np.zeros((4, 4))), p)
    raw = p.read_bytes()
    assert raw.startswith(b"P5")
    assert raw.endswith(bytes(16))
    assert load_pgm(p) == GrayImage(np.zeros((4, 4)))


def test_half_rounds_up():
    assert to_bytes(GrayImage(np.array([[0.5, 0.0, 1.0]]))).tolist() == [[128, 0, 255]]


@settings(max_examples=40, deadline=None)
@given(images)
def test_pgm_round_trip_within_quantization(tmp_path_factory, data):
    p = tmp_path_factory.mktemp("rt") / "x.pgm"
    img = GrayImage(data)
    save_pgm(img, p)
    back = load_pgm(p)
    assert back.shape == img.shape
    assert np.max(np.abs(back.data - img.data)) <= 1 / 510 + 1e-12


def test_singular_transform():
    with pytest.raises(SingularTransformError):
        AffineTransform(1, 2, 0, 2, 4, 0)
    with pytest.raises(ValueError):
        AffineTransform(0, 0, 0, 0, 0, 0)


def test_transform_inverse_and_compose():
    t = AffineTransform.similarity(17.0, 1.3, 4.0, -2.0, center=(10, 20))
    pts = np.random.default_rng(0).uniform(-50, 50, (20, 2))
    assert np.allclose(t.inverse().apply(t.apply(pts)), pts)
    assert np.allclose(t.compose(t.inverse()).matrix, np.eye(3))
    u = AffineTransform.translation(3, 4)
    assert np.allclose(u.compose(t).apply(pts), u.apply(t.apply(pts)))


def test_similarity_fixes_center():
    t = AffineTransform.similarity(30.0, 1.0, center=(5.0, 7.0))
    assert np.allclose(t.apply([5.0, 7.0]), [5.0, 7.0])


def test_warp_identity_is_exact():
    img = GrayImage(np.random.default_rng(1).random((9, 7)))
    assert warp_affine(img, AffineTransform.identity(), 7, 9) == img


def test_warp_integer_translation():
    data = np.random.default_rng(2).random((6, 8))
    out = warp_affine(GrayImage(data), AffineTransform.translation(3, 0), 8, 6).data
    assert np.array_equal(out[:, 3:], data[:, :5])
    assert np.all(out[:, :3] == 0)


def test_warp_bilinear_midpoint():
    data = np.zeros((2, 2))
    data[0, 1] = 1.0
    out = warp_affine(GrayImage(data), AffineTransform.translation(-0.5, 0), 2, 2).data
    assert out[0, 0] == pytest.approx(0.5)


def test_warp_round_trip_interior():
    rng = np.random.default_rng(3)
    from scipy.ndimage import gaussian_filter
    data = gaussian_filter(rng.random((64, 64)), 2.0)
    data = (data - data.min()) / (data.max() - data.min())
    t = AffineTransform.similarity(6.0, 1.0, 1.5, -2.0, center=(32, 32))
    back = warp_affine(warp_affine(GrayImage(data), t, 64, 64), t.inverse(), 64, 64).data
    # interior: points whose forward image stays 2px inside the frame
    ys, xs = np.mgrid[0:64, 0:64]
    fwd = t.apply(np.stack([xs.ravel(), ys.ravel()], 1))
    inside = np.all((fwd >= 2) & (fwd <= 61), axis=1).reshape(64, 64)
    inside &= (xs >= 2) & (xs <= 61) & (ys >= 2) & (ys <= 61)
    assert np.max(np.abs(back - data)[inside]) <= 0.05


def test_warp_singular_rejected():
    with pytest.raises(SingularTransformError):
        warp_affine(GrayImage(np.zeros((4, 4))), AffineTransform(1, 1, 0, 1, 1, 0), 4, 4)


def test_gamma_two_at_half():
    out = apply_intensity_curve(GrayImage(np.array([[0.5]])), IntensityCurve.gamma(2.0))
    assert out.data[0, 0] == pytest.approx(0.25)


def test_identity_curve_unchanged():
    img = GrayImage(np.random.default_rng(4).random((5, 5)))
    assert apply_intensity_curve(img, IntensityCurve.identity()) == img


curves = st.one_of(
    st.floats(0.2, 5.0).map(IntensityCurve.gamma),
    st.tuples(st.floats(0.5, 20.0), st.floats(0.0, 1.0)).map(lambda p: IntensityCurve("logistic", p)),
    st.tuples(st.floats(0.0, 1.0), st.floats(0.0, 1.0)).map(
        lambda p: IntensityCurve("piecewise-linear", (0.0, 0.0, 0.5, min(p), 1.0, max(p)))),
)


@settings(max_examples=60, deadline=None)
@given(images, curves)
def test_curves_stay_in_range_and_keep_order(data, curve):
    out = apply_intensity_curve(GrayImage(data), curve).data
    assert out.min() >= 0.0 and out.max() <= 1.0
    flat_in, flat_out = data.ravel(), out.ravel()
    order = np.argsort(flat_in, kind="stable")
    assert np.all(np.diff(flat_out[order]) >= -1e-12)


def test_curve_validation():
    with pytest.raises(ValueError):
        IntensityCurve.gamma(0.0)
    with pytest.raises(ValueError):
        IntensityCurve("piecewise-linear", (0.0, 0.5, 1.0, 0.2))
    with pytest.raises(ValueError):
        IntensityCurve("cubic", (1.0,))
    logistic = IntensityCurve("logistic", (8.0, 0.5))
    assert logistic(0.0) == pytest.approx(0.0) and logistic(1.0) == pytest.approx(1.0)
