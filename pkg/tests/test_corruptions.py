from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from niom.corruptions import (
    CorruptionKind,
    CorruptionSpec,
    Side,
    corrupt,
    corrupt_pair,
    derive_seed,
    disk_kernel,
    line_kernel,
    params,
    parse_table,
    severity_table,
)

KINDS = list(CorruptionKind)


def _image(seed=0, shape=(48, 64)):
    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.uniform(0, 1, shape + (3,)), (2, 2, 0))
    return (img - img.min()) / (img.max() - img.min())


@pytest.mark.parametrize("kind", KINDS)
def test_severity_zero_is_identity(kind):
    img = _image()
    out = corrupt(img, CorruptionSpec(kind, 0, 5))
    np.testing.assert_array_equal(out, img)
    assert out is not img


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("severity", [1, 5])
def test_output_range_shape_and_determinism(kind, severity):
    img = _image(1)
    spec = CorruptionSpec(kind, severity, 11)
    a, b = corrupt(img, spec), corrupt(img, spec)
    assert a.shape == img.shape
    assert a.min() >= 0 and a.max() <= 1
    np.testing.assert_array_equal(a, b)


def _test_set():
    rows, cols = np.mgrid[0:64, 0:64]
    wave = 0.5 + 0.4 * np.sin(rows / 5.0)[..., None] * np.cos(cols / 7.0)[..., None] * np.ones(3)
    return [_image(s, (64, 64)) for s in (2, 3, 4)] + [wave]


@pytest.mark.parametrize("kind", KINDS)
def test_severity_monotone_damage(kind):
    for i, img in enumerate(_test_set()):
        errs = [np.abs(corrupt(img, CorruptionSpec(kind, s, i)) - img).mean() for s in range(6)]
        assert errs[0] == 0 and errs[1] > 0
        assert all(b >= a for a, b in zip(errs, errs[1:])), errs


def test_pixelate_blocks_constant():
    img = _image(8, (60, 90))
    f = int(params("pixelate", 5)["factor"])
    out = corrupt(img, CorruptionSpec("pixelate", 5, 0))
    for y in range(0, 60, f):
        for x in range(0, 90, f):
            block = out[y:y + f, x:x + f]
            assert np.all(block == block[0, 0])


def test_gaussian_noise_variance():
    img = np.full((600, 600, 3), 0.5)
    for severity in range(1, 6):
        sigma = params("gaussian_noise", severity)["sigma"]
        noise = corrupt(img, CorruptionSpec("gaussian_noise", severity, 9)) - img
        assert noise.size >= 10**6
        assert noise.var() == pytest.approx(sigma**2, rel=0.05)


def test_thread_count_does_not_change_bytes():
    img = _image(4)
    specs = [CorruptionSpec(k, 3, i) for i, k in enumerate(KINDS)]
    with ThreadPoolExecutor(1) as one, ThreadPoolExecutor(8) as eight:
        serial = list(one.map(lambda s: corrupt(img, s), specs))
        parallel = list(eight.map(lambda s: corrupt(img, s), specs))
    for a, b in zip(serial, parallel):
        assert a.tobytes() == b.tobytes()


def test_different_seeds_differ():
    img = _image(5)
    a = corrupt(img, CorruptionSpec("shot_noise", 3, 1))
    b = corrupt(img, CorruptionSpec("shot_noise", 3, 2))
    assert not np.array_equal(a, b)


def test_pair_protocols():
    a, b = _image(6), _image(7)
    spec = CorruptionSpec("motion_blur", 4, 1)
    ca, cb = corrupt_pair("p0", a, b, spec, Side.A_ONLY)
    assert cb is b and not np.array_equal(ca, a)
    ca, cb = corrupt_pair("p0", a, b, spec, "b")
    assert ca is a and not np.array_equal(cb, b)
    same = corrupt_pair("p0", a, b, CorruptionSpec("fog", 0, 1), Side.BOTH)
    np.testing.assert_array_equal(same[0], a)
    np.testing.assert_array_equal(same[1], b)
    x = corrupt_pair("p0", a, b, CorruptionSpec("gaussian_noise", 3, 1), "both")
    y = corrupt_pair("p0", a, b, CorruptionSpec("gaussian_noise", 3, 1), "both")
    np.testing.assert_array_equal(x[0], y[0])
    np.testing.assert_array_equal(x[1], y[1])
    # each side draws its own noise
    noise_a, noise_b = x[0] - a, x[1] - b
    assert not np.allclose(noise_a, noise_b)


def test_spec_validation():
    with pytest.raises(ValueError):
        CorruptionSpec("gaussian_noise", 6)
    with pytest.raises(ValueError):
        CorruptionSpec("gaussian_noise", 2.5)
    with pytest.raises(ValueError):
        CorruptionSpec("not_a_kind", 1)
    with pytest.raises(ValueError):
        corrupt(np.zeros((16, 16, 3)), CorruptionSpec("fog", 1))
    with pytest.raises(ValueError):
        corrupt(np.zeros((64, 64)), CorruptionSpec("fog", 1))


def test_table_complete_and_parser():
    table = severity_table()
    assert len(table) == 15 * 5
    parsed = parse_table("# comment\ngaussian_noise 1 sigma=0.1  # tail\n")
    assert parsed == {(CorruptionKind.GAUSSIAN_NOISE, 1): {"sigma": 0.1}}
    with pytest.raises(ValueError, match="line 1"):
        parse_table("fog 1 f=abc")


def test_labels_unique():
    labels = [k.label for k in KINDS]
    assert len(set(labels)) == 15
    assert CorruptionKind.GLASS_BLUR.label == "Frosted Glass Blur"


def test_kernels_normalized():
    for r in (1, 2.5, 4):
        assert disk_kernel(r).sum() == pytest.approx(1.0)
    for length, angle in ((3, 0), (7, 45), (10, 120)):
        k = line_kernel(length, angle)
        assert k.sum() == pytest.approx(1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**64 - 1), st.text(max_size=10), st.integers(0, 1))
def test_derive_seed_range_and_stability(seed, pair_id, side):
    s = derive_seed(seed, pair_id, side)
    assert 0 <= s < 2**64
    assert s == derive_seed(seed, pair_id, side)
