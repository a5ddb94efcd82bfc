import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from niom import formats
from niom.heatmap import DetectionBox, Heatmap, aggregate, load_heatmap, resample, sample, sample_many, synth_heatmap


def _pgm(path, pixels):
    h, w = pixels.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.astype(np.uint8).tobytes())


def test_load_identity_resample(tmp_path):
    grid = np.array([[0.0, 0.5], [0.5, 1.0]])
    formats.write_nioh(tmp_path / "h.nioh", grid)
    np.testing.assert_array_equal(load_heatmap(tmp_path / "h.nioh", (2, 2)).values, grid)


def test_load_pgm_normalizes(tmp_path):
    _pgm(tmp_path / "h.pgm", np.array([[0, 255]]))
    np.testing.assert_array_equal(load_heatmap(tmp_path / "h.pgm", (2, 1)).values, [[0.0, 1.0]])


def test_load_constant_extension(tmp_path):
    formats.write_nioh(tmp_path / "h.nioh", np.array([[0.7]]))
    np.testing.assert_allclose(load_heatmap(tmp_path / "h.nioh", (4, 4)).values, np.full((4, 4), 0.7), atol=1e-7)


def test_load_clamps_and_rejects(tmp_path):
    formats.write_nioh(tmp_path / "h.nioh", np.array([[-1.0, 2.0]]))
    np.testing.assert_array_equal(load_heatmap(tmp_path / "h.nioh", (2, 1)).values, [[0.0, 1.0]])
    formats.write_nioh(tmp_path / "nan.nioh", np.array([[np.nan]]))
    with pytest.raises(formats.FormatError):
        load_heatmap(tmp_path / "nan.nioh", (2, 2))
    with pytest.raises(FileNotFoundError):
        load_heatmap(tmp_path / "missing.nioh", (2, 2))
    (tmp_path / "junk").write_bytes(b"junkjunk")
    with pytest.raises(formats.FormatError):
        load_heatmap(tmp_path / "junk", (2, 2))


def test_resample_stays_in_range():
    rng = np.random.default_rng(0)
    out = resample(rng.uniform(0, 1, (7, 5)), (13, 3))
    assert out.shape == (3, 13)
    assert out.min() >= 0 and out.max() <= 1


def test_synth_peak_and_empty():
    h = synth_heatmap([DetectionBox(10, 20, 30, 40, 1.0)], (64, 64))
    assert h.values[30, 20] == pytest.approx(1.0)
    assert np.all(synth_heatmap([], (8, 6)).values == 0)
    assert synth_heatmap([], (8, 6)).values.shape == (6, 8)


def test_synth_max_of_two_boxes():
    a, b = DetectionBox(5, 5, 30, 30, 0.3), DetectionBox(15, 10, 50, 40, 0.7)
    both = synth_heatmap([a, b], (64, 48)).values
    np.testing.assert_array_equal(both, np.maximum(synth_heatmap([a], (64, 48)).values,
                                                   synth_heatmap([b], (64, 48)).values))


def test_degenerate_boxes_rejected():
    with pytest.raises(ValueError):
        DetectionBox(5, 5, 5, 10)
    with pytest.raises(ValueError):
        synth_heatmap([DetectionBox(100, 100, 120, 120)], (50, 50))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 40), st.floats(0, 40), st.floats(2, 20), st.floats(2, 20),
                          st.floats(0, 1)), min_size=1, max_size=5), st.randoms())
def test_synth_order_invariant(raw, random):
    boxes = [DetectionBox(x, y, x + w, y + h, s) for x, y, w, h, s in raw]
    shuffled = boxes[:]
    random.shuffle(shuffled)
    np.testing.assert_array_equal(synth_heatmap(boxes, (48, 48)).values, synth_heatmap(shuffled, (48, 48)).values)


def test_aggregate_rules():
    a = Heatmap(np.full((2, 2), 0.3))
    b = Heatmap(np.full((2, 2), 0.7))
    assert aggregate([a]) is a
    np.testing.assert_array_equal(aggregate([a, b]).values, b.values)
    np.testing.assert_array_equal(aggregate([a, Heatmap.zeros((2, 2))]).values, a.values)
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError):
        aggregate([a, Heatmap.zeros((3, 2))])


def test_sample_rules():
    h = Heatmap(np.array([[0.0, 1.0], [0.25, 0.5]]))
    assert sample(h, (1, 1)) == 0.5
    assert sample(h, (0.5, 0)) == pytest.approx(0.5)
    assert sample(h, (-5, -5)) == 0.0
    assert sample(h, (9, 9)) == 0.5
    with pytest.raises(ValueError):
        sample(h, (np.nan, 0))
    assert sample_many(h, np.zeros((0, 2))).shape == (0,)


@settings(max_examples=60, deadline=None)
@given(st.floats(-3, 6), st.floats(-3, 6))
def test_sample_within_grid_range(x, y):
    values = np.random.default_rng(3).uniform(0, 1, (4, 4))
    v = sample(Heatmap(values), (x, y))
    assert values.min() <= v <= values.max()


def test_heatmap_validation():
    with pytest.raises(ValueError):
        Heatmap(np.array([[1.5]]))
    with pytest.raises(ValueError):
        Heatmap(np.zeros((0, 3)))
