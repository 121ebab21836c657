import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointpst import dataset as ds


def test_sphere_constant_radius():
    pts = ds.generate_shape("sphere", 1024, 3)
    r = np.linalg.norm(pts, axis=1)
    assert np.ptp(r) < 1e-9


@pytest.mark.parametrize("kind", ds.SHAPES)
def test_generation_deterministic(kind):
    a = ds.generate_shape(kind, 200, 11)
    b = ds.generate_shape(kind, 200, 11)
    assert a.shape == (200, 3) and np.all(np.isfinite(a))
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, ds.generate_shape(kind, 200, 12))


def test_cube_face_counts_binomial():
    n = 10000
    pts = ds.generate_shape("cube", n, 7)
    half = np.abs(pts).max()
    on_face = np.isclose(np.abs(pts), half, rtol=0, atol=1e-12)
    # corner/edge coincidences have probability zero
    assert np.all(on_face.sum(axis=1) == 1)
    axis = np.argmax(on_face, axis=1)
    sign = pts[np.arange(n), axis] > 0
    counts = np.bincount(axis * 2 + sign, minlength=6)
    sigma = np.sqrt(n * (1 / 6) * (5 / 6))
    assert np.all(np.abs(counts - n / 6) < 3 * sigma), counts


def test_unknown_shape_and_too_few_points():
    with pytest.raises(ds.ConfigurationError):
        ds.generate_shape("teapot", 100, 0)
    with pytest.raises(ds.ConfigurationError):
        ds.generate_shape("sphere", 7, 0)


def test_normalize_hand_case():
    out = ds.normalize_unit_cube(np.array([[0.0, 0, 0], [2.0, 0, 0]]))
    assert np.array_equal(out, [[-0.5, 0, 0], [0.5, 0, 0]])


def test_normalize_degenerate():
    with pytest.raises(ds.DegenerateCloudError):
        ds.normalize_unit_cube(np.ones((5, 3)))
    with pytest.raises(ds.DegenerateCloudError):
        ds.normalize_unit_cube(np.zeros((0, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 60), st.floats(1e-3, 1e3))
def test_normalize_extent_and_idempotence(seed, n, spread):
    pts = np.random.default_rng(seed).standard_normal((n, 3)) * spread + 5.0
    out = ds.normalize_unit_cube(pts)
    assert len(out) == n
    assert abs(np.ptp(out, axis=0).max() - 1.0) < 1e-12
    assert np.all(np.abs(out) <= 0.5 + 1e-12)
    assert np.max(np.abs(ds.normalize_unit_cube(out) - out)) < 1e-12


def test_make_dataset_balanced_and_normalized():
    d = ds.make_dataset(n_classes=4, per_class=5, n_points=64, seed=2, split="test")
    assert len(d) == 20 and d.split == "test"
    assert np.array_equal(np.bincount(d.labels), [5] * 4)
    for s in d.samples:
        assert s.points.shape == (64, 3)
        assert np.all(np.abs(s.points) <= 0.5 + 1e-6)
    other = ds.make_dataset(n_classes=4, per_class=5, n_points=64, seed=2, split="source")
    assert not np.array_equal(d[0].points, other[0].points)


def test_roundtrip_bit_exact(tmp_path):
    d = ds.make_dataset(n_classes=3, per_class=4, n_points=32, seed=1)
    ds.save_dataset(d, tmp_path / "d.pcds")
    back = ds.load_dataset(tmp_path / "d.pcds")
    assert back.n_classes == 3 and len(back) == len(d)
    for a, b in zip(d.samples, back.samples):
        assert a.label == b.label
        assert a.points.tobytes() == b.points.tobytes()


def test_empty_dataset_roundtrip(tmp_path):
    ds.save_dataset(ds.Dataset([], 5), tmp_path / "e.pcds")
    back = ds.load_dataset(tmp_path / "e.pcds")
    assert len(back) == 0 and back.n_classes == 5


def test_malformed_files(tmp_path):
    d = ds.make_dataset(n_classes=2, per_class=1, n_points=16)
    path = tmp_path / "d.pcds"
    ds.save_dataset(d, path)
    blob = path.read_bytes()
    cases = {
        "magic": b"XXXX" + blob[4:],
        "version": blob[:4] + b"\x09\x00" + blob[6:],
        "truncated": blob[:-5],
        "trailing": blob + b"\x00",
        "header": blob[:6],
    }
    for name, data in cases.items():
        bad = tmp_path / f"{name}.pcds"
        bad.write_bytes(data)
        with pytest.raises(ds.FormatError):
            ds.load_dataset(bad)


def test_label_out_of_range():
    with pytest.raises(ds.ConfigurationError):
        ds.Dataset([ds.LabeledSample(np.zeros((8, 3)), 3)], n_classes=3)


def test_stack_clouds():
    a, b = np.zeros((3, 3)), np.ones((2, 3))
    pts, offsets = ds.stack_clouds([a, b])
    assert pts.shape == (5, 3) and list(offsets) == [0, 3, 5]
