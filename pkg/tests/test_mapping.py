import csv

import numpy as np
import pytest

from irdf import mapping
from irdf.errors import ConfigurationError, DimensionError


def test_basis_shapes_and_ranges():
    z = mapping.sample_basis(mapping.BasisSpec("uniform_cube", 3), 500)
    assert z.shape == (500, 3) and z.min() >= 0 and z.max() < 1
    g = mapping.sample_basis(mapping.BasisSpec("standard_gaussian", 2), 50_000, np.random.default_rng(0))
    np.testing.assert_allclose(g.std(axis=0), 1.0, atol=0.02)


def test_basis_needs_samples():
    with pytest.raises(ConfigurationError):
        mapping.sample_basis(mapping.BasisSpec(), 0)


def test_linear_head_shape():
    m = mapping.make_mapping(mapping.BasisSpec(dim=4), 2, hidden=(8,))
    y = mapping.map_reproductions(m, mapping.sample_basis(m.basis, 10))
    assert y.shape == (10, 2)


def test_softmax_head_on_simplex():
    m = mapping.make_mapping(mapping.BasisSpec(dim=3), 5, hidden=(8,), head="softmax")
    y = mapping.map_reproductions(m, mapping.sample_basis(m.basis, 20))
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(y > 0)


@pytest.mark.parametrize("head", ["linear", "softmax"])
def test_backward_finite_differences(head):
    m = mapping.make_mapping(mapping.BasisSpec(dim=2), 3, hidden=(6,), activation="tanh", head=head, seed=2)
    rng = np.random.default_rng(1)
    z = rng.normal(size=(5, 2))
    r = rng.normal(size=(5, 3))
    _, tape = mapping.map_with_tape(m, z)
    analytic = mapping.mapping_backward(m, tape, r).flatten()
    flat = m.params.flatten()
    h = 1e-6
    for k in range(0, flat.size, 3):
        up, dn = flat.copy(), flat.copy()
        up[k] += h
        dn[k] -= h
        fu = np.sum(mapping.map_reproductions(mapping.MappingModel(m.params.with_flat(up), m.basis, head), z) * r)
        fd = np.sum(mapping.map_reproductions(mapping.MappingModel(m.params.with_flat(dn), m.basis, head), z) * r)
        assert analytic[k] == pytest.approx((fu - fd) / (2 * h), rel=1e-5, abs=1e-9)


def test_pushforward_is_frozen():
    m = mapping.make_mapping(mapping.BasisSpec(dim=2), 2, hidden=(4,))
    draw = m.pushforward()
    before = draw(5, np.random.default_rng(0))
    m.params = m.params.with_flat(m.params.flatten() + 1.0)
    np.testing.assert_array_equal(draw(5, np.random.default_rng(0)), before)


def test_dimension_mismatch():
    m = mapping.make_mapping(mapping.BasisSpec(dim=2), 2, hidden=(4,))
    with pytest.raises(DimensionError):
        mapping.map_reproductions(m, np.zeros((3, 5)))


def test_unknown_head():
    with pytest.raises(ConfigurationError):
        mapping.make_mapping(mapping.BasisSpec(dim=2), 2, head="sigmoid")


def test_reproductions_csv(tmp_path):
    y = np.array([[0.1, 0.2], [1.0 / 3.0, -4.0]])
    path = tmp_path / "y.csv"
    mapping.write_reproductions_csv(path, y)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["y0", "y1"]
    np.testing.assert_array_equal(np.array(rows[1:], dtype=float), y)
