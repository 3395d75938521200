import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import spearmanr

from splitpriv.data import make_synthetic_dataset
from splitpriv.fsim import fsim, fsim_batch, gradient_magnitude, phase_congruency
from splitpriv.rng import RngStream


def _img(seed=0, size=16):
    (d,), _ = make_synthetic_dataset("mini-images", 4, 1, 1, True, RngStream(seed), n_test=4, image_size=size)
    return d.x[0]


def test_identity_is_one():
    x = _img()
    assert fsim(x, x) == pytest.approx(1.0, abs=1e-9)


def test_symmetry():
    a, b = _img(0), _img(1)
    assert abs(fsim(a, b) - fsim(b, a)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (8, 8), elements=st.floats(0, 1)), arrays(np.float64, (8, 8), elements=st.floats(0, 1)))
def test_range_under_fuzzing(a, b):
    v = fsim(a, b)
    assert 0.0 <= v <= 1.0


def test_monotone_in_additive_noise():
    x = _img(size=16)
    gen = np.random.default_rng(0)
    u = gen.standard_normal(x.shape)
    levels = np.linspace(0.01, 0.5, 20)
    scores = [fsim(x, np.clip(x + s * u, 0, 1)) for s in levels]
    assert spearmanr(levels, scores)[0] < -0.9


def test_feature_maps_on_flat_image():
    flat = np.full((8, 8), 0.5)
    # zero padding, as in the usual implementation, gives edges only at the border
    assert np.allclose(gradient_magnitude(flat)[1:-1, 1:-1], 0)
    assert np.all(phase_congruency(flat) >= 0)


def test_shape_checks():
    with pytest.raises(ValueError):
        fsim(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(ValueError):
        fsim(np.zeros((2, 8, 8)), np.zeros((2, 8, 8)))
    with pytest.raises(ValueError):
        fsim_batch(np.zeros((2, 1, 8, 8)), np.zeros((3, 1, 8, 8)))


def test_batch_matches_pairwise():
    a = np.stack([_img(0), _img(1)])
    b = np.stack([_img(2), _img(3)])
    np.testing.assert_allclose(fsim_batch(a, b), [fsim(a[0], b[0]), fsim(a[1], b[1])])
