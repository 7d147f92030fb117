import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cdrl.core import ErrorMap, ImageGrid
from cdrl.errors import ParamError, ShapeError
from cdrl.inference import (ChangeMask, error_from_reconstruction, error_map, overlay, patch_decision, patch_score,
                            threshold_map)
from cdrl.models import build_reconstructor, reconstruct
from cdrl.training import mae_loss


class Echo(torch.nn.Module):
    """Stand-in reconstructor that returns its first input."""

    def forward(self, t1, t2):
        return t1.clone()


def model_grid(seed, shape=(16, 16, 3)):
    return ImageGrid(np.random.default_rng(seed).uniform(-1, 1, shape), "model")


maps = arrays(np.float32, st.tuples(st.integers(2, 12), st.integers(2, 12)), elements=st.floats(0, 10, width=32))


def mask_of(values):
    return ChangeMask(ImageGrid(np.asarray(values, np.float32), "unit"), 0.5, "fixed")


# -- error_map -------------------------------------------------------------------------

def test_perfect_reconstruction_gives_zero_map():
    emap = error_map(Echo(), model_grid(0), model_grid(1))
    assert emap.stats == (0.0, 0.0, 0.0)


def test_map_mean_equals_mae():
    model = build_reconstructor(3, depth=2, base_width=4)
    t1, t2 = model_grid(2), model_grid(3)
    emap = error_map(model, t1, t2)
    assert emap.stats[2] == pytest.approx(mae_loss(reconstruct(model, t1, t2), t1), abs=1e-6)


def test_error_map_errors_and_smoothing():
    model = build_reconstructor(3, depth=2, base_width=4)
    with pytest.raises(ShapeError):
        error_map(model, model_grid(0), model_grid(1, (8, 8, 3)))
    with pytest.raises(ShapeError):
        error_map(model, model_grid(0).to_space("unit"), model_grid(1).to_space("unit"))
    raw = error_map(model, model_grid(0), model_grid(1))
    sm = error_map(model, model_grid(0), model_grid(1), smooth_sigma=2.0)
    assert sm.values.std() < raw.values.std()
    assert sm.grid.space == "nonneg" and sm.values.min() >= 0


def test_error_map_flip_equivariance():
    """Joint flips commute with the map for a flip-equivariant model."""
    model = build_reconstructor(0, depth=2, base_width=4)
    t1, t2 = model_grid(5), model_grid(6)
    flip = lambda g: ImageGrid(g.data[:, ::-1].copy(), g.space)
    # a conv net is not flip-equivariant in general, so symmetrise it explicitly
    sym = lambda a, b: (model(a, b) + model(a.flip(-1), b.flip(-1)).flip(-1)) / 2

    class Sym(torch.nn.Module):
        def forward(self, a, b):
            return sym(a, b)

    a = error_map(Sym(), flip(t1), flip(t2)).values
    b = error_map(Sym(), t1, t2).values[:, ::-1]
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_error_from_reconstruction_is_channel_mean():
    recon = np.zeros((2, 2, 3), np.float32)
    t1 = np.array([[[0.3, 0.6, 0.9]] * 2] * 2, np.float32)
    np.testing.assert_allclose(error_from_reconstruction(recon, t1).values, 0.6, atol=1e-7)


# -- threshold_map -----------------------------------------------------------------------

def test_zero_map_fixed_threshold():
    m = threshold_map(ErrorMap.from_array(np.zeros((4, 4))), "fixed", 0.1)
    assert not m.values.any() and m.threshold_used == 0.1 and m.method == "fixed"


def test_otsu_bimodal_halves():
    v = np.full((8, 8), 0.1)
    v[:, 4:] = 0.9
    m = threshold_map(ErrorMap.from_array(v), "otsu")
    assert np.array_equal(m.values, (v > 0.5).astype(np.float32))
    assert 0.1 <= m.threshold_used < 0.9


def test_otsu_constant_map_is_empty():
    m = threshold_map(ErrorMap.from_array(np.full((4, 4), 0.3)), "otsu")
    assert not m.values.any()


def test_quantile_density(rng):
    v = rng.random((40, 50))
    m = threshold_map(ErrorMap.from_array(v), "quantile", 0.95)
    assert abs(m.values.sum() - 0.05 * v.size) <= 1
    # sort-based oracle: exactly the values above the 95th percentile
    thr = np.sort(v.astype(np.float32).ravel().astype(np.float64))
    assert m.values.sum() == np.count_nonzero(thr > m.threshold_used)


@pytest.mark.parametrize("q", [0.0, 1.0, -0.5, 2.0, None])
def test_quantile_param_range(q):
    with pytest.raises(ParamError):
        threshold_map(ErrorMap.from_array(np.ones((2, 2))), "quantile", q)


def test_unknown_method():
    with pytest.raises(ParamError):
        threshold_map(ErrorMap.from_array(np.ones((2, 2))), "mean")


@given(maps, st.floats(0, 10), st.floats(0, 10))
def test_fixed_threshold_monotone(v, t1, t2):
    lo, hi = sorted((t1, t2))
    emap = ErrorMap.from_array(v)
    a, b = threshold_map(emap, "fixed", lo), threshold_map(emap, "fixed", hi)
    assert np.all(b.values <= a.values)
    assert patch_decision(b) <= patch_decision(a)


# -- patch decision / score -----------------------------------------------------------------

def test_patch_decision_examples():
    z = np.zeros((4, 4))
    assert patch_decision(mask_of(z)) is False
    one = z.copy()
    one[2, 3] = 1
    assert patch_decision(mask_of(one)) is True
    assert patch_decision(mask_of(np.ones((4, 4)))) is True


def test_patch_score_examples():
    assert patch_score(ErrorMap.from_array(np.full((5, 5), 0.7)), 0.3) == pytest.approx(0.7)
    v = np.random.default_rng(0).random((6, 6))
    assert patch_score(ErrorMap.from_array(v), 1.0) == pytest.approx(float(v.astype(np.float32).mean()), abs=1e-6)
    spike = np.zeros((10, 10))
    spike[3, 7] = 5
    assert patch_score(ErrorMap.from_array(spike), 0.01) == 5.0
    for bad in (0.0, 1.5):
        with pytest.raises(ParamError):
            patch_score(ErrorMap.from_array(spike), bad)


@given(maps, st.floats(0.01, 1.0), st.integers(0, 2**31))
def test_patch_score_oracle_and_permutation(v, frac, seed):
    emap = ErrorMap.from_array(v)
    k = max(1, int(np.ceil(frac * v.size - 1e-9)))
    oracle = float(np.sort(v.ravel().astype(np.float64))[::-1][:k].mean())
    assert patch_score(emap, frac) == pytest.approx(oracle, rel=1e-12, abs=1e-12)
    perm = np.random.default_rng(seed).permutation(v.ravel()).reshape(v.shape)
    assert patch_score(ErrorMap.from_array(perm), frac) == patch_score(emap, frac)


@given(maps, st.integers(0, 2**31))
def test_patch_score_monotone_under_added_change(v, seed):
    """Raising any pixel (more changed area) never lowers the score."""
    rng = np.random.default_rng(seed)
    raised = v.copy()
    idx = rng.integers(0, v.size, size=max(1, v.size // 4))
    raised.ravel()[idx] += 1.0
    assert patch_score(ErrorMap.from_array(raised)) >= patch_score(ErrorMap.from_array(v))


def test_overlay_blends_onto_t2():
    t2 = ImageGrid(np.full((2, 2, 3), 0.4), "unit")
    m = np.zeros((2, 2))
    m[0, 0] = 1
    out = overlay(mask_of(m), t2, alpha=0.5)
    np.testing.assert_allclose(out.data[0, 0], [0.7, 0.2, 0.2], atol=1e-6)
    np.testing.assert_allclose(out.data[1, 1], 0.4, atol=1e-7)
