"""
Test script for positional encodings and the periodic latent parameterization.
"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.core import autodiff as ad
from app.core import encodings
from app.core.autodiff import gradcheck
from app.core.encodings import (
    graph_pe, heat_kernel, heat_pe, laplacian_eigen, laplacian_pe, normalized_laplacian, temporal_encode,
)
from app.core.exceptions import ConfigError, GraphError, ParamsError, ShapeMismatchError
from app.core.periodic import (
    dft_decompose, eval_latent, nyquist, phase_manifold, phase_regress, sinusoid, uniform_latent_grid,
)
from app.schemas.config import GraphPEConfig, TemporalPEConfig
from app.schemas.motion import Joint, Skeleton
from app.schemas.phase import PeriodicParams, stack_params


def _chain(n):
    joints = [Joint(name="j0", parent=None)]
    joints += [Joint(name=f"j{i}", parent=i - 1, offset=(0.0, -10.0, 0.0)) for i in range(1, n)]
    return Skeleton(joints=joints)


def _star():
    joints = [Joint(name="hub", parent=None)]
    joints += [Joint(name=f"arm{i}", parent=0, offset=(float(i), 0.0, 0.0)) for i in range(1, 4)]
    return Skeleton(joints=joints)


# ============================================================================
# Temporal encoding
# ============================================================================

def test_temporal_encoding_at_zero():
    pe = TemporalPEConfig(k=1, f_min=0.5)
    np.testing.assert_allclose(temporal_encode(0.0, pe), [0.0, 1.0])


def test_temporal_encoding_shape_and_unit_pairs():
    pe = TemporalPEConfig(k=6, f_min=0.5, f_max=32.0)
    out = temporal_encode(np.linspace(0, 1, 17), pe)
    assert out.shape == (17, 12)
    np.testing.assert_allclose(out[:, 0::2] ** 2 + out[:, 1::2] ** 2, 1.0)


def test_temporal_config_rejects_inverted_band():
    with pytest.raises(ValueError):
        TemporalPEConfig(k=4, f_min=8.0, f_max=2.0)


# ============================================================================
# Graph encodings
# ============================================================================

def test_path_graph_spectrum():
    values, _ = laplacian_eigen(_chain(3))
    np.testing.assert_allclose(values, [0.0, 1.0, 2.0], atol=1e-12)


def test_laplacian_pe_is_orthonormal_and_sign_fixed():
    pe = laplacian_pe(_chain(6), 4)
    assert pe.shape == (6, 4)
    np.testing.assert_allclose(pe.T @ pe, np.eye(4), atol=1e-10)
    for col in pe.T:
        assert col[np.argmax(np.abs(col))] > 0


def test_laplacian_pe_is_reproducible_on_symmetric_skeleton():
    first, second = laplacian_pe(_star(), 3), laplacian_pe(_star(), 3)
    np.testing.assert_array_equal(first, second)


def test_laplacian_pe_dimension_bounds():
    with pytest.raises(GraphError):
        laplacian_pe(_chain(4), 4)


def test_single_joint_graph_is_rejected():
    with pytest.raises(GraphError) as info:
        normalized_laplacian(_chain(1))
    assert info.value.code == "E_GRAPH"


def test_heat_kernel_preserves_stationary_vector():
    skeleton = _star()
    degrees = skeleton.adjacency.sum(axis=1)
    stationary = np.sqrt(degrees)
    np.testing.assert_allclose(heat_kernel(skeleton, 0.7) @ stationary, stationary, atol=1e-12)
    np.testing.assert_allclose(heat_kernel(skeleton, 1e-9), np.eye(4), atol=1e-8)


def test_heat_pe_columns_are_time_major():
    skeleton = _chain(5)
    probes = np.random.default_rng(0).standard_normal((5, 2))
    pe = heat_pe(skeleton, [0.5, 2.0], 2, probes=probes)
    np.testing.assert_allclose(pe[:, :2], heat_kernel(skeleton, 0.5) @ probes)
    np.testing.assert_allclose(pe[:, 2:], heat_kernel(skeleton, 2.0) @ probes)


def test_heat_pe_rejects_non_positive_times():
    with pytest.raises(ConfigError):
        heat_pe(_chain(3), [0.0, 1.0], 1)


def _branched():
    parents = [None, 0, 1, 0, 3, 4]
    return Skeleton(joints=[Joint(name=f"j{i}", parent=p, offset=(0.0, 0.0, 0.0) if p is None else (float(i), -5.0, 0.0))
                            for i, p in enumerate(parents)])


@pytest.mark.parametrize("t", [0.1, 0.5, 1.0])
def test_heat_pe_matches_taylor_series(t):
    skeleton = _branched()
    probes = np.random.default_rng(1).standard_normal((6, 3))
    step = -t * normalized_laplacian(skeleton)
    term, series = probes.copy(), probes.copy()
    for k in range(1, 20):
        term = step @ term / k
        series += term
    np.testing.assert_allclose(heat_pe(skeleton, [t], 3, probes=probes), series, atol=1e-8)


def test_heat_pe_at_tiny_time_is_nearly_identity():
    skeleton = _branched()
    probes = np.random.default_rng(9).standard_normal((6, 2))
    np.testing.assert_allclose(heat_pe(skeleton, [1e-8], 2, seed=9), probes, atol=1e-6)


def test_heat_pe_follows_joint_relabeling():
    skeleton = _branched()
    order = [0, 3, 1, 4, 2, 5]
    new_index = {old: new for new, old in enumerate(order)}
    relabeled = Skeleton(joints=[
        Joint(name=skeleton.joints[old].name,
              parent=None if skeleton.joints[old].parent is None else new_index[skeleton.joints[old].parent],
              offset=skeleton.joints[old].offset)
        for old in order
    ])
    probes = np.random.default_rng(2).standard_normal((6, 2))
    original = heat_pe(skeleton, [0.3, 1.5], 2, probes=probes)
    permuted = heat_pe(relabeled, [0.3, 1.5], 2, probes=probes[order])
    np.testing.assert_allclose(permuted, original[order], atol=1e-12)


def test_graph_pe_is_cached_and_read_only():
    config = GraphPEConfig(mode="heat", dim=6, heat_times=(0.1, 1.0, 3.0), seed=4)
    first = graph_pe(_chain(5), config)
    assert first.shape == (5, 6)
    assert graph_pe(_chain(5), config) is first
    assert not first.flags.writeable


def test_graph_pe_cache_is_bounded(monkeypatch):
    monkeypatch.setattr(encodings, "GRAPH_CACHE_SIZE", 4)
    skeleton = _chain(4)
    outputs = [graph_pe(skeleton, GraphPEConfig(mode="heat", dim=2, heat_times=(0.5,), seed=100 + s))
               for s in range(10)]
    assert len(encodings._graph_cache) <= 4
    latest = GraphPEConfig(mode="heat", dim=2, heat_times=(0.5,), seed=109)
    assert graph_pe(skeleton, latest) is outputs[-1]
    oldest = GraphPEConfig(mode="heat", dim=2, heat_times=(0.5,), seed=100)
    again = graph_pe(skeleton, oldest)
    assert again is not outputs[0]
    np.testing.assert_array_equal(again, outputs[0])


# ============================================================================
# DFT decomposition
# ============================================================================

def _tone(amplitude, k, n, offset=0.0, shift=0.0):
    t = uniform_latent_grid(n)
    return amplitude * np.sin(2.0 * np.pi * (k * t - shift)) + offset


def test_on_bin_tone_is_recovered():
    curve = np.stack([_tone(2.0, 3, 64, offset=0.5), _tone(0.7, 5, 64, offset=-1.0)])
    spectrum = dft_decompose(curve, window_sec=2.0)
    np.testing.assert_allclose(spectrum.amplitude, [2.0, 0.7], atol=1e-10)
    np.testing.assert_allclose(spectrum.frequency, [1.5, 2.5], atol=1e-10)
    np.testing.assert_allclose(spectrum.offset, [0.5, -1.0], atol=1e-12)


def test_constant_channel_has_no_amplitude_or_frequency():
    spectrum = dft_decompose(np.full((1, 16), 3.0), window_sec=1.0)
    assert spectrum.amplitude[0] == 0.0
    assert spectrum.frequency[0] == 0.0
    assert spectrum.offset[0] == pytest.approx(3.0)


def test_odd_sample_count_is_rejected():
    with pytest.raises(ShapeMismatchError) as info:
        dft_decompose(np.zeros((2, 15)), window_sec=1.0)
    assert info.value.code == "E_SHAPE"


def test_frequency_stays_within_nyquist():
    curve = np.random.default_rng(2).standard_normal((8, 32))
    spectrum = dft_decompose(curve, window_sec=0.5)
    assert np.all(spectrum.frequency >= 0.0)
    assert np.all(spectrum.frequency <= nyquist(32, 0.5) + 1e-12)


def test_dft_gradients():
    fn = lambda x: ad.sum_(dft_decompose(x, 1.0).amplitude * np.array([1.0, 2.0])) + ad.sum_(
        dft_decompose(x, 1.0).frequency)
    assert gradcheck(fn, [np.random.default_rng(3).standard_normal((2, 8))]) <= 1e-4


# ============================================================================
# Phase regression and the sinusoid
# ============================================================================

@pytest.mark.parametrize("uv,expected", [((1.0, 0.0), 0.0), ((0.0, 1.0), 0.25), ((-1.0, 0.0), 0.5),
                                         ((0.0, -1.0), 0.75)])
def test_phase_regress_quadrants(uv, expected):
    s = phase_regress(np.ones((1, 4)), np.zeros((1, 4, 2)), np.array([uv]))
    assert s[0] == pytest.approx(expected)


def test_phase_regress_dead_zone():
    s = phase_regress(np.zeros((2, 4)), np.zeros((2, 4, 2)), np.zeros((2, 2)))
    np.testing.assert_array_equal(s, [0.0, 0.0])


def test_sinusoid_matches_closed_form():
    times = np.linspace(0.0, 1.0, 9)
    out = sinusoid(np.array([0.25]), np.array([2.0]), np.array([1.5]), np.array([0.3]), times, 2.0)
    np.testing.assert_allclose(out[0], 2.0 * np.sin(2.0 * np.pi * (3.0 * times - 0.25)) + 0.3)


def _params(rows, f_max):
    return PeriodicParams.from_array(np.array(rows, dtype=np.float64), f_max)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.999), st.floats(0.1, 3.0), st.integers(1, 7), st.floats(-2.0, 2.0))
def test_eval_latent_reproduces_on_bin_tone(s, a, k, b):
    params = _params([[s, a, float(k), b]], 16.0)
    grid = uniform_latent_grid(32)
    np.testing.assert_allclose(eval_latent(params, grid)[0], _tone(a, k, 32, offset=b, shift=s), atol=1e-9)
    spectrum = dft_decompose(eval_latent(params, grid), 1.0)
    assert spectrum.amplitude[0] == pytest.approx(a, abs=1e-9)
    assert spectrum.frequency[0] == pytest.approx(k, abs=1e-9)


def test_phase_manifold_points():
    params = _params([[0.25, 2.0, 1.0, 0.0], [0.0, 1.0, 1.0, 0.0]], 4.0)
    np.testing.assert_allclose(phase_manifold(params), [2.0, 0.0, 0.0, 1.0], atol=1e-12)
    batch = stack_params([params] * 3)
    assert phase_manifold(batch).shape == (3, 4)


@pytest.mark.parametrize("row", [[1.0, 1.0, 2.0, 0.0], [0.5, -1.0, 2.0, 0.0], [0.5, 1.0, 5.0, 0.0],
                                 [0.5, np.nan, 2.0, 0.0]])
def test_params_check_flags_bad_ranges(row):
    good = _params([[0.5, 1.0, 2.0, 0.0]], 4.0)
    assert good.check() is good
    with pytest.raises(ParamsError):
        _params([row], 4.0).check()
