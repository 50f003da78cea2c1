"""
Test script for the phase transform, the noise schedule, DDIM and the denoiser.
"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.core import diffusion
from app.core.diffusion import (
    AMPLITUDE_EPS, LatentDataset, LatentStats, build_latent_dataset, ddim_sample, ddim_step, ddim_timesteps, denoise,
    destandardize, diff_to_phase, from_diffusion_space, make_schedule, min_snr_weight, phase_to_diff, q_sample,
    recover, sample_params, standardize, to_diffusion_space, train_diffusion, transform_f_max, v_target,
)
from app.core.exceptions import (
    ConfigError, DatasetError, DegenerateRotationError, ParamsError, ShapeMismatchError, TrainingAborted,
)
from app.core.funphase import init_weights
from app.schemas.config import (
    DiffusionConfig, GraphPEConfig, ModelConfig, OptimizerConfig, TemporalPEConfig, TrainConfig,
)
from app.schemas.motion import SkeletonSpec
from app.schemas.phase import Condition, DiffParams, PeriodicParams
from app.services.synth import synth_motion


def _params(rows, f_max, window_sec=1.0):
    return PeriodicParams.from_array(np.array(rows, dtype=np.float64), f_max, window_sec)


def _config(**overrides):
    base = dict(
        timesteps=20, sample_steps=5, embed=8, blocks=1, heads=2, num_classes=2, keyframes=3, seed=2,
        train=TrainConfig(steps=3, batch_size=4, seed=1, log_every=1, optimizer=OptimizerConfig(lr=1e-2)),
    )
    base.update(overrides)
    return DiffusionConfig(**base)


def _dataset(context=True):
    rng = np.random.default_rng(0)
    return LatentDataset(
        values=rng.standard_normal((6, 3, 4)), labels=np.array([0, 1, 0, 1, -1, 0]),
        context=rng.standard_normal((6, 3, 4)) if context else None, f_max=2.5, window_sec=0.2,
    )


# ============================================================================
# Phase transform
# ============================================================================

@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 0.999), st.floats(0.05, 5.0), st.floats(0.01, 0.99), st.floats(-3.0, 3.0))
def test_transform_round_trip(s, a, f_fraction, b):
    params = _params([[s, a, f_fraction * 4.0, b]], 4.0)
    back = diff_to_phase(phase_to_diff(params))
    gap = abs(back.s[0] - s)
    assert min(gap, 1.0 - gap) < 1e-9
    assert back.a[0] == pytest.approx(a, abs=1e-6)
    assert back.f[0] == pytest.approx(f_fraction * 4.0, abs=1e-6)
    assert back.b[0] == b


def test_quarter_phase_maps_to_sine_axis():
    dp = phase_to_diff(_params([[0.25, 2.0, 2.0, 0.5]], 4.0))
    np.testing.assert_allclose(dp.values[0], [0.0, 2.0, 0.0, 0.5], atol=1e-12)


def test_inverse_transform_is_total():
    values = np.random.default_rng(4).standard_normal((16, 4)) * 5.0
    params = diff_to_phase(DiffParams(values=values, f_max=3.0))
    assert params.check() is params


def test_zero_phase_vector_gets_the_amplitude_floor():
    params = diff_to_phase(DiffParams(values=np.array([[0.0, 0.0, 0.0, 0.0]]), f_max=2.0))
    assert AMPLITUDE_EPS == 1e-12
    assert params.a[0] == pytest.approx(np.sqrt(AMPLITUDE_EPS), rel=1e-12)
    assert params.s[0] == 0.0
    assert params.f[0] == pytest.approx(1.0)


def test_frequency_above_bound_is_rejected():
    with pytest.raises(ParamsError):
        phase_to_diff(_params([[0.0, 1.0, 5.0, 0.0]], 5.0), f_max=4.0)


def test_non_finite_diffusion_values_are_rejected():
    with pytest.raises(ParamsError):
        DiffParams(values=np.array([[np.nan, 0.0, 0.0, 0.0]]), f_max=1.0)


def test_f_max_rules():
    ae = ModelConfig(d_latent=32)
    assert transform_f_max(_config(f_max_rule="latent"), ae, 1.0) == pytest.approx(16.0 / (2.0 * np.pi))
    assert transform_f_max(_config(f_max_rule="nyquist"), ae, 0.5) == pytest.approx(32.0)


def test_frequencies_above_f_max_are_clamped_and_counted():
    params = _params([[0.1, 1.0, 1.0, 0.0], [0.2, 1.0, 5.0, 0.0]], 8.0)
    values, clamped = to_diffusion_space(params, 2.0)
    assert clamped == 1
    back = from_diffusion_space(values, 2.0, 1.0)
    assert back.f[1] == pytest.approx(2.0, abs=1e-5)


def test_raw_ablation_folds_into_valid_ranges():
    values = np.array([[1.25, -2.0, 7.0, 0.3], [-0.25, 1.0, -1.0, 0.0]])
    params = from_diffusion_space(values, 4.0, 1.0, use_transform=False)
    np.testing.assert_allclose(params.s, [0.25, 0.75])
    np.testing.assert_allclose(params.a, [2.0, 1.0])
    np.testing.assert_allclose(params.f, [4.0, 0.0])
    assert params.check() is params
    raw, _ = to_diffusion_space(_params([[0.5, 1.0, 1.0, 0.0]], 4.0), 4.0, use_transform=False)
    np.testing.assert_array_equal(raw, [[0.5, 1.0, 1.0, 0.0]])


# ============================================================================
# Noise schedule and v-parameterization
# ============================================================================

def test_linear_schedule_endpoints():
    schedule = make_schedule(1000, 1e-4, 0.02)
    assert schedule.alpha_bar[0] == 1.0
    assert schedule.betas[1] == pytest.approx(1e-4 + (0.02 - 1e-4) / 1000)
    assert schedule.betas[1000] == pytest.approx(0.02)
    assert np.all(np.diff(schedule.alpha_bar) < 0)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.02, 1e-4), (10, 1e-4, 1.0)])
def test_invalid_schedule(args):
    with pytest.raises(ConfigError):
        make_schedule(*args)


def test_v_parameterization_inverts():
    schedule = make_schedule(50)
    rng = np.random.default_rng(1)
    z0, eps = rng.standard_normal((3, 5, 4)), rng.standard_normal((3, 5, 4))
    t = np.array([1, 25, 50])
    z_t = q_sample(z0, t, eps, schedule)
    z0_hat, eps_hat = recover(z_t, v_target(z0, eps, t, schedule), t, schedule)
    np.testing.assert_allclose(z0_hat, z0, atol=1e-12)
    np.testing.assert_allclose(eps_hat, eps, atol=1e-12)


def test_min_snr_weight_is_capped():
    schedule = make_schedule(100)
    weights = min_snr_weight(np.arange(1, 101), schedule, gamma=5.0)
    assert weights.max() == 5.0
    assert weights[-1] == pytest.approx(schedule.snr(100))


# ============================================================================
# DDIM
# ============================================================================

def test_ddim_timesteps():
    np.testing.assert_array_equal(ddim_timesteps(1000, 10), np.arange(11) * 100)
    np.testing.assert_array_equal(ddim_timesteps(10, 3), [0, 3, 6, 10])
    with pytest.raises(ConfigError):
        ddim_timesteps(10, 11)


def test_deterministic_step_with_true_v_lands_on_data():
    schedule = make_schedule(100)
    rng = np.random.default_rng(3)
    z0, eps = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    z_t = q_sample(z0, 60, eps, schedule)
    v = v_target(z0, eps, 60, schedule)
    z_prev, _, sigma, clamped = ddim_step(z_t, v, 60, 0, schedule, 0.0, rng.standard_normal((4, 4)))
    np.testing.assert_allclose(z_prev, z0, atol=1e-12)
    assert sigma == 0.0
    assert not clamped
    z_mid, _, _, _ = ddim_step(z_t, v, 60, 30, schedule, 0.0, np.zeros((4, 4)))
    np.testing.assert_allclose(z_mid, q_sample(z0, 30, eps, schedule), atol=1e-12)


def test_oversized_eta_clamps_direction():
    schedule = make_schedule(100)
    z = np.ones((2, 4))
    _, mean, sigma, clamped = ddim_step(z, z, 80, 40, schedule, 10.0, np.zeros((2, 4)))
    assert clamped
    assert sigma > 0.0
    assert np.all(np.isfinite(mean))


# ============================================================================
# Standardization and the denoiser
# ============================================================================

def test_stats_floor_constant_components():
    values = np.ones((5, 2, 4))
    stats = LatentStats.fit(values)
    np.testing.assert_array_equal(stats.std, np.full((2, 4), 1e-6))
    np.testing.assert_allclose(destandardize(standardize(values, stats), stats), values)


def test_fresh_denoiser_predicts_zero():
    config = _config()
    result = train_diffusion(_dataset(), config.model_copy(update={"train": TrainConfig(steps=0)}))
    v = denoise(np.ones((3, 4)), Condition(timestep=5, label=1), result.denoiser.weights, config)
    np.testing.assert_array_equal(v, np.zeros((3, 4)))


def test_denoise_rejects_unknown_class():
    config = _config()
    result = train_diffusion(_dataset(), config.model_copy(update={"train": TrainConfig(steps=0)}))
    with pytest.raises(ConfigError):
        denoise(np.zeros((3, 4)), Condition(timestep=1, label=2), result.denoiser.weights, config)


def test_guidance_extrapolates_from_null_class():
    config = _config()
    weights = train_diffusion(_dataset(), config).denoiser.weights
    z = np.random.default_rng(6).standard_normal((3, 4))
    conditioned = denoise(z, Condition(timestep=7, label=0), weights, config)
    unconditioned = denoise(z, Condition(timestep=7, label=None), weights, config)
    guided = denoise(z, Condition(timestep=7, label=0), weights, config.model_copy(update={"guidance_scale": 2.5}))
    np.testing.assert_allclose(guided, unconditioned + 2.5 * (conditioned - unconditioned), atol=1e-12)


# ============================================================================
# Training and sampling
# ============================================================================

def test_diffusion_training_is_deterministic_and_resumable():
    config = _config()
    full = train_diffusion(_dataset(), config)
    assert full.step == 3
    assert all(np.isfinite(row["loss"]) for row in full.log)
    head = train_diffusion(_dataset(), config.model_copy(update={"train": config.train.model_copy(
        update={"stop_step": 1})}))
    tail = train_diffusion(_dataset(), config, weights=head.denoiser.weights,
                           optimizer_state=head.optimizer_state, start_step=head.step)
    for name, value in full.denoiser.weights.arrays().items():
        np.testing.assert_array_equal(value, tail.denoiser.weights[name].data)


def test_training_rejects_out_of_range_labels():
    data = _dataset()
    data.labels[0] = 2
    with pytest.raises(DatasetError):
        train_diffusion(data, _config())


def test_diffusion_training_aborts_on_degenerate_rotation(monkeypatch):
    def failing_loss(*args, **kwargs):
        raise DegenerateRotationError((0,), "parallel columns")

    monkeypatch.setattr(diffusion, "diffusion_loss", failing_loss)
    with pytest.raises(TrainingAborted) as info:
        train_diffusion(_dataset(), _config())
    assert info.value.step == 0
    assert info.value.last_good


def test_sampling_is_seeded_and_valid():
    config = _config()
    result = train_diffusion(_dataset(), config)
    schedule = make_schedule(config.timesteps, config.beta_min, config.beta_max)
    first, info = sample_params(result.denoiser, schedule, label=1, seed=9)
    second, _ = sample_params(result.denoiser, schedule, label=1, seed=9)
    other, _ = sample_params(result.denoiser, schedule, label=1, seed=10)
    np.testing.assert_array_equal(first.to_array(), second.to_array())
    assert not np.array_equal(first.to_array(), other.to_array())
    assert first.check() is first
    assert first.f_max == 2.5
    assert info["clamped"] >= 0


def test_sampling_checks_context_shape():
    config = _config()
    result = train_diffusion(_dataset(), config)
    schedule = make_schedule(config.timesteps, config.beta_min, config.beta_max)
    dp, _ = ddim_sample(result.denoiser, schedule, context=np.zeros((3, 4)), steps=2, eta=0.0)
    assert dp.values.shape == (3, 4)
    with pytest.raises(ShapeMismatchError):
        ddim_sample(result.denoiser, schedule, context=np.zeros((5, 4)))


def test_latent_dataset_from_frozen_encoder():
    ae_config = ModelConfig(channels=3, d_latent=8, joint_latents=2, joint_embed=4, joint_blocks=0,
                            root_latents=2, root_embed=4, root_blocks=0, decoder_blocks=1, heads=2,
                            temporal_pe=TemporalPEConfig(k=2, f_max=8.0), graph_pe=GraphPEConfig(dim=2),
                            window_frames=12)
    clips = [synth_motion(c, SkeletonSpec(joints=4), frames=12, seed=c)[1] for c in (0, 1)]
    weights = init_weights(ae_config)
    data = build_latent_dataset(clips, [0, -1], weights, ae_config, _config())
    assert data.values.shape == (2, 3, 4)
    assert data.context.shape == (2, 3, 4)
    np.testing.assert_array_equal(data.labels, [0, -1])
    assert data.f_max == pytest.approx(0.5 * 8 / (2.0 * np.pi))
    assert data.window_sec == pytest.approx(0.2)
    assert weights["bottleneck.w"].requires_grad
    no_context = build_latent_dataset(clips, [0, 1], weights, ae_config, _config(use_context=False))
    assert no_context.context is None
    with pytest.raises(DatasetError):
        build_latent_dataset(clips, [0], weights, ae_config, _config())
