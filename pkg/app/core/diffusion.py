# app/core/diffusion.py
"""
Latent diffusion over periodic parameters.

Each latent channel (s, a, f, b) is mapped to an unbounded Cartesian form
(a cos 2pi s, a sin 2pi s, probit(f / f_max), b), standardized per channel
and component, and diffused with a linear-beta schedule. The denoiser is a
transformer over channel tokens with AdaLN modulation from the timestep,
class and partial-motion context; it predicts v. Samples come from a DDIM
sampler whose eta interpolates towards ancestral sampling.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import special

from app.core import autodiff as ad
from app.core.autodiff import Tensor
from app.core.exceptions import (ConfigError, DatasetError, DegenerateRotationError, NonFiniteError, ParamsError,
                                 ShapeMismatchError, TrainingAborted)
from app.core.funphase import encode
from app.core.layers import (ParameterSet, adaln_block, init_adaln_block, init_linear, init_mlp, linear, mlp,
                             sinusoidal_embedding)
from app.core.optim import AdamW, AdamWState, cosine_with_warmup
from app.core.settings import status, warn_once
from app.schemas.config import DiffusionConfig, ModelConfig
from app.schemas.motion import MotionClip
from app.schemas.phase import PARAM_TOLERANCE, Condition, DiffParams, PeriodicParams
from app.services.dataset import mask_keyframes

AMPLITUDE_EPS = 1e-12
F_INSET = 1e-6
STD_FLOOR = 1e-6


# ============================================================================
# Phase transform
# ============================================================================

def phase_to_diff(params: PeriodicParams, f_max: Optional[float] = None) -> DiffParams:
    """(s, a, f, b) -> (a cos 2pi s, a sin 2pi s, sqrt(2) erfinv(2 f / f_max - 1), b)."""
    f_max = params.f_max if f_max is None else f_max
    f = params.f
    if np.any(f < -PARAM_TOLERANCE) or np.any(f > f_max + PARAM_TOLERANCE):
        raise ParamsError(f"frequency outside [0, {f_max:.6g}]: [{f.min():.6g}, {f.max():.6g}]")
    f = np.clip(f, F_INSET * f_max, (1.0 - F_INSET) * f_max)
    angle = 2.0 * np.pi * params.s
    values = np.stack([
        params.a * np.cos(angle),
        params.a * np.sin(angle),
        np.sqrt(2.0) * special.erfinv(2.0 * f / f_max - 1.0),
        params.b,
    ], axis=-1)
    return DiffParams(values=values, f_max=f_max, window_sec=params.window_sec)


def diff_to_phase(dp: DiffParams) -> PeriodicParams:
    """Inverse transform; total on finite input, output always passes PeriodicParams.check()."""
    a_cos, a_sin, probit, b = dp.values.T
    a = np.sqrt(a_cos * a_cos + a_sin * a_sin + AMPLITUDE_EPS)
    s = np.mod(np.arctan2(a_sin, a_cos) / (2.0 * np.pi), 1.0)
    s = np.where(s >= 1.0, 0.0, s)
    f = dp.f_max * 0.5 * (1.0 + special.erf(probit / np.sqrt(2.0)))
    return PeriodicParams(s=s, a=a, f=np.clip(f, 0.0, dp.f_max), b=b, f_max=dp.f_max, window_sec=dp.window_sec)


def transform_f_max(config: DiffusionConfig, ae_config: ModelConfig, window_sec: float) -> float:
    """'latent': 0.5 * d_latent / (2 pi); 'nyquist': d_latent / (2 window_sec)."""
    if config.f_max_rule == "latent":
        return 0.5 * ae_config.d_latent / (2.0 * np.pi)
    return ae_config.d_latent / (2.0 * window_sec)


def to_diffusion_space(params: PeriodicParams, f_max: float, use_transform: bool = True
                       ) -> Tuple[np.ndarray, int]:
    """(C, 4) diffusion-space values and the number of frequencies clamped down to f_max."""
    clamped = int(np.sum(params.f > f_max))
    f = np.minimum(params.f, f_max)
    params = PeriodicParams(s=params.s, a=params.a, f=f, b=params.b, f_max=f_max, window_sec=params.window_sec)
    if not use_transform:
        return params.to_array(), clamped
    return phase_to_diff(params).values, clamped


def from_diffusion_space(values: np.ndarray, f_max: float, window_sec: float,
                         use_transform: bool = True) -> PeriodicParams:
    if use_transform:
        return diff_to_phase(DiffParams(values=values, f_max=f_max, window_sec=window_sec))
    # raw ablation: fold sampled values back into the valid ranges
    values = np.asarray(values, dtype=np.float64)
    s = np.mod(values[:, 0], 1.0)
    return PeriodicParams(s=np.where(s >= 1.0, 0.0, s), a=np.abs(values[:, 1]),
                          f=np.clip(values[:, 2], 0.0, f_max), b=values[:, 3],
                          f_max=f_max, window_sec=window_sec)


# ============================================================================
# Noise schedule and v-parameterization
# ============================================================================

class NoiseSchedule(BaseModel):
    """Linear betas; arrays are indexed by t = 0..T with alpha_bar[0] = 1."""

    model_config = ConfigDict(extra="forbid", arbitrary_types_allowed=True)

    timesteps: int = Field(..., ge=1)
    beta_min: float
    beta_max: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray

    def snr(self, t) -> np.ndarray:
        ab = self.alpha_bar[np.asarray(t)]
        return ab / (1.0 - ab)


def make_schedule(timesteps: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """beta_t = beta_min + (t / T)(beta_max - beta_min) for t = 1..T."""
    if timesteps < 1:
        raise ConfigError(f"timesteps must be >= 1, got {timesteps}")
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ConfigError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    t = np.arange(timesteps + 1, dtype=np.float64)
    betas = beta_min + (t / timesteps) * (beta_max - beta_min)
    betas[0] = 0.0
    alphas = 1.0 - betas
    return NoiseSchedule(timesteps=timesteps, beta_min=beta_min, beta_max=beta_max,
                         betas=betas, alphas=alphas, alpha_bar=np.cumprod(alphas))


def _coef(schedule: NoiseSchedule, t, ndim: int) -> Tuple[np.ndarray, np.ndarray]:
    """sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t) shaped to broadcast over trailing axes."""
    t = np.asarray(t)
    ab = schedule.alpha_bar[t].reshape(t.shape + (1,) * (ndim - t.ndim))
    return np.sqrt(ab), np.sqrt(1.0 - ab)


def q_sample(z0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    sa, sb = _coef(schedule, t, np.ndim(z0))
    return sa * z0 + sb * eps


def v_target(z0: np.ndarray, eps: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    sa, sb = _coef(schedule, t, np.ndim(z0))
    return sa * eps - sb * z0


def recover(z_t: np.ndarray, v: np.ndarray, t, schedule: NoiseSchedule) -> Tuple[np.ndarray, np.ndarray]:
    """(z0_hat, eps_hat) from a noisy sample and its v."""
    sa, sb = _coef(schedule, t, np.ndim(z_t))
    return sa * z_t - sb * v, sb * z_t + sa * v


def min_snr_weight(t, schedule: NoiseSchedule, gamma: float = 5.0) -> np.ndarray:
    return np.minimum(schedule.snr(t), gamma)


# ============================================================================
# DDIM
# ============================================================================

def ddim_timesteps(timesteps: int, steps: int) -> np.ndarray:
    """floor(s T / S) for s = 0..S; strictly increasing when S <= T."""
    if not 1 <= steps <= timesteps:
        raise ConfigError(f"sampling steps must be in [1, {timesteps}], got {steps}")
    return (np.arange(steps + 1) * timesteps) // steps


def ddim_step(z_t: np.ndarray, v_hat: np.ndarray, t: int, t_prev: int, schedule: NoiseSchedule,
              eta: float, noise: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float, bool]:
    """
    One reverse step t -> t_prev.

    Returns (z_prev, mean, sigma, clamped) where clamped reports that
    1 - alpha_bar_prev - sigma^2 went negative and was set to 0.
    """
    ab_t, ab_prev = schedule.alpha_bar[t], schedule.alpha_bar[t_prev]
    z0_hat, eps_hat = recover(z_t, v_hat, t, schedule)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    direction = 1.0 - ab_prev - sigma * sigma
    clamped = bool(direction < 0.0)
    mean = np.sqrt(ab_prev) * z0_hat + np.sqrt(max(direction, 0.0)) * eps_hat
    return mean + sigma * noise, mean, float(sigma), clamped


# ============================================================================
# Standardization
# ============================================================================

class LatentStats(BaseModel):
    """Per channel and component mean / std of the training latents."""

    model_config = ConfigDict(extra="forbid", arbitrary_types_allowed=True)

    mean: np.ndarray = Field(..., description="(C, 4)")
    std: np.ndarray = Field(..., description="(C, 4), floored at 1e-6")

    @classmethod
    def fit(cls, values: np.ndarray) -> "LatentStats":
        values = np.asarray(values, dtype=np.float64)
        return cls(mean=values.mean(axis=0), std=np.maximum(values.std(axis=0), STD_FLOOR))


def standardize(values: np.ndarray, stats: LatentStats) -> np.ndarray:
    return (values - stats.mean) / stats.std


def destandardize(values: np.ndarray, stats: LatentStats) -> np.ndarray:
    return values * stats.std + stats.mean


# ============================================================================
# Latent dataset (frozen autoencoder)
# ============================================================================

@dataclass
class LatentDataset:
    values: np.ndarray                    # (B, C, 4) diffusion space, not standardized
    labels: np.ndarray                    # (B,), -1 when unlabelled
    context: Optional[np.ndarray]         # (B, C, 4) or None
    f_max: float
    window_sec: float
    use_transform: bool = True
    clamped: int = 0

    def __len__(self) -> int:
        return self.values.shape[0]


def clip_latent(clip: MotionClip, ae_weights, ae_config: ModelConfig, config: DiffusionConfig
                ) -> Tuple[np.ndarray, float, float, int]:
    """Diffusion-space (C, 4) latent of one clip, with f_max, window and clamp count."""
    params, _ = encode(clip, ae_weights, ae_config)
    f_max = transform_f_max(config, ae_config, params.window_sec)
    values, clamped = to_diffusion_space(params, f_max, config.use_phase_transform)
    return values, f_max, params.window_sec, clamped


def build_latent_dataset(clips: Sequence[MotionClip], labels: Sequence[int], ae_weights, ae_config: ModelConfig,
                         config: DiffusionConfig) -> LatentDataset:
    """Encode every clip (and its keyframe-masked copy when context is on) with the frozen encoder."""
    if not clips:
        raise DatasetError("latent dataset needs at least one clip")
    if len(labels) != len(clips):
        raise DatasetError(f"{len(clips)} clips but {len(labels)} labels")
    frozen = {name: t.detach() for name, t in ae_weights.items()}
    values, contexts = [], []
    clamped = 0
    f_max = window = None
    for clip in clips:
        v, f_max, window, n = clip_latent(clip, frozen, ae_config, config)
        values.append(v)
        clamped += n
        if config.use_context:
            masked, _ = mask_keyframes(clip, config.keyframes)
            c, _, _, n = clip_latent(masked, frozen, ae_config, config)
            contexts.append(c)
            clamped += n
    if clamped:
        warn_once("latent-f-clamp", f"{clamped} latent frequencies above f_max={f_max:.4g} Hz were clamped")
    return LatentDataset(values=np.stack(values), labels=np.asarray(labels, dtype=np.int64),
                         context=np.stack(contexts) if contexts else None, f_max=f_max, window_sec=window,
                         use_transform=config.use_phase_transform, clamped=clamped)


# ============================================================================
# Denoiser
# ============================================================================

def init_denoiser(config: DiffusionConfig, channels: int) -> ParameterSet:
    ps = ParameterSet(config.seed)
    e = config.embed
    init_linear(ps, "embed_in", 4, e)
    init_mlp(ps, "time", e, e)
    ps.normal("class_table", (config.num_classes + 1, e), 0.02)
    init_linear(ps, "context", channels * 4 + 1, e)
    init_mlp(ps, "cond", 3 * e, 2 * e, e)
    for i in range(config.blocks):
        init_adaln_block(ps, f"blocks{i}", e, e, config.heads, config.mlp_ratio)
    ps.zeros("out.w", (e, 4))
    ps.zeros("out.b", (4,))
    return ps


def _denoise_tensors(weights, z_t: np.ndarray, t: np.ndarray, labels: np.ndarray,
                     context: Optional[np.ndarray], present: np.ndarray, config: DiffusionConfig) -> Tensor:
    """Batched v prediction: z_t (B, C, 4), labels already mapped to [0, num_classes] -> (B, C, 4)."""
    bsz, channels, _ = z_t.shape
    e = config.embed
    tokens = linear(weights, "embed_in", z_t) + sinusoidal_embedding(np.arange(channels), e)

    t_emb = mlp(weights, "time", sinusoidal_embedding(t, e))
    y_emb = ad.take(weights["class_table"], labels, axis=0)
    ctx = np.zeros((bsz, channels * 4)) if context is None else context.reshape(bsz, -1) * present[:, None]
    c_emb = linear(weights, "context", np.concatenate([ctx, present[:, None]], axis=-1))
    cond = mlp(weights, "cond", ad.concat([t_emb, y_emb, c_emb], axis=-1))

    h = tokens
    for i in range(config.blocks):
        h = adaln_block(weights, f"blocks{i}", h, cond, config.heads)
    return linear(weights, "out", ad.layer_norm(h))


def _label_index(label: Optional[int], config: DiffusionConfig) -> int:
    if label is None or label < 0:
        return config.num_classes
    if label >= config.num_classes:
        raise ConfigError(f"class label {label} out of range for {config.num_classes} classes")
    return label


def denoise(z_t: np.ndarray, cond: Condition, weights, config: DiffusionConfig) -> np.ndarray:
    """v prediction for one (C, 4) sample, with classifier-free guidance when guidance_scale != 1."""
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_t.ndim != 2 or z_t.shape[1] != 4:
        raise ShapeMismatchError("denoise", z_t.shape, detail="expected (C, 4)")
    frozen = {name: t.detach() for name, t in weights.items()}
    present = np.array([0.0 if cond.context is None else 1.0])
    context = None if cond.context is None else np.asarray(cond.context)[None]
    label = _label_index(cond.label, config)
    t = np.array([cond.timestep])

    v = _denoise_tensors(frozen, z_t[None], t, np.array([label]), context, present, config).data[0]
    if config.guidance_scale != 1.0 and label != config.num_classes:
        v_null = _denoise_tensors(frozen, z_t[None], t, np.array([config.num_classes]),
                                  context, present, config).data[0]
        v = v_null + config.guidance_scale * (v - v_null)
    return v


@dataclass
class Denoiser:
    """Trained denoiser plus everything needed to turn its samples back into PeriodicParams."""
    weights: ParameterSet
    config: DiffusionConfig
    stats: LatentStats
    channels: int
    f_max: float
    window_sec: float


# ============================================================================
# Training
# ============================================================================

def diffusion_loss(v_hat: Tensor, v: np.ndarray, t: np.ndarray, schedule: NoiseSchedule, gamma: float) -> Tensor:
    """mean_b lambda_t * mean((v_hat - v)^2) with min-SNR weights."""
    lam = min_snr_weight(t, schedule, gamma)
    per_sample = ad.mean(ad.square(v_hat - v), axis=(1, 2))
    return ad.mean(per_sample * lam)


@dataclass
class DiffusionTrainResult:
    denoiser: Denoiser
    optimizer_state: AdamWState
    step: int
    log: List[Dict[str, float]] = field(default_factory=list)


def train_diffusion(dataset: LatentDataset, config: DiffusionConfig, weights: Optional[ParameterSet] = None,
                    optimizer_state: Optional[AdamWState] = None, start_step: int = 0) -> DiffusionTrainResult:
    """
    Min-SNR weighted v-prediction training on standardized latents.

    Labels and context are dropped independently per sample so the null
    class and the context-free path are trained alongside the conditioned ones.
    """
    if len(dataset) == 0:
        raise DatasetError("latent dataset is empty")
    if np.any(dataset.labels >= config.num_classes):
        raise DatasetError(f"labels exceed num_classes={config.num_classes}")
    schedule = make_schedule(config.timesteps, config.beta_min, config.beta_max)
    stats = LatentStats.fit(dataset.values)
    z_all = standardize(dataset.values, stats)
    ctx_all = None if dataset.context is None or not config.use_context else standardize(dataset.context, stats)
    channels = dataset.values.shape[1]

    weights = init_denoiser(config, channels) if weights is None else weights
    train_cfg = config.train
    opt_cfg = train_cfg.optimizer
    optimizer = AdamW(lr=opt_cfg.lr, betas=opt_cfg.betas, weight_decay=opt_cfg.weight_decay,
                      eps=opt_cfg.eps, max_grad_norm=opt_cfg.max_grad_norm)
    if optimizer_state is not None:
        optimizer.state = optimizer_state

    log: List[Dict[str, float]] = []
    total_steps = train_cfg.steps
    end = total_steps if train_cfg.stop_step is None else min(train_cfg.stop_step, total_steps)
    status(f"🌫️ Training denoiser: {len(dataset)} latents x {channels} channels, steps {start_step}->{end} of {total_steps}")
    for step in range(start_step, end):
        rng = np.random.default_rng((train_cfg.seed, step))
        batch = rng.choice(len(dataset), size=min(train_cfg.batch_size, len(dataset)), replace=False)
        bsz = len(batch)
        t = rng.integers(1, schedule.timesteps + 1, size=bsz)
        eps = rng.standard_normal((bsz, channels, 4))
        drop_label = rng.random(bsz) < config.label_dropout
        drop_ctx = rng.random(bsz) < config.context_dropout

        z0 = z_all[batch]
        z_t = q_sample(z0, t, eps, schedule)
        v = v_target(z0, eps, t, schedule)
        labels = np.where(drop_label | (dataset.labels[batch] < 0), config.num_classes, dataset.labels[batch])
        present = np.zeros(bsz) if ctx_all is None else (~drop_ctx).astype(np.float64)
        context = None if ctx_all is None else ctx_all[batch]
        lr = cosine_with_warmup(step, total_steps, opt_cfg.lr, opt_cfg.warmup_fraction)

        weights.zero_grad()
        try:
            v_hat = _denoise_tensors(weights, z_t, t, labels, context, present, config)
            objective = diffusion_loss(v_hat, v, t, schedule, config.min_snr_gamma)
            ad.backward(objective)
        except (NonFiniteError, DegenerateRotationError) as exc:
            raise TrainingAborted(str(exc), step, last_good=weights.arrays(), state=optimizer.state) from exc

        new_params, grad_norm = optimizer.step(weights.tensors, lr=lr)
        if not np.isfinite(grad_norm):
            raise TrainingAborted("non-finite gradient norm", step, last_good=weights.arrays(), state=optimizer.state)
        weights.update(new_params)

        row = {"step": step, "lr": lr, "loss": objective.item(), "grad_norm": grad_norm}
        log.append(row)
        if step % train_cfg.log_every == 0 or step == end - 1:
            status(f"   step {step}/{total_steps} lr={lr:.2e} loss={row['loss']:.5f}")

    denoiser = Denoiser(weights=weights, config=config, stats=stats, channels=channels,
                        f_max=dataset.f_max, window_sec=dataset.window_sec)
    return DiffusionTrainResult(denoiser=denoiser, optimizer_state=optimizer.state,
                                step=max(start_step, end), log=log)


# ============================================================================
# Sampling
# ============================================================================

def ddim_sample(denoiser: Denoiser, schedule: NoiseSchedule, label: Optional[int] = None,
                context: Optional[np.ndarray] = None, steps: Optional[int] = None, eta: Optional[float] = None,
                seed: int = 0) -> Tuple[DiffParams, Dict[str, int]]:
    """
    Draw one latent. context is a diffusion-space (C, 4) latent of a partial
    clip (not standardized). Returns de-standardized values and
    {"clamped": number of steps whose direction term was clamped}.
    """
    config = denoiser.config
    steps = config.sample_steps if steps is None else steps
    eta = config.eta if eta is None else eta
    grid = ddim_timesteps(schedule.timesteps, steps)
    ctx = None
    if context is not None and config.use_context:
        ctx = np.asarray(context, dtype=np.float64)
        if ctx.shape != (denoiser.channels, 4):
            raise ShapeMismatchError("ddim_sample", ctx.shape, (denoiser.channels, 4))
        ctx = standardize(ctx, denoiser.stats)

    rng = np.random.default_rng(seed)
    z = rng.standard_normal((denoiser.channels, 4))
    clamped = 0
    for i in range(steps, 0, -1):
        t, t_prev = int(grid[i]), int(grid[i - 1])
        v_hat = denoise(z, Condition(timestep=t, label=label, context=ctx), denoiser.weights, config)
        noise = rng.standard_normal(z.shape)
        z, _, _, was_clamped = ddim_step(z, v_hat, t, t_prev, schedule, eta, noise)
        clamped += int(was_clamped)
    if clamped:
        warn_once("ddim-clamp", f"DDIM direction term clamped to 0 on {clamped} steps")
    values = destandardize(z, denoiser.stats)
    return DiffParams(values=values, f_max=denoiser.f_max, window_sec=denoiser.window_sec), {"clamped": clamped}


def sample_params(denoiser: Denoiser, schedule: NoiseSchedule, label: Optional[int] = None,
                  context: Optional[np.ndarray] = None, seed: int = 0, steps: Optional[int] = None,
                  eta: Optional[float] = None) -> Tuple[PeriodicParams, Dict[str, int]]:
    """ddim_sample followed by the inverse transform."""
    dp, info = ddim_sample(denoiser, schedule, label=label, context=context, steps=steps, eta=eta, seed=seed)
    params = from_diffusion_space(dp.values, dp.f_max, dp.window_sec, denoiser.config.use_phase_transform)
    return params, info
