# app/core/funphase.py
"""
FunPhase autoencoder.

Encoder
  joint tokens, one per (frame, joint): [Rot6D, graph PE, time PE]
  root tokens, one per frame:           [root / length_scale, time PE]
  each pathway: learned latents cross-attend to the tokens, then
  self-attention blocks, then a projection to d_latent. Both latent sets
  are stacked and a circular conv1d maps them to C channels x N samples.
  The curve is reduced to (s, a, f, b) per channel.

Decoder
  the sinusoids are evaluated on the uniform latent grid, a separate
  circular conv maps C channels back to the stacked latents, and every
  (time, joint) query cross-attends to its pathway's memory on its own.
  Queries never see each other, so any subset of queries decodes to the
  matching slice of a full decode.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core import autodiff as ad
from app.core.autodiff import Tensor
from app.core.encodings import graph_pe, temporal_encode
from app.core.exceptions import (
    DatasetError, DegenerateRotationError, GraphError, NonFiniteError, ShapeMismatchError, TrainingAborted,
)
from app.core.geometry import geodesic_distance, lerp_positions, matrix_to_rot6d, rot6d_to_matrix, slerp_rotations
from app.core.kinematics import detect_contacts, foot_loss, forward_kinematics
from app.core.layers import ParameterSet, block, init_block, init_linear, linear
from app.core.optim import AdamW, AdamWState, cosine_with_warmup
from app.core.periodic import dft_decompose, nyquist, phase_manifold, phase_regress, sinusoid, uniform_latent_grid
from app.core.settings import status
from app.schemas.config import ModelConfig, TrainConfig
from app.schemas.motion import MotionClip, PartialMotion, Skeleton
from app.schemas.phase import LatentCurve, PeriodicParams

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
LOSS_KEYS = ("l_rot", "l_root", "l_fk", "l_foot", "total")


# ============================================================================
# Weights
# ============================================================================

def init_weights(config: ModelConfig) -> ParameterSet:
    """Seeded initialization; shapes depend on the config only, not on the skeleton."""
    ps = ParameterSet(config.seed)
    k2 = config.temporal_pe.dim
    g = config.graph_pe.dim
    n = config.d_latent
    ej, er = config.joint_embed, config.root_embed
    stacked = config.joint_latents + config.root_latents

    init_linear(ps, "joint_enc.embed", 6 + g + k2, ej)
    ps.normal("joint_enc.latents", (config.joint_latents, ej), 0.2)
    init_block(ps, "joint_enc.cross", ej, ej, config.heads, config.mlp_ratio)
    for i in range(config.joint_blocks):
        init_block(ps, f"joint_enc.self{i}", ej, None, config.heads, config.mlp_ratio)
    init_linear(ps, "joint_enc.proj", ej, n)

    init_linear(ps, "root_enc.embed", 3 + k2, er)
    ps.normal("root_enc.latents", (config.root_latents, er), 0.2)
    init_block(ps, "root_enc.cross", er, er, config.heads, config.mlp_ratio)
    for i in range(config.root_blocks):
        init_block(ps, f"root_enc.self{i}", er, None, config.heads, config.mlp_ratio)
    init_linear(ps, "root_enc.proj", er, n)

    ps.normal("bottleneck.w", (config.channels, stacked, config.conv_kernel),
              1.0 / np.sqrt(stacked * config.conv_kernel))
    ps.zeros("bottleneck.b", (config.channels,))
    ps.normal("phase.w", (config.channels, n, 2), 1.0 / np.sqrt(n))
    ps.zeros("phase.b", (config.channels, 2))

    ps.normal("unbottleneck.w", (stacked, config.channels, config.conv_kernel),
              1.0 / np.sqrt(config.channels * config.conv_kernel))
    ps.zeros("unbottleneck.b", (stacked,))

    init_linear(ps, "joint_dec.memory", n, ej)
    init_linear(ps, "joint_dec.query", g + k2, ej)
    for i in range(config.decoder_blocks):
        init_block(ps, f"joint_dec.block{i}", ej, ej, config.heads, config.mlp_ratio)
    init_linear(ps, "joint_dec.head", ej, 6, std=0.01)
    ps.tensors["joint_dec.head.b"].data[:] = IDENTITY_6D

    init_linear(ps, "root_dec.memory", n, er)
    init_linear(ps, "root_dec.query", k2, er)
    for i in range(config.decoder_blocks):
        init_block(ps, f"root_dec.block{i}", er, er, config.heads, config.mlp_ratio)
    init_linear(ps, "root_dec.head", er, 3, std=0.01)
    return ps


def window_sec(config: ModelConfig, frame_rate: float) -> float:
    """Duration the latent curve spans: window_frames / frame_rate."""
    return config.window_frames / frame_rate


# ============================================================================
# Encoder
# ============================================================================

def _graph_features(skeleton: Skeleton, config: ModelConfig) -> np.ndarray:
    gpe = graph_pe(skeleton, config.graph_pe)
    if gpe.shape != (skeleton.num_joints, config.graph_pe.dim):
        raise GraphError(f"graph PE has shape {gpe.shape}, model expects ({skeleton.num_joints}, {config.graph_pe.dim})")
    return gpe


def clip_tokens(clip: MotionClip, config: ModelConfig) -> Tuple[np.ndarray, np.ndarray]:
    """(T*J, 6+G+2K) joint tokens and (T, 3+2K) root tokens."""
    t, j = clip.frames, clip.skeleton.num_joints
    tpe = temporal_encode(clip.times, config.temporal_pe)
    gpe = _graph_features(clip.skeleton, config)
    joint = np.concatenate([
        clip.rotations,
        np.broadcast_to(gpe[None], (t, j, gpe.shape[1])),
        np.broadcast_to(tpe[:, None], (t, j, tpe.shape[1])),
    ], axis=-1).reshape(t * j, -1)
    root = np.concatenate([clip.root_positions / config.length_scale_cm, tpe], axis=-1)
    return joint, root


def _perceiver(weights, prefix: str, tokens, blocks: int, heads: int) -> Tensor:
    h = linear(weights, f"{prefix}.embed", tokens)
    z = block(weights, f"{prefix}.cross", weights[f"{prefix}.latents"], heads, context=h)
    for i in range(blocks):
        z = block(weights, f"{prefix}.self{i}", z, heads)
    return linear(weights, f"{prefix}.proj", z)


def encode_tokens(weights, joint_tokens, root_tokens, config: ModelConfig, window: float):
    """Token sets -> (s, a, f, b, curve) as Tensors."""
    zj = _perceiver(weights, "joint_enc", joint_tokens, config.joint_blocks, config.heads)
    zr = _perceiver(weights, "root_enc", root_tokens, config.root_blocks, config.heads)
    stacked = ad.concat([zj, zr], axis=0)
    curve = ad.circular_conv1d(stacked, weights["bottleneck.w"], weights["bottleneck.b"])
    spectrum = dft_decompose(curve, window)
    s = phase_regress(curve, weights["phase.w"], weights["phase.b"])
    return s, spectrum.amplitude, spectrum.frequency, spectrum.offset, curve


def encode_tensors(weights, clip: MotionClip, config: ModelConfig):
    joint, root = clip_tokens(clip, config)
    return encode_tokens(weights, joint, root, config, window_sec(config, clip.frame_rate))


def encode(clip: MotionClip, weights, config: ModelConfig) -> Tuple[PeriodicParams, LatentCurve]:
    """Clip -> periodic parameters and the latent curve they were read from."""
    window = window_sec(config, clip.frame_rate)
    s, a, f, b, curve = encode_tensors(weights, clip, config)
    params = PeriodicParams(s=s.data, a=a.data, f=f.data, b=b.data,
                            f_max=nyquist(config.d_latent, window), window_sec=window)
    return params, LatentCurve(values=curve.data, window_sec=window)


# ============================================================================
# Decoder
# ============================================================================

def decode_tensors(weights, s, a, f, b, query_times: Sequence[float], query_joints: Sequence[int],
                   skeleton: Skeleton, config: ModelConfig, window: float) -> Tuple[Tensor, Tensor]:
    """(Tq, Jq, 6) Rot6D and (Tq, 3) root positions in cm."""
    times = np.asarray(query_times, dtype=np.float64).reshape(-1)
    joints = list(query_joints)
    if times.size == 0 or not joints:
        raise ShapeMismatchError("decode", times.shape, (len(joints),), detail="empty query set")
    if min(joints) < 0 or max(joints) >= skeleton.num_joints:
        raise ShapeMismatchError("decode", (len(joints),), (skeleton.num_joints,), detail="query joint out of range")

    curve = sinusoid(s, a, f, b, uniform_latent_grid(config.d_latent), window)
    memory = ad.circular_conv1d(curve, weights["unbottleneck.w"], weights["unbottleneck.b"])
    mem_joint = linear(weights, "joint_dec.memory", memory[:config.joint_latents])
    mem_root = linear(weights, "root_dec.memory", memory[config.joint_latents:])

    tq, jq = times.size, len(joints)
    tpe = temporal_encode(times, config.temporal_pe)
    gpe = _graph_features(skeleton, config)[joints]
    queries = np.concatenate([
        np.broadcast_to(gpe[None], (tq, jq, gpe.shape[1])),
        np.broadcast_to(tpe[:, None], (tq, jq, tpe.shape[1])),
    ], axis=-1).reshape(tq * jq, -1)

    q = linear(weights, "joint_dec.query", queries)
    for i in range(config.decoder_blocks):
        q = block(weights, f"joint_dec.block{i}", q, config.heads, context=mem_joint)
    rot = ad.reshape(linear(weights, "joint_dec.head", q), (tq, jq, 6))

    r = linear(weights, "root_dec.query", tpe)
    for i in range(config.decoder_blocks):
        r = block(weights, f"root_dec.block{i}", r, config.heads, context=mem_root)
    root = linear(weights, "root_dec.head", r) * config.length_scale_cm
    return rot, root


def decode(params: PeriodicParams, query_times: Sequence[float], query_joints: Optional[Sequence[int]],
           weights, config: ModelConfig, skeleton: Skeleton) -> PartialMotion:
    """Query the motion function at arbitrary normalized times and a joint subset (None = all)."""
    joints = list(range(skeleton.num_joints)) if query_joints is None else list(query_joints)
    rot, root = decode_tensors(weights, params.s, params.a, params.f, params.b,
                               query_times, joints, skeleton, config, params.window_sec)
    return PartialMotion(times=np.asarray(query_times, dtype=np.float64).reshape(-1), joints=joints,
                         rotations=rot.data, root_positions=root.data)


def reconstruct(clip: MotionClip, weights, config: ModelConfig) -> MotionClip:
    params, _ = encode(clip, weights, config)
    out = decode(params, clip.times, None, weights, config, clip.skeleton)
    return clip.with_motion(out.rotations, out.root_positions)


# ============================================================================
# Loss
# ============================================================================

def loss(clip: MotionClip, reconstruction, config: ModelConfig, frames: Optional[Sequence[int]] = None,
         joints: Optional[Sequence[int]] = None) -> Tuple[Tensor, Dict[str, float]]:
    """
    total = rec * (L_rot + L_root) + phys * (fk * L_FK + foot * L_foot)

    reconstruction is (rot6d (T', J, 6), root (T', 3)) or a PartialMotion over
    all joints at the clip's frames (or at `frames` when given). `joints`
    restricts L_rot only. Positional terms are computed in length_scale units.
    """
    if isinstance(reconstruction, PartialMotion):
        rot_pred, root_pred = reconstruction.rotations, reconstruction.root_positions
    else:
        rot_pred, root_pred = reconstruction
    rot_pred, root_pred = ad.as_tensor(rot_pred), ad.as_tensor(root_pred)
    skeleton = clip.skeleton
    idx = np.arange(clip.frames) if frames is None else np.asarray(frames, dtype=np.int64)
    if rot_pred.shape != (len(idx), skeleton.num_joints, 6) or root_pred.shape != (len(idx), 3):
        raise ShapeMismatchError("loss", rot_pred.shape, root_pred.shape,
                                 detail=f"reconstruction must cover {len(idx)} frames x {skeleton.num_joints} joints")
    scale = 1.0 / config.length_scale_cm
    weights = config.loss_weights

    gt_matrices = rot6d_to_matrix(clip.rotations[idx])
    pred_matrices = rot6d_to_matrix(rot_pred)
    geo = geodesic_distance(pred_matrices, gt_matrices)
    if joints is not None:
        geo = ad.take(geo, list(joints), axis=1)
    l_rot = ad.mean(geo)

    gt_root = clip.root_positions[idx]
    l_root = ad.mean(ad.sum_(ad.square((root_pred - gt_root) * scale), axis=-1))

    pos_pred = forward_kinematics(skeleton, pred_matrices, root_pred)
    pos_gt = forward_kinematics(skeleton, gt_matrices, gt_root)
    l_fk = ad.mean(ad.sum_(ad.square((pos_pred - pos_gt) * scale), axis=-1))

    if skeleton.foot_joints and len(idx) >= 2:
        times_sec = clip.times_sec[idx]
        mask = detect_contacts(pos_gt, skeleton.foot_joints, config.contact_height,
                               config.contact_velocity, times_sec=times_sec)
        l_foot = foot_loss(pos_pred * scale, pos_gt * scale, mask, times_sec)
    else:
        l_foot = Tensor(0.0)

    total = (l_rot + l_root) * weights.rec + (l_fk * weights.fk + l_foot * weights.foot) * weights.phys
    components = {
        "l_rot": l_rot.item(), "l_root": l_root.item(), "l_fk": l_fk.item(),
        "l_foot": l_foot.item(), "total": total.item(),
    }
    return total, components


# ============================================================================
# Training
# ============================================================================

@dataclass
class TrainResult:
    weights: ParameterSet
    optimizer_state: AdamWState
    step: int
    log: List[Dict[str, float]] = field(default_factory=list)


def _sample_indices(rng: np.random.Generator, n: int, fraction: float, minimum: int) -> np.ndarray:
    if fraction >= 1.0:
        return np.arange(n)
    count = min(n, max(minimum, int(round(fraction * n))))
    return np.sort(rng.choice(n, size=count, replace=False))


def train(clips: Sequence[MotionClip], config: ModelConfig, train_config: TrainConfig,
          weights: Optional[ParameterSet] = None, optimizer_state: Optional[AdamWState] = None,
          start_step: int = 0) -> TrainResult:
    """
    Seeded AdamW loop over the reconstruction loss.

    Step randomness comes from default_rng((seed, step)), so a run resumed
    from (weights, optimizer_state, start_step) continues exactly like an
    uninterrupted one.
    """
    if not clips:
        raise DatasetError("training needs at least one clip")
    lengths = {c.frames for c in clips}
    if len(lengths) != 1:
        raise DatasetError(f"training clips must share one window length, got {sorted(lengths)}")

    weights = init_weights(config) if weights is None else weights
    opt_cfg = train_config.optimizer
    optimizer = AdamW(lr=opt_cfg.lr, betas=opt_cfg.betas, weight_decay=opt_cfg.weight_decay,
                      eps=opt_cfg.eps, max_grad_norm=opt_cfg.max_grad_norm)
    if optimizer_state is not None:
        optimizer.state = optimizer_state

    log: List[Dict[str, float]] = []
    total_steps = train_config.steps
    end = total_steps if train_config.stop_step is None else min(train_config.stop_step, total_steps)
    status(f"🏋️ Training autoencoder: {len(clips)} clips, steps {start_step}->{end} of {total_steps}")
    for step in range(start_step, end):
        rng = np.random.default_rng((train_config.seed, step))
        batch = rng.choice(len(clips), size=min(train_config.batch_size, len(clips)), replace=False)
        lr = cosine_with_warmup(step, total_steps, opt_cfg.lr, opt_cfg.warmup_fraction)
        weights.zero_grad()

        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        try:
            objective = Tensor(0.0)
            for i in batch:
                clip = clips[int(i)]
                frames = _sample_indices(rng, clip.frames, train_config.subsample_times, 2)
                joints = _sample_indices(rng, clip.skeleton.num_joints, train_config.subsample_joints, 1)
                s, a, f, b, _ = encode_tensors(weights, clip, config)
                rot, root = decode_tensors(weights, s, a, f, b, clip.times[frames],
                                           range(clip.skeleton.num_joints), clip.skeleton, config,
                                           window_sec(config, clip.frame_rate))
                total, parts = loss(clip, (rot, root), config, frames=frames, joints=joints)
                objective = objective + total * (1.0 / len(batch))
                for key in LOSS_KEYS:
                    sums[key] += parts[key] / len(batch)
            ad.backward(objective)
        except (NonFiniteError, DegenerateRotationError) as exc:
            raise TrainingAborted(str(exc), step, last_good=weights.arrays(), state=optimizer.state) from exc

        new_params, grad_norm = optimizer.step(weights.tensors, lr=lr)
        if not np.isfinite(grad_norm):
            raise TrainingAborted("non-finite gradient norm", step, last_good=weights.arrays(), state=optimizer.state)
        weights.update(new_params)

        row = {"step": step, "lr": lr, **sums, "grad_norm": grad_norm}
        log.append(row)
        if step % train_config.log_every == 0 or step == end - 1:
            status(f"   step {step}/{total_steps} lr={lr:.2e} total={sums['total']:.5f} "
                   f"rot={sums['l_rot']:.4f} root={sums['l_root']:.5f} fk={sums['l_fk']:.5f}")

    return TrainResult(weights=weights, optimizer_state=optimizer.state,
                       step=max(start_step, end), log=log)


# ============================================================================
# Analysis helpers
# ============================================================================

def phase_trajectory(clip: MotionClip, weights, config: ModelConfig, stride: int = 1) -> np.ndarray:
    """Phase-manifold points (W, 2C) of sliding windows of config.window_frames frames."""
    window = config.window_frames
    if clip.frames < window:
        raise DatasetError(f"clip has {clip.frames} frames, shorter than one {window}-frame window")
    points = []
    for start in range(0, clip.frames - window + 1, stride):
        params, _ = encode(clip.slice(start, start + window), weights, config)
        points.append(phase_manifold(params))
    return np.stack(points)


def keyframe_indices(frames: int, distance: int) -> List[int]:
    """Every `distance`-th frame plus the last one."""
    idx = list(range(0, frames, distance))
    if idx[-1] != frames - 1:
        idx.append(frames - 1)
    return idx


def slerp_baseline(clip: MotionClip, keyframes: Sequence[int]) -> MotionClip:
    """Rotations SLERPed and root linearly interpolated between keyframes."""
    keyframes = list(keyframes)
    key_times = clip.times[keyframes]
    key_rot = rot6d_to_matrix(clip.rotations[keyframes])
    rot = slerp_rotations(key_times, key_rot, clip.times)
    root = lerp_positions(key_times, clip.root_positions[keyframes], clip.times)
    return clip.with_motion(matrix_to_rot6d(rot), root)


def keyframe_reconstruction(clip: MotionClip, keyframe_distance: int, weights,
                            config: ModelConfig) -> Dict[str, MotionClip]:
    """
    Encode only the keyframes (at their original times), decode every frame.
    Returns the FunPhase reconstruction and the SLERP baseline.
    """
    keys = keyframe_indices(clip.frames, keyframe_distance)
    params, _ = encode(clip.subset(keys), weights, config)
    out = decode(params, clip.times, None, weights, config, clip.skeleton)
    return {
        "funphase": clip.with_motion(out.rotations, out.root_positions),
        "slerp": slerp_baseline(clip, keys),
    }
