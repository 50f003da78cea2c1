"""
Subcommand handlers.

Each handler takes a validated RunConfig, writes its artifacts under
run.out and returns a status dict:
    {"status": "success", "outputs": [...], ...}
Per-file batch work returns one status dict per item; the first error
is re-raised as the PhaseKitError it came from.
"""
import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.diffusion import (
    Denoiser, LatentStats, build_latent_dataset, clip_latent, init_denoiser, make_schedule, sample_params, train_diffusion,
)
from app.core.exceptions import CheckpointError, ConfigError, DatasetError, OutputExistsError, PhaseKitError, TrainingAborted
from app.core.funphase import decode, encode, init_weights, keyframe_reconstruction, phase_trajectory, train
from app.core.layers import count_parameters
from app.core.metrics import evaluate_reconstruction, merge_reports, pca_project
from app.core.settings import status, threads
from app.schemas.config import ModelConfig, RunConfig
from app.schemas.motion import ClipWindowSpec, MotionClip, Skeleton
from app.schemas.phase import PeriodicParams
from app.services.bvh import read_bvh, write_bvh
from app.services.checkpoint import load_autoencoder, load_denoiser, save_autoencoder, save_denoiser
from app.services.dataset import (
    joint_group, load_dataset, load_manifest, mask_joints, mask_keyframes, resolve_joints, window_clips, write_manifest,
)
from app.services.params_io import read_params, write_params
from app.services.reports import write_report, write_training_log
from app.services.svg import phase_plot_svg
from app.services.synth import build_skeleton, synth_motion

# ============================================================================
# Shared plumbing
# ============================================================================

def prepare_out(run: RunConfig, default: str) -> Path:
    """Output directory; an existing non-empty one needs --force."""
    out = Path(run.out or default)
    if out.exists() and not out.is_dir():
        raise OutputExistsError(f"output path {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not run.force:
        raise OutputExistsError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def run_batch(fn: Callable[[Any], Dict[str, Any]], items: Sequence[Any]) -> List[Dict[str, Any]]:
    """
    Apply fn to every item on up to PHASEKIT_THREADS workers, keeping item order.

    Each result is fn's dict with "status": "success", or
    {"status": "error", "code", "message", "error"} when fn raised a PhaseKitError.
    """
    def guarded(item: Any) -> Dict[str, Any]:
        try:
            return {"status": "success", **fn(item)}
        except PhaseKitError as exc:
            return {"status": "error", "code": exc.code, "message": str(exc), "error": exc}

    workers = min(threads(), max(1, len(items)))
    if workers == 1:
        return [guarded(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(guarded, items))


def raise_first_error(results: Sequence[Dict[str, Any]]) -> None:
    for result in results:
        if result["status"] == "error":
            raise result["error"]


def read_clip(path: str, unit_scale: float = 1.0) -> MotionClip:
    _, clip = read_bvh(path, unit_scale=unit_scale)
    return clip


def _frozen(weights) -> Dict[str, Any]:
    return {name: t.detach() for name, t in weights.items()}


def _check_model(run: RunConfig, config: ModelConfig, path: str) -> None:
    """An explicitly configured model must match the checkpoint's (the init seed is ignored)."""
    requested = run.model.model_dump(exclude={"seed"})
    if requested != ModelConfig().model_dump(exclude={"seed"}) and requested != config.model_dump(exclude={"seed"}):
        raise CheckpointError(f"checkpoint {path} was trained with a different model config than requested")


def load_model(run: RunConfig, path: Optional[str] = None) -> Tuple[Dict[str, Any], ModelConfig]:
    path = path or run.checkpoint
    if not path:
        raise ConfigError(f"'{run.command}' needs --checkpoint")
    weights, config, _, _ = load_autoencoder(path)
    _check_model(run, config, path)
    return _frozen(weights), config


def output_skeleton(run: RunConfig) -> Skeleton:
    if run.reference:
        return read_clip(run.reference, run.unit_scale).skeleton
    return build_skeleton(run.skeleton)


def input_windows(run: RunConfig, config: ModelConfig) -> List[Tuple[str, int, MotionClip]]:
    """(source path, window index, clip) for every positional BVH or manifest entry."""
    paths = list(run.inputs)
    if run.manifest:
        paths.extend(entry["path"] for entry in load_manifest(run.manifest))
    if not paths:
        raise ConfigError(f"'{run.command}' needs BVH inputs or --manifest")
    spec = ClipWindowSpec(window=config.window_frames, stride=run.stride)
    windows = []
    for path in paths:
        clips = window_clips(read_clip(path, run.unit_scale), spec)
        if not clips:
            raise DatasetError(f"{path} is shorter than one {config.window_frames}-frame window")
        windows.extend((path, i, clip) for i, clip in enumerate(clips))
    return windows


def _stem(path: str, index: int) -> str:
    return f"{Path(path).stem}_w{index:03d}"


# ============================================================================
# synth
# ============================================================================

def item_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def cmd_synth(run: RunConfig) -> Dict[str, Any]:
    """N clips per class plus manifest.json."""
    if run.num < 1:
        raise ConfigError("synth needs --num >= 1")
    out = prepare_out(run, "synth")
    jobs = [(c, i) for c in range(run.classes) for i in range(run.num)]
    status(f"🎲 Synthesizing {len(jobs)} clips ({run.classes} classes x {run.num})")

    def one(job: Tuple[int, int]) -> Dict[str, Any]:
        class_id, index = job
        skeleton, clip = synth_motion(class_id, run.skeleton, frames=run.frames, frame_rate=run.frame_rate,
                                      seed=item_seed(run.seed, 0, class_id, index))
        path = out / f"class{class_id}_{index:04d}.bvh"
        path.write_text(write_bvh(skeleton, clip), encoding="utf-8")
        return {"path": str(path), "class_label": class_id}

    results = run_batch(one, jobs)
    raise_first_error(results)
    manifest = out / "manifest.json"
    write_manifest(str(manifest), results)
    return {"status": "success", "clips": len(results), "manifest": str(manifest),
            "outputs": [r["path"] for r in results] + [str(manifest)]}


# ============================================================================
# train-ae / train-diff
# ============================================================================

def _save_aborted(out: Path, save: Callable[[str], None]) -> None:
    path = out / "aborted.ckpt"
    save(str(path))
    status(f"   ⚠️ last good weights written to {path}")


def cmd_train_ae(run: RunConfig) -> Dict[str, Any]:
    if not run.manifest:
        raise ConfigError("train-ae needs --manifest")
    if run.resume:
        weights, config, state, step = load_autoencoder(run.resume)
        _check_model(run, config, run.resume)
    else:
        weights, config, state, step = None, run.model, None, 0
    clips, _ = load_dataset(run.manifest, ClipWindowSpec(window=config.window_frames, stride=run.stride),
                            run.unit_scale)
    out = prepare_out(run, "train_ae")
    try:
        result = train(clips, config, run.train, weights=weights, optimizer_state=state, start_step=step)
    except TrainingAborted as exc:
        def save(path: str) -> None:
            save_autoencoder(path, init_weights(config).load_arrays(exc.last_good), config, exc.state, exc.step)
        _save_aborted(out, save)
        raise

    checkpoint, log = out / "autoencoder.ckpt", out / "train_log.csv"
    save_autoencoder(str(checkpoint), result.weights, config, result.optimizer_state, result.step)
    write_training_log(str(log), result.log)
    return {"status": "success", "checkpoint": str(checkpoint), "log": str(log), "step": result.step,
            "clips": len(clips), "parameters": count_parameters(result.weights),
            "final": result.log[-1] if result.log else {}, "outputs": [str(checkpoint), str(log)]}


def cmd_train_diff(run: RunConfig) -> Dict[str, Any]:
    if not run.manifest:
        raise ConfigError("train-diff needs --manifest")
    ae_weights, ae_config = load_model(run)
    config = run.diffusion
    weights = state = None
    step = 0
    if run.resume:
        previous, state, step = load_denoiser(run.resume)
        weights = previous.weights
        config = previous.config.model_copy(update={"train": run.diffusion.train})
    clips, labels = load_dataset(run.manifest, ClipWindowSpec(window=ae_config.window_frames, stride=run.stride),
                                 run.unit_scale)
    out = prepare_out(run, "train_diff")
    status(f"🧊 Encoding {len(clips)} windows with the frozen autoencoder")
    dataset = build_latent_dataset(clips, labels, ae_weights, ae_config, config)
    try:
        result = train_diffusion(dataset, config, weights=weights, optimizer_state=state, start_step=step)
    except TrainingAborted as exc:
        def save(path: str) -> None:
            aborted = Denoiser(weights=init_denoiser(config, dataset.values.shape[1]).load_arrays(exc.last_good),
                               config=config, stats=LatentStats.fit(dataset.values),
                               channels=dataset.values.shape[1], f_max=dataset.f_max, window_sec=dataset.window_sec)
            save_denoiser(path, aborted, exc.state, exc.step)
        _save_aborted(out, save)
        raise

    checkpoint, log = out / "denoiser.ckpt", out / "train_log.csv"
    save_denoiser(str(checkpoint), result.denoiser, result.optimizer_state, result.step)
    write_training_log(str(log), result.log)
    return {"status": "success", "checkpoint": str(checkpoint), "log": str(log), "step": result.step,
            "latents": len(dataset), "clamped": dataset.clamped,
            "parameters": count_parameters(result.denoiser.weights),
            "final": result.log[-1] if result.log else {}, "outputs": [str(checkpoint), str(log)]}


# ============================================================================
# encode / decode
# ============================================================================

def _params_suffix(fmt: str) -> str:
    return ".csv" if fmt == "csv" else ".phsp"


def cmd_encode(run: RunConfig) -> Dict[str, Any]:
    """One params file per window of every input BVH."""
    weights, config = load_model(run)
    windows = input_windows(run, config)
    out = prepare_out(run, "encoded")
    status(f"🔐 Encoding {len(windows)} windows")

    def one(item: Tuple[str, int, MotionClip]) -> Dict[str, Any]:
        path, index, clip = item
        params, _ = encode(clip, weights, config)
        target = out / (_stem(path, index) + _params_suffix(run.params_format))
        write_params(str(target), params, run.params_format)
        return {"path": str(target), "channels": params.channels}

    results = run_batch(one, windows)
    raise_first_error(results)
    return {"status": "success", "outputs": [r["path"] for r in results]}


def decode_frames(params: PeriodicParams, rate: Optional[float], window_frames: int) -> Tuple[np.ndarray, float]:
    """
    Normalized query times and frame rate of a decode.

    Without a rate the training grid is reproduced; at rate r the window
    gets round(window_sec * r) frames.
    """
    if rate is None:
        return np.linspace(0.0, 1.0, window_frames), window_frames / params.window_sec
    frames = max(2, int(round(params.window_sec * rate)))
    return np.linspace(0.0, 1.0, frames), rate


def cmd_decode(run: RunConfig) -> Dict[str, Any]:
    """Params files -> BVH; --rate resamples, --joints decodes a subset (others at rest, mask in a sidecar)."""
    weights, config = load_model(run)
    if not run.inputs:
        raise ConfigError("decode needs params files as inputs")
    skeleton = output_skeleton(run)
    joints = resolve_joints(skeleton, run.joints) if run.joints else None
    out = prepare_out(run, "decoded")
    status(f"🔓 Decoding {len(run.inputs)} params files onto {skeleton.num_joints} joints")

    def one(path: str) -> Dict[str, Any]:
        params = read_params(path)
        if params.channels != config.channels:
            raise CheckpointError(f"{path} has {params.channels} channels, the checkpoint expects {config.channels}")
        times, rate = decode_frames(params, run.rate, config.window_frames)
        motion = decode(params, times, joints, weights, config, skeleton)
        clip = motion.to_clip(skeleton, rate)
        target = out / f"{Path(path).stem}.bvh"
        target.write_text(write_bvh(skeleton, clip), encoding="utf-8")
        written = [str(target)]
        if joints is not None:
            sidecar = out / f"{Path(path).stem}.mask.json"
            sidecar.write_text(json.dumps({"decoded_joints": [skeleton.names[j] for j in joints],
                                           "rest_joints": [n for j, n in enumerate(skeleton.names)
                                                           if j not in joints]}, indent=2) + "\n",
                               encoding="utf-8")
            written.append(str(sidecar))
        return {"paths": written, "frames": clip.frames, "frame_rate": rate}

    results = run_batch(one, list(run.inputs))
    raise_first_error(results)
    return {"status": "success", "outputs": [p for r in results for p in r["paths"]],
            "frames": results[0]["frames"] if results else 0}


# ============================================================================
# sample
# ============================================================================

def condition_latent(run: RunConfig, ae_weights, ae_config: ModelConfig, denoiser) -> Tuple[Optional[np.ndarray],
                                                                                             Optional[Skeleton]]:
    """Diffusion-space context from --condition-clip, masked per --mask."""
    if not run.condition_clip:
        if run.mask:
            raise ConfigError("--mask needs --condition-clip")
        return None, None
    clips = window_clips(read_clip(run.condition_clip, run.unit_scale),
                         ClipWindowSpec(window=ae_config.window_frames, stride=ae_config.window_frames))
    if not clips:
        raise DatasetError(f"condition clip is shorter than one {ae_config.window_frames}-frame window")
    clip = clips[0]
    if run.mask == "keyframes":
        clip, _ = mask_keyframes(clip, run.keyframes)
    elif run.mask:
        clip = mask_joints(clip, joint_group(clip.skeleton, run.mask))
    values, _, _, _ = clip_latent(clip, ae_weights, ae_config, denoiser.config)
    return values, clip.skeleton


def cmd_sample(run: RunConfig) -> Dict[str, Any]:
    """--num samples: params file, decoded BVH and a manifest."""
    if run.num < 1:
        raise ConfigError("sample needs --num >= 1")
    if not run.diffusion_checkpoint:
        raise ConfigError("sample needs --diffusion-checkpoint")
    ae_weights, ae_config = load_model(run)
    denoiser, _, _ = load_denoiser(run.diffusion_checkpoint)
    if denoiser.channels != ae_config.channels:
        raise CheckpointError(f"denoiser has {denoiser.channels} channels, autoencoder has {ae_config.channels}")
    # sampling knobs given on the command line override the checkpoint's
    denoiser.config = denoiser.config.model_copy(update={
        "sample_steps": min(run.diffusion.sample_steps, denoiser.config.timesteps),
        "eta": run.diffusion.eta, "guidance_scale": run.diffusion.guidance_scale,
    })
    context, cond_skeleton = condition_latent(run, ae_weights, ae_config, denoiser)
    skeleton = cond_skeleton or output_skeleton(run)
    schedule = make_schedule(denoiser.config.timesteps, denoiser.config.beta_min, denoiser.config.beta_max)
    out = prepare_out(run, "samples")
    label_text = "unconditional" if run.class_label is None else f"class {run.class_label}"
    status(f"🌱 Sampling {run.num} latents ({label_text}, {denoiser.config.sample_steps} DDIM steps)")

    def one(index: int) -> Dict[str, Any]:
        params, info = sample_params(denoiser, schedule, label=run.class_label, context=context,
                                     seed=item_seed(run.seed, 1, index))
        times, rate = decode_frames(params, run.rate, ae_config.window_frames)
        clip = decode(params, times, None, ae_weights, ae_config, skeleton).to_clip(skeleton, rate)
        stem = f"sample_{index:04d}"
        params_path = out / (stem + _params_suffix(run.params_format))
        bvh_path = out / f"{stem}.bvh"
        write_params(str(params_path), params, run.params_format)
        bvh_path.write_text(write_bvh(skeleton, clip), encoding="utf-8")
        return {"path": str(bvh_path), "params": str(params_path), "clamped": info["clamped"]}

    results = run_batch(one, list(range(run.num)))
    raise_first_error(results)
    manifest = out / "manifest.json"
    write_manifest(str(manifest), [{"path": r["path"], "class_label": run.class_label} for r in results])
    return {"status": "success", "samples": len(results), "manifest": str(manifest),
            "clamped": sum(r["clamped"] for r in results),
            "outputs": [p for r in results for p in (r["params"], r["path"])] + [str(manifest)]}


# ============================================================================
# eval
# ============================================================================

def cmd_eval(run: RunConfig) -> Dict[str, Any]:
    """
    --gt and --pred: metrics of pred against gt.
    --gt and --keyframe-distance: keyframe reconstruction vs the SLERP baseline
    (needs --checkpoint), one report per method.
    """
    if not run.gt:
        raise ConfigError("eval needs --gt")
    gt = read_clip(run.gt, run.unit_scale)
    thresholds = {"contact_height": run.contact_height, "contact_velocity": run.contact_velocity}

    if run.keyframe_distance is not None:
        weights, config = load_model(run)
        windows = window_clips(gt, ClipWindowSpec(window=config.window_frames, stride=config.window_frames))
        if not windows:
            raise DatasetError(f"ground truth is shorter than one {config.window_frames}-frame window")
        out = prepare_out(run, "eval")
        status(f"📏 Keyframe reconstruction every {run.keyframe_distance} frames over {len(windows)} windows")

        def one(clip: MotionClip) -> Dict[str, Any]:
            recon = keyframe_reconstruction(clip, run.keyframe_distance, weights, config)
            return {name: evaluate_reconstruction(clip, pred, **thresholds) for name, pred in recon.items()}

        results = run_batch(one, windows)
        raise_first_error(results)
        outputs, summary = [], {}
        for method in ("funphase", "slerp"):
            report = merge_reports([r[method] for r in results])
            report.metadata.update({"method": method, "keyframe_distance": run.keyframe_distance})
            outputs.extend(write_report(str(out / f"keyframe_{method}"), report))
            summary[method] = report
        return {"status": "success", "reports": summary, "outputs": outputs}

    if not run.pred:
        raise ConfigError("eval needs --pred or --keyframe-distance")
    pred = read_clip(run.pred, run.unit_scale)
    report = evaluate_reconstruction(gt, pred, **thresholds)
    out = prepare_out(run, "eval")
    outputs = write_report(str(out / "report"), report)
    return {"status": "success", "reports": {"report": report}, "outputs": outputs}


# ============================================================================
# plot-phase
# ============================================================================

def cmd_plot_phase(run: RunConfig) -> Dict[str, Any]:
    """Sliding-window phase trajectory of one BVH, PCA-projected to an SVG."""
    if len(run.inputs) != 1:
        raise ConfigError("plot-phase needs exactly one BVH input")
    weights, config = load_model(run)
    clip = read_clip(run.inputs[0], run.unit_scale)
    points = phase_trajectory(clip, weights, config, stride=run.trajectory_stride)
    coords, ratios = pca_project(points, run.pca_dims)
    out = prepare_out(run, "plots")
    target = out / f"{Path(run.inputs[0]).stem}_phase.svg"
    target.write_text(phase_plot_svg(coords, ratios, title=Path(run.inputs[0]).name), encoding="utf-8")
    return {"status": "success", "points": len(points), "explained_variance": [float(r) for r in ratios],
            "outputs": [str(target)]}


HANDLERS = {
    "synth": cmd_synth,
    "train-ae": cmd_train_ae,
    "train-diff": cmd_train_diff,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "plot-phase": cmd_plot_phase,
}
