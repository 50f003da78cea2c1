"""
CLI argument handling.

Turns argv into a validated RunConfig. Precedence is
defaults < --config JSON file < command-line flags.
"""
import argparse
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from app.core.exceptions import ConfigError
from app.schemas.config import RunConfig

COMMANDS = ("synth", "train-ae", "train-diff", "encode", "decode", "sample", "eval", "plot-phase")

# flag dest -> dotted RunConfig path; "@train" is resolved per command below
_FLAG_PATHS = {
    "out": "out",
    "force": "force",
    "manifest": "manifest",
    "checkpoint": "checkpoint",
    "diffusion_checkpoint": "diffusion_checkpoint",
    "resume": "resume",
    "gt": "gt",
    "pred": "pred",
    "params_format": "params_format",
    "num": "num",
    "classes": "classes",
    "class_label": "class_label",
    "frames": "frames",
    "frame_rate": "frame_rate",
    "template": "skeleton.template",
    "skeleton_joints": "skeleton.joints",
    "bone_length": "skeleton.bone_length",
    "amplitude_scale": "skeleton.amplitude_scale",
    "window": "model.window_frames",
    "stride": "stride",
    "unit_scale": "unit_scale",
    "reference": "reference",
    "rate": "rate",
    "joints": "joints",
    "condition_clip": "condition_clip",
    "mask": "mask",
    "keyframes": "keyframes",
    "keyframe_distance": "keyframe_distance",
    "contact_height": "contact_height",
    "contact_velocity": "contact_velocity",
    "pca_dims": "pca_dims",
    "trajectory_stride": "trajectory_stride",
    "channels": "model.channels",
    "d_latent": "model.d_latent",
    "timesteps": "diffusion.timesteps",
    "sample_steps": "diffusion.sample_steps",
    "eta": "diffusion.eta",
    "guidance_scale": "diffusion.guidance_scale",
    "f_max_rule": "diffusion.f_max_rule",
    "phase_transform": "diffusion.use_phase_transform",
    "steps": "@train.steps",
    "batch_size": "@train.batch_size",
    "lr": "@train.optimizer.lr",
    "log_every": "@train.log_every",
    "stop_step": "@train.stop_step",
}

_SEED_PATHS = ("seed", "model.seed", "train.seed", "diffusion.seed", "diffusion.train.seed")


class _Parser(argparse.ArgumentParser):
    """argparse that raises ConfigError instead of exiting."""

    def error(self, message: str) -> None:
        raise ConfigError(f"bad arguments: {message}")


def _joint_list(value: str) -> List[str]:
    return [name.strip() for name in value.split(",") if name.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="phasekit", description="Periodic motion autoencoder and phase-space diffusion",
                     argument_default=argparse.SUPPRESS)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("inputs", nargs="*", help="Input files (BVH or params, depending on the command)")

    shared = parser.add_argument_group("shared")
    shared.add_argument("--config", help="JSON config file")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--out", help="Output directory")
    shared.add_argument("--force", action="store_true", help="Overwrite existing outputs")

    io = parser.add_argument_group("inputs")
    io.add_argument("--manifest")
    io.add_argument("--checkpoint", help="Autoencoder checkpoint")
    io.add_argument("--diffusion-checkpoint")
    io.add_argument("--resume", help="Checkpoint to continue training from")
    io.add_argument("--gt")
    io.add_argument("--pred")
    io.add_argument("--reference", help="BVH providing the output skeleton")
    io.add_argument("--unit-scale", type=float)
    io.add_argument("--params-format", choices=("csv", "bin"))

    data = parser.add_argument_group("synthetic data")
    data.add_argument("--num", type=int)
    data.add_argument("--classes", type=int)
    data.add_argument("--frames", type=int)
    data.add_argument("--frame-rate", type=float)
    data.add_argument("--template", choices=("chain", "biped"))
    data.add_argument("--skeleton-joints", type=int)
    data.add_argument("--bone-length", type=float)
    data.add_argument("--amplitude-scale", type=float)
    data.add_argument("--window", type=int)
    data.add_argument("--stride", type=int)

    model = parser.add_argument_group("model and training")
    model.add_argument("--channels", type=int)
    model.add_argument("--d-latent", type=int)
    model.add_argument("--steps", type=int)
    model.add_argument("--batch-size", type=int)
    model.add_argument("--lr", type=float)
    model.add_argument("--log-every", type=int)
    model.add_argument("--stop-step", type=int, help="Stop early; the LR schedule still spans --steps")

    diff = parser.add_argument_group("diffusion")
    diff.add_argument("--timesteps", type=int)
    diff.add_argument("--sample-steps", type=int)
    diff.add_argument("--eta", type=float)
    diff.add_argument("--guidance-scale", type=float)
    diff.add_argument("--f-max-rule", choices=("latent", "nyquist"))
    diff.add_argument("--no-phase-transform", dest="phase_transform", action="store_false")
    diff.add_argument("--class", dest="class_label", type=int)
    diff.add_argument("--condition-clip")
    diff.add_argument("--mask", help="keyframes | left-leg | right-leg | spine")
    diff.add_argument("--keyframes", type=int)

    decode = parser.add_argument_group("decode and eval")
    decode.add_argument("--rate", type=float, help="Decode frame rate (super-resolution)")
    decode.add_argument("--joints", type=_joint_list, help="Comma-separated joint names")
    decode.add_argument("--keyframe-distance", type=int)
    decode.add_argument("--contact-height", type=float)
    decode.add_argument("--contact-velocity", type=float)
    decode.add_argument("--pca-dims", type=int)
    decode.add_argument("--trajectory-stride", type=int)
    return parser


def parse_argv(argv: Sequence[str]) -> Optional[Dict[str, Any]]:
    """
    Clean dictionary of what was actually typed:
        command, inputs, config (path or None) and flags (dest -> value).

    Returns None when argv is empty so the caller can print usage.
    """
    if not argv:
        return None
    namespace = vars(build_parser().parse_args(list(argv)))
    command = namespace.pop("command")
    return {
        "command": command,
        "inputs": namespace.pop("inputs", []),
        "config": namespace.pop("config", None),
        "seed": namespace.pop("seed", None),
        "flags": namespace,
    }


def _set_path(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        child = node.get(key)
        if not isinstance(child, dict):
            child = {}
            node[key] = child
        node = child
    node[keys[-1]] = value


def _get_path(tree: Dict[str, Any], dotted: str) -> Any:
    node = tree
    for key in dotted.split("."):
        node = node[key]
    return node


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; override wins and nested dicts merge key by key."""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config_file(path: str) -> Dict[str, Any]:
    file = Path(path)
    if not file.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(file.read_bytes())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    data.pop("command", None)
    return data


def flag_overrides(command: str, flags: Dict[str, Any], seed: Optional[int] = None) -> Dict[str, Any]:
    """Nested override tree for the flags that were given."""
    train_root = "diffusion.train" if command == "train-diff" else "train"
    tree: Dict[str, Any] = {}
    for dest, value in flags.items():
        path = _FLAG_PATHS[dest].replace("@train", train_root)
        _set_path(tree, path, value)
    if seed is not None:
        for path in _SEED_PATHS:
            _set_path(tree, path, seed)
    return tree


def build_run_config(parsed: Dict[str, Any]) -> RunConfig:
    """Validate defaults < config file < flags into one RunConfig."""
    command = parsed["command"]
    try:
        data = RunConfig(command=command).model_dump()
        if parsed.get("config"):
            data = deep_merge(data, load_config_file(parsed["config"]))
            data["config"] = parsed["config"]
        overrides = flag_overrides(command, parsed["flags"], parsed.get("seed"))
        data = deep_merge(data, overrides)
        # a smaller --timesteps pulls the default sampling grid down with it
        if "timesteps" in parsed["flags"] and "sample_steps" not in parsed["flags"]:
            diffusion = data["diffusion"]
            diffusion["sample_steps"] = min(_get_path(data, "diffusion.sample_steps"), diffusion["timesteps"])
        data["command"] = command
        if parsed.get("inputs"):
            data["inputs"] = list(parsed["inputs"])
        return RunConfig(**data)
    except ValidationError as exc:
        error = exc.errors()[0]
        where = ".".join(str(p) for p in error["loc"]) or "config"
        raise ConfigError(f"{where}: {error['msg']}") from None
