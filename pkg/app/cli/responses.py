"""
Console summaries for finished subcommands.
"""
from typing import Any, Dict, List

from app.schemas.report import MetricReport

SUMMARY_METRICS = ("position_error", "orientation_error", "npss", "foot_sliding", "foot_penetration")


def format_outputs(outputs: List[str], limit: int = 6) -> List[str]:
    lines = [f"   📄 {path}" for path in outputs[:limit]]
    if len(outputs) > limit:
        lines.append(f"   ... and {len(outputs) - limit} more")
    return lines


def format_report(name: str, report: MetricReport) -> List[str]:
    lines = [f"   📊 {name}"]
    for metric in SUMMARY_METRICS:
        if metric in report.metrics:
            entry = report.metrics[metric]
            notes = f" ({', '.join(entry.notes)})" if entry.notes else ""
            lines.append(f"      {metric:<18} {entry.value:.4f} {entry.units}{notes}")
    return lines


def format_training(result: Dict[str, Any]) -> List[str]:
    final = result.get("final") or {}
    lines = [f"   🧮 {result['parameters']} parameters, stopped at step {result['step']}"]
    losses = ", ".join(f"{k}={v:.5f}" for k, v in final.items() if k not in ("step", "lr", "grad_norm"))
    if losses:
        lines.append(f"   📉 final {losses}")
    return lines


def format_summary(command: str, result: Dict[str, Any]) -> str:
    """Multi-line summary of a handler's status dict."""
    lines = [f"✅ {command} finished"]
    if command == "synth":
        lines.append(f"   wrote {result['clips']} clips + manifest")
    elif command in ("train-ae", "train-diff"):
        lines.extend(format_training(result))
        if result.get("clamped"):
            lines.append(f"   ⚠️ {result['clamped']} latent frequencies were clamped before the phase transform")
    elif command == "sample":
        lines.append(f"   wrote {result['samples']} samples")
        if result.get("clamped"):
            lines.append(f"   ⚠️ DDIM direction term clamped on {result['clamped']} steps")
    elif command == "eval":
        for name, report in result["reports"].items():
            lines.extend(format_report(name, report))
    elif command == "plot-phase":
        ratios = ", ".join(f"{100 * r:.1f}%" for r in result["explained_variance"])
        lines.append(f"   {result['points']} trajectory points, explained variance {ratios}")
    lines.extend(format_outputs(result.get("outputs", [])))
    return "\n".join(lines)
