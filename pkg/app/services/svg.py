# app/services/svg.py
"""
Static SVG plots of projected phase trajectories, rendered headless with
matplotlib. Text stays as <text> elements and the id salt and date are
pinned, so the same points always give the same bytes.
"""
import io
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app.core.exceptions import MetricError  # noqa: E402

PANEL_INCHES = 3.2
SVG_RC = {"svg.hashsalt": "phasekit", "svg.fonttype": "none"}


def phase_plot_svg(points: np.ndarray, ratios: Sequence[float], title: str = "phase manifold") -> str:
    """Line-and-marker plot of (P, k) projected points; k = 3 gives three pairwise panels."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] not in (2, 3):
        raise MetricError(f"phase plot needs (P, 2) or (P, 3) points, got {points.shape}")
    pairs = [(0, 1)] if points.shape[1] == 2 else [(0, 1), (0, 2), (1, 2)]

    with plt.rc_context(SVG_RC):
        fig, axes = plt.subplots(1, len(pairs), figsize=(PANEL_INCHES * len(pairs), PANEL_INCHES + 0.6),
                                 squeeze=False)
        try:
            for i, (ax, (a, b)) in enumerate(zip(axes[0], pairs)):
                ax.set_gid(f"panel-{i}")
                ax.axhline(0.0, color="#999999", linewidth=0.8)
                ax.axvline(0.0, color="#999999", linewidth=0.8)
                ax.plot(points[:, a], points[:, b], "-o", color="#1f77b4", linewidth=1.2, markersize=2.5)
                ax.set_xlabel(f"PC{a + 1} ({100 * ratios[a]:.1f}%)")
                ax.set_ylabel(f"PC{b + 1} ({100 * ratios[b]:.1f}%)")
                ax.set_aspect("equal", adjustable="datalim")
            caption = ", ".join(f"PC{i + 1} {100 * r:.1f}%" for i, r in enumerate(ratios))
            fig.suptitle(title)
            fig.text(0.01, 0.01, f"explained variance: {caption}", fontsize=9)
            fig.tight_layout(rect=(0.0, 0.05, 1.0, 1.0))
            buffer = io.StringIO()
            fig.savefig(buffer, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    return buffer.getvalue()
