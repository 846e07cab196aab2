"""Static figures of the global maps and the direction estimates."""

from typing import Sequence
from pathlib import Path
import logging

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .audio_doa import DoaEstimate  # noqa: E402
from .base import Source  # noqa: E402
from .fusion import GlobalMap  # noqa: E402
from .geometry import CameraTrajectory  # noqa: E402

logger = logging.getLogger(__name__)

_SOURCE_STYLE = {
    Source.SD: ("s", "tab:green"),
    Source.SEG: ("o", "tab:blue"),
    Source.AUDIO: ("^", "tab:orange"),
    Source.SMOOTHED: (".", "black"),
}


def _save(fig: plt.Figure, file: str | Path) -> None:
    # No software tag, so reruns write the same bytes.
    fig.savefig(str(file), dpi=100, metadata={"Software": None})
    plt.close(fig)
    logger.info("Wrote figure %s", file)


def plot_map(global_map: GlobalMap, file: str | Path, traj: CameraTrajectory | None = None,
             title: str = "") -> None:
    """Top view of a map: fused points by source, smoothed target track,
    anchors and, when given, the camera path over the span."""
    fig, ax = plt.subplots(figsize=(6, 6))
    for source, (marker, color) in _SOURCE_STYLE.items():
        points = [p for p in global_map.fused.positioned() if p.source is source and p.position is not None]
        if points and source is not Source.SMOOTHED:
            ax.scatter([p.position.x for p in points], [p.position.y for p in points],  # type: ignore[union-attr]
                       marker=marker, color=color, s=18, label=source.value)
    track = [p.position for p in global_map.target.positioned() if p.position is not None]
    if track:
        ax.plot([p.x for p in track], [p.y for p in track], color="black", linewidth=1.5, label="target")
    for anchor, name, marker in ((global_map.reference, "reference", "P"), (global_map.facing, "facing", "X")):
        if anchor is not None:
            ax.scatter([anchor.position.x], [anchor.position.y], marker=marker, s=90, color="tab:red", label=name)
    if traj is not None and len(traj):
        start, end = global_map.span
        inside = [pose for pose in traj.poses if start <= pose.t <= end] or list(traj.poses)
        ax.plot([pose.position[0] for pose in inside], [pose.position[1] for pose in inside],
                color="tab:purple", linestyle="--", label="camera")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_aspect("equal", adjustable="datalim")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize="small")
    ax.set_title(title or f"{global_map.mode.value} map, {global_map.span[0]:g}-{global_map.span[1]:g} s")
    _save(fig, file)


def plot_doa(estimates: Sequence[DoaEstimate], file: str | Path) -> None:
    """Steered power by time and azimuth, with the selected azimuths on top."""
    fig, ax = plt.subplots(figsize=(8, 4))
    if estimates:
        grid = estimates[0].grid
        power = np.stack([e.power for e in estimates], axis=1)
        times = np.array([e.t for e in estimates])
        ax.pcolormesh(times, grid, power, shading="nearest", cmap="viridis")
        ax.plot(times, [e.phi_hat for e in estimates], linestyle="none", marker=".", color="white")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("azimuth (deg)")
    ax.set_title("Steered response power")
    _save(fig, file)
