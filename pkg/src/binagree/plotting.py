"""SVG figures: the Bland-Altman diagram and the power curve.

Figures are drawn with matplotlib's non-interactive Agg/SVG backend on a
640x480 canvas.  The SVG writer is made reproducible by fixing the id hash
salt and dropping the date metadata, so identical inputs give identical
bytes.  Plot elements carry stable ``id`` attributes (``ba-points``,
``ba-mean``, ``ba-loa-low``, ``ba-loa-high``, ``power-<model>``,
``power-alpha``) for downstream inspection.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .agreement import BASummary  # noqa: E402

__all__ = ["SCALE_LABELS", "ba_figure", "power_figure", "save_svg"]

SCALE_LABELS = {
    "latent": "latent scale",
    "probability": "probability scale",
    "log_probability": "log-probability scale",
}
_FIGSIZE = (6.4, 4.8)
_DPI = 100
_SVG_RC = {"svg.hashsalt": "binagree", "svg.fonttype": "path"}


def _new_axes():
    fig, ax = plt.subplots(figsize=_FIGSIZE, dpi=_DPI)
    ax.margins(0.05)
    return fig, ax


def ba_figure(ba: BASummary):
    """Scatter of (average, difference), one marker per subject, with the
    mean difference (dashed) and the limits of agreement (dotted)."""
    fig, ax = _new_axes()
    label = SCALE_LABELS.get(ba.scale, ba.scale)
    ax.plot(ba.avg, ba.diff, "o", ms=4, color="k", gid="ba-points", linestyle="none")
    ax.axhline(ba.mean_diff, color="k", linestyle="--", linewidth=1, gid="ba-mean")
    ax.axhline(ba.loa_low, color="0.3", linestyle=":", linewidth=1, gid="ba-loa-low")
    ax.axhline(ba.loa_high, color="0.3", linestyle=":", linewidth=1, gid="ba-loa-high")
    ax.set_xlabel(f"Average of methods 1 and 2 ({label})")
    ax.set_ylabel(f"Method 1 - method 2 ({label})")
    fig.tight_layout()
    return fig


def power_figure(
    beta_diff: Sequence[float], curves: Mapping[str, Sequence[float]], alpha: float
):
    """Rejection rate against the method difference, one line per model,
    with a dotted reference line at ``alpha``."""
    fig, ax = _new_axes()
    markers = "os^vD"
    for k, (name, rates) in enumerate(curves.items()):
        ax.plot(
            beta_diff,
            rates,
            marker=markers[k % len(markers)],
            ms=4,
            linewidth=1,
            label=name.replace("_", " "),
            gid=f"power-{name}",
        )
    ax.axhline(alpha, color="0.6", linestyle=":", linewidth=1, gid="power-alpha")
    ax.set_xlabel("beta_1 - beta_2")
    ax.set_ylabel("Rejection rate")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(frameon=False)
    fig.tight_layout()
    return fig


def save_svg(fig, path) -> None:
    with plt.rc_context(_SVG_RC):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
