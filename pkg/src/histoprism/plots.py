"""Deterministic SVG figures via matplotlib."""

from __future__ import annotations

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402

_RC = {"svg.hashsalt": "histoprism", "svg.fonttype": "none", "path.simplify": False}


def figure(nrows: int, ncols: int, size: tuple[float, float]):
    with matplotlib.rc_context(_RC):
        fig, axes = plt.subplots(nrows, ncols, figsize=size, squeeze=False)
    return fig, list(axes.ravel())


def save_svg(fig, path) -> None:
    with matplotlib.rc_context(_RC):
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
