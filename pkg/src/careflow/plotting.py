"""2-D projections of feature sets and scatter export."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .numkit import as_matrix, make_rng

MODALITY_COLORS = {"a": "#d95f02", "v": "#1b9e77", "l": "#7570b3", "a2l": "#e6ab02", "v2l": "#66a61e"}
PCA_ITERATIONS = 100


def pca_power(x, k: int = 2, iterations: int = PCA_ITERATIONS, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-``k`` principal axes by block power iteration from a seeded start.

    Each sweep multiplies by the covariance and re-orthonormalizes; a final
    Rayleigh-Ritz step rotates the block onto eigenvectors.  Each axis is
    signed so its largest-magnitude entry is positive.  Returns
    ``(components [k x d], eigenvalues [k], mean [d])``.
    """
    x = as_matrix(x)
    n, d = x.shape
    if not 1 <= k <= d:
        raise ValueError(f"k must lie in [1, {d}]")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / n
    q, _ = np.linalg.qr(make_rng(seed).standard_normal((d, k)))
    for _ in range(iterations):
        q, _ = np.linalg.qr(cov @ q)
    evals, rot = np.linalg.eigh(q.T @ cov @ q)
    order = np.argsort(evals)[::-1]
    comps = (q @ rot[:, order]).T
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1.0
    return comps, evals[order], mean


def project(x, comps: np.ndarray, mean: np.ndarray) -> np.ndarray:
    return (as_matrix(x) - mean) @ comps.T


def embed_2d(groups: dict[str, np.ndarray], seed: int = 0) -> tuple[dict[str, np.ndarray], bool]:
    """Shared 2-D coordinates for several point sets; native when already 2-D."""
    dims = {g.shape[1] for g in groups.values()}
    if len(dims) != 1:
        raise ValueError("all groups need the same dimension")
    if dims == {2}:
        return {k: as_matrix(v).copy() for k, v in groups.items()}, False
    comps, _, mean = pca_power(np.concatenate(list(groups.values())), 2, seed=seed)
    return {k: project(v, comps, mean) for k, v in groups.items()}, True


def write_coordinates(path: Path, panels: dict[str, dict[str, np.ndarray]], ids: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "modality", "sample_id", "x", "y"])
        for stage, groups in panels.items():
            for mod, pts in groups.items():
                for sid, (px, py) in zip(ids, pts):
                    w.writerow([stage, mod, int(sid), repr(float(px)), repr(float(py))])


def render_svg(path: Path, panels: dict[str, dict[str, np.ndarray]], title: str = "") -> None:
    """Side-by-side scatter panels, 800x800, byte-stable across runs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "careflow", "svg.fonttype": "none", "path.simplify": False}):
        fig, axes = plt.subplots(len(panels), 1, figsize=(800 / 72, 800 / 72), dpi=72, squeeze=False)
        for ax, (stage, groups) in zip(axes[:, 0], panels.items()):
            for mod, pts in groups.items():
                ax.scatter(pts[:, 0], pts[:, 1], s=6, c=MODALITY_COLORS.get(mod, "#444444"), label=mod,
                           alpha=0.7, linewidths=0)
            ax.set_title(stage)
            ax.legend(loc="upper right", markerscale=2)
        if title:
            fig.suptitle(title)
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
