"""Functions to plot the obtained results."""

import json
from typing import List, Optional, Sequence
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from .data import ScenePair  # noqa: E402
from .metrics import SearchReport  # noqa: E402
from .utils import atomic_path  # noqa: E402


def _savefig(fig, out: str) -> None:
    with atomic_path(out) as tmp:
        fig.savefig(tmp, bbox_inches="tight")
    plt.close(fig)


def plot_scene_flow(
    pair: ScenePair, out: str, pred: Optional[np.ndarray] = None, threshold: float = 0.1
) -> int:
    """Plot the source frame and its warped copy.

    Source points are blue and warped points green; warped points whose end
    point error exceeds ``threshold`` are drawn red. Without a prediction the
    ground truth is used for warping.

    Args:
        pair (ScenePair): The scene pair.
        out (str): The image file.
        pred (np.ndarray, optional): Predicted flow [N, 3].
        threshold (float): End point error limit in scene units.

    Returns:
        int: The number of red points.
    """
    flow = pair.flow if pred is None else np.asarray(pred, dtype=np.float32)
    if flow.shape != pair.flow.shape:
        raise ValueError(
            f"prediction {flow.shape} does not match the scene flow {pair.flow.shape}"
        )
    warped = pair.pos1 + flow
    error = np.linalg.norm(flow - pair.flow, axis=1)
    wrong = error > threshold

    fig = plt.figure(figsize=(8, 8))
    ax = fig.add_subplot(projection="3d")
    ax.scatter(*pair.pos1.T, s=1, c="tab:blue", label="source")
    ax.scatter(*warped[~wrong].T, s=1, c="tab:green", label="warped")
    if wrong.any():
        ax.scatter(*warped[wrong].T, s=2, c="tab:red", label=f"EPE3D > {threshold:g}")
    ax.set_axis_off()
    ax.legend(loc="upper right", markerscale=6)
    _savefig(fig, out)
    return int(wrong.sum())


def read_history(path: str) -> List[dict]:
    """Read the JSON-lines metrics log of a training run."""
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def plot_history(history: Sequence[dict], out: str) -> None:
    """Plot the training loss and the validation EPE3D per epoch.

    Args:
        history (Sequence[dict]): Epoch records of the metrics log.
        out (str): The image file.

    Returns:
        None
    """
    epochs = [h["epoch"] for h in history]
    fig, ax_loss = plt.subplots(figsize=(10, 6))
    ax_loss.tick_params(axis="both", which="major", direction="in", labelsize=12)
    ax_loss.plot(
        epochs, [h["train_loss"] for h in history], color="tab:blue", marker="o", ms=3
    )
    ax_loss.set_xlabel("Epoch", fontsize=14)
    ax_loss.set_ylabel("Training loss", fontsize=14, color="tab:blue")

    scored = [h for h in history if h.get("val_epe3d") is not None]
    if scored:
        ax_epe = ax_loss.twinx()
        ax_epe.tick_params(axis="y", direction="in", labelsize=12)
        ax_epe.plot(
            [h["epoch"] for h in scored],
            [h["val_epe3d"] for h in scored],
            color="tab:red",
            marker="s",
            ms=3,
        )
        ax_epe.set_ylabel("Validation EPE3D", fontsize=14, color="tab:red")
    _savefig(fig, out)


def plot_search_grid(grid: Sequence[SearchReport], out: str) -> None:
    """Heat maps of the local radius flow difference and retained fraction.

    Args:
        grid (Sequence[SearchReport]): Reports of a K x R grid, k-major.
        out (str): The image file.

    Returns:
        None
    """
    ks = sorted({r.k for r in grid})
    radii = sorted({r.radius for r in grid})
    lookup = {(r.k, r.radius): r for r in grid}
    panels = (
        ("radius_difference", "Local flow difference (KNN+radius)"),
        ("retained_fraction", "Retained KNN members"),
    )

    fig, axes = plt.subplots(1, 2, figsize=(12, 5))
    for ax, (key, title) in zip(axes, panels):
        values = np.array([[getattr(lookup[(k, r)], key) for r in radii] for k in ks])
        image = ax.imshow(values, origin="lower", aspect="auto", cmap="viridis")
        ax.set_xticks(range(len(radii)), [f"{r:g}" for r in radii])
        ax.set_yticks(range(len(ks)), [str(k) for k in ks])
        ax.set_xlabel("Radius", fontsize=12)
        ax.set_ylabel("K", fontsize=12)
        ax.set_title(title, fontsize=12)
        fig.colorbar(image, ax=ax)
    _savefig(fig, out)
