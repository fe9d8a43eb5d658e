from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402
from matplotlib.patches import Patch  # noqa: E402

from necroseg.core import CLASS_NAMES, N_CLASSES, PathLike  # noqa: E402
from necroseg.synthgen import PALETTE  # noqa: E402

CLASS_CMAP = ListedColormap(np.clip(PALETTE / 255.0, 0.0, 1.0))


def comparison_figure(image: np.ndarray, gt: np.ndarray, coarse: np.ndarray, refined: np.ndarray, path: PathLike, title: str = "") -> Path:
    """Slide, ground truth, coarse and refined rasters side by side"""
    fig, axes = plt.subplots(1, 4, figsize=(16, 4.6))
    panels = [("Image", image), ("Ground truth", gt), ("Coarse", coarse), ("Refined", refined)]
    for ax, (name, raster) in zip(axes, panels):
        if raster.ndim == 3:
            ax.imshow(raster)
        else:
            ax.imshow(raster, cmap=CLASS_CMAP, vmin=-0.5, vmax=N_CLASSES - 0.5, interpolation="nearest")
        ax.set_title(name)
        ax.axis("off")
    handles = [Patch(color=CLASS_CMAP(i), label=name) for i, name in enumerate(CLASS_NAMES)]
    fig.legend(handles=handles, loc="lower center", ncol=N_CLASSES, frameon=False)
    if title:
        fig.suptitle(title)
    fig.tight_layout(rect=(0, 0.08, 1, 1))
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
