"""Box plots of similarity reports and heatmaps of transfer matrices."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def similarity_boxplot(report, path, title="Cosine similarity per mask"):
    conditions = report.conditions()
    data = [report.cosines(c) for c in conditions]
    fig, ax = plt.subplots(figsize=(1.2 * len(conditions) + 2, 4))
    ax.boxplot(data, showmeans=True)
    ax.set_xticks(range(1, len(conditions) + 1), conditions, rotation=30)
    ax.set_ylabel("cosine similarity")
    ax.set_ylim(-1.0, 1.0)
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def transfer_heatmap(matrix, path, title="Mean cosine similarity"):
    values = np.asarray(matrix.values)
    fig, ax = plt.subplots(figsize=(1.1 * len(matrix.columns) + 3, 0.5 * len(matrix.rows) + 2))
    im = ax.imshow(values, cmap="viridis_r", vmin=-0.2, vmax=1.0)
    ax.set_xticks(range(len(matrix.columns)), matrix.columns, rotation=30)
    ax.set_yticks(range(len(matrix.rows)), [f"{r} [{matrix.groups.get(r, '')}]" for r in matrix.rows])
    for i in range(values.shape[0]):
        for j in range(values.shape[1]):
            ax.text(j, i, f"{values[i, j]:.2f}", ha="center", va="center", color="w", fontsize=8)
    # separate control / single-model / ensemble groups
    groups = [matrix.groups.get(r, "") for r in matrix.rows]
    for i in range(1, len(groups)):
        if groups[i] != groups[i - 1]:
            ax.axhline(i - 0.5, color="white", linewidth=2)
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
