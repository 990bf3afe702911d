"""2-D t-SNE layouts of embeddings with plot-ready scatter data."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.manifold import TSNE


def tsne_embed(vectors, seed: int = 0, n_iter: int = 1000) -> np.ndarray:
    """Standard t-SNE (perplexity min(30, n/4)); ``vectors`` are arrays or objects with ``.values``."""
    x = np.stack([np.asarray(getattr(v, "values", v), dtype=np.float64) for v in vectors])
    n = x.shape[0]
    if n < 5:
        raise ValueError(f"t-SNE needs at least 5 vectors, got {n}")
    tsne = TSNE(
        n_components=2,
        perplexity=min(30.0, n / 4.0),
        max_iter=n_iter,
        init="pca",
        random_state=seed,
        method="barnes_hut" if n > 200 else "exact",
    )
    return tsne.fit_transform(x)


def scatter_groups(points: np.ndarray, labels: Sequence[str], ids: Sequence[str] | None = None) -> dict:
    groups: dict[str, list] = {}
    for i, (p, lab) in enumerate(zip(points, labels)):
        item = {"x": float(p[0]), "y": float(p[1])}
        if ids is not None:
            item["id"] = ids[i]
        groups.setdefault(str(lab), []).append(item)
    return {k: groups[k] for k in sorted(groups)}


def write_scatter_json(path: str | Path, points: np.ndarray, labels: Sequence[str], ids: Sequence[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(scatter_groups(points, labels, ids), indent=1, sort_keys=True) + "\n")
    return path


def plot_scatter(path: str | Path, points: np.ndarray, labels: Sequence[str], title: str = "t-SNE") -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    labels = np.asarray(labels)
    for lab in sorted(set(labels.tolist())):
        sel = labels == lab
        ax.scatter(points[sel, 0], points[sel, 1], s=8, label=lab)
    ax.legend(fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
