"""Report figures (PNG, non-interactive backend)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def final_rows(rows):
    final = {}
    for r in rows:
        key = (r["method"], r["case_id"])
        if key not in final or r["layer"] > final[key]["layer"]:
            final[key] = r
    return final


def metric_boxplot(rows, metric, path):
    final = final_rows(rows)
    methods = sorted({m for m, _ in final})
    data = [[r[metric] for (m, _), r in final.items() if m == meth] for meth in methods]
    fig, ax = plt.subplots(figsize=(1.2 * len(methods) + 2, 3.5))
    ax.boxplot(data)
    ax.set_xticks(range(1, len(methods) + 1), methods, rotation=30, ha="right")
    ax.set_ylabel(metric.upper())
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def layer_curves(rows, metric, path):
    """Mean metric against SUPER layer, one line per multi-layer method."""
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    drew = False
    for meth in sorted({r["method"] for r in rows}):
        layers = sorted({r["layer"] for r in rows if r["method"] == meth})
        if len(layers) < 2:
            continue
        means = [np.mean([r[metric] for r in rows if r["method"] == meth and r["layer"] == l])
                 for l in layers]
        ax.plot(layers, means, marker="o", label=meth)
        drew = True
    if not drew:
        plt.close(fig)
        return None
    ax.set_xlabel("layer")
    ax.set_ylabel(f"mean {metric.upper()}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def image_panel(images, titles, path, window=(800.0, 1200.0)):
    fig, axes = plt.subplots(1, len(images), figsize=(2.6 * len(images), 2.8))
    for ax, im, t in zip(np.atleast_1d(axes), images, titles):
        ax.imshow(im, cmap="gray", vmin=window[0], vmax=window[1])
        ax.set_title(t, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
