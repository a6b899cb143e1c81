"""Report figures, written to files next to the delimited outputs."""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METRIC_LABELS = {"auc_kl": "AUC$_{KL}$", "auc_oarsi": "AUC$_{O}$",
                 "auc_kl_gt3": "AUC$_{KL>3}$", "src_kl": "SRC$_{KL}$"}


def plot_settings(fontsize=9):
    plt.rc("font", size=fontsize)
    plt.rc("axes", labelsize=fontsize, titlesize=fontsize)
    plt.rc("legend", fontsize=fontsize - 1)
    plt.rc("savefig", dpi=150, bbox="tight")


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no timestamps in the file, so reruns stay comparable
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def score_boxplots(rows, manifest, path, first_column="s_ssl", final_column="s_comb_iter1"):
    """Score distribution per KL grade: stage 1 (A) and the final combined score (B)."""
    plot_settings()
    by_id = manifest.by_id()
    grades = sorted({by_id[r["sample_id"]].kl_grade for r in rows})
    fig, axes = plt.subplots(1, 2, figsize=(7, 2.8))
    for ax, column, title in ((axes[0], first_column, "(A) stage 1"),
                              (axes[1], final_column, "(B) stage 3 combined")):
        data = [[r[column] for r in rows if by_id[r["sample_id"]].kl_grade == g] for g in grades]
        ax.boxplot(data, labels=[str(g) for g in grades])
        ax.set_xlabel("KL grade")
        ax.set_title(title)
    axes[0].set_ylabel("score")
    return _save(fig, path)


def training_curves(ssl_losses, centre_curves: dict, path):
    plot_settings()
    fig, axes = plt.subplots(1, 2, figsize=(7, 2.8))
    for k, curve in enumerate(ssl_losses):
        axes[0].plot(np.arange(1, len(curve) + 1), curve, label=f"member {k}")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("stage-1 loss")
    if ssl_losses:
        axes[0].legend()
    for name, curve in centre_curves.items():
        axes[1].plot(np.arange(1, len(curve) + 1), curve, label=name)
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("CD(C$_{norm}$, C$_{anom}$)")
    if centre_curves:
        axes[1].legend()
    return _save(fig, path)


def trainset_size(sizes, means: dict, path):
    """Metric means against the number of labelled training images."""
    plot_settings()
    fig, ax = plt.subplots(figsize=(3.6, 2.8))
    for key, values in means.items():
        ax.plot(sizes, values, marker="o", label=METRIC_LABELS.get(key, key))
    ax.set_xlabel("training set size")
    ax.set_ylabel("metric")
    ax.legend()
    return _save(fig, path)


def early_stopping_trace(epochs, metrics: dict, centre_distance, stop_epoch, path):
    plot_settings()
    fig, axes = plt.subplots(1, 2, figsize=(7, 2.8))
    for key, values in metrics.items():
        axes[0].plot(epochs, values, label=METRIC_LABELS.get(key, key))
    axes[1].plot(epochs, centre_distance, color="tab:red")
    for ax in axes:
        if stop_epoch is not None:
            ax.axvline(stop_epoch, color="black")
        ax.set_xlabel("epoch")
    axes[0].set_ylabel("metric (test)")
    axes[0].legend()
    axes[0].set_title("(A)")
    axes[1].set_ylabel("CD(C$_{norm}$, C$_{OA}$)")
    axes[1].set_title("(B)")
    return _save(fig, path)
