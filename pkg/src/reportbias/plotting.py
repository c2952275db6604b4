"""Matplotlib figures written next to the CSV/JSON reports."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path):
    # no timestamps in the metadata, so reruns give identical files
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def bias_figure(names, union, per_reference, path):
    """Omission rate per concept, highest first."""
    union = np.asarray(union, dtype=float)
    order = np.argsort(-np.nan_to_num(np.asarray(per_reference, dtype=float), nan=-1.0),
                       kind="stable")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.3 * len(names)), 3.0))
        x = np.arange(len(order))
        ax.bar(x, np.asarray(per_reference, dtype=float)[order], color="0.7",
               label="single reference")
        ax.plot(x, union[order], "k.-", lw=1, label="union of references")
        ax.set_xticks(x)
        ax.set_xticklabels([names[i] for i in order], rotation=90)
        ax.set_ylabel("P(y = 0 | z = 1)")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def ap_figure(per_concept, path):
    """Per-concept AP of h and v against the available targets."""
    names = per_concept["concept"]
    cols = [c for c in ("ap_h_vs_y", "ap_v_vs_y", "ap_v_vs_z", "ap_h_vs_z") if c in per_concept]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * len(names)), 3.0))
        x = np.arange(len(names))
        width = 0.8 / max(len(cols), 1)
        for i, c in enumerate(cols):
            vals = np.array([np.nan if a is None else a for a in per_concept[c]], dtype=float)
            ax.bar(x + (i - (len(cols) - 1) / 2) * width, vals, width, label=c[3:])
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=90)
        ax.set_ylabel("average precision")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False, ncol=len(cols))
        fig.tight_layout()
        _save(fig, path)


def histogram_grid(names, histograms, path, ncols=5):
    """Small multiples of the (v, h) histograms, log-scaled counts."""
    n = len(names)
    nrows = int(np.ceil(n / ncols))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(1.8 * ncols, 1.8 * nrows),
                                 squeeze=False)
        for ax in axes.flat[n:]:
            ax.axis("off")
        for ax, name, hist in zip(axes.flat, names, histograms):
            ax.imshow(np.log1p(hist.counts.T), origin="lower", extent=(0, 1, 0, 1),
                      cmap="Greys", aspect="equal")
            ax.set_title(name)
            ax.set_xticks([0, 1])
            ax.set_yticks([0, 1])
        for ax in axes[-1]:
            ax.set_xlabel("v")
        for ax in axes[:, 0]:
            ax.set_ylabel("h")
        fig.tight_layout()
        _save(fig, path)


def loss_figure(epoch_loss, phase, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.5, 2.5))
        epochs = np.arange(1, len(epoch_loss) + 1)
        ax.plot(epochs, epoch_loss, "k.-", lw=1)
        joint = [e for e, p in zip(epochs, phase) if p == "joint"]
        if joint:
            ax.axvline(joint[0] - 0.5, color="0.6", ls="--", lw=0.8)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean training loss")
        fig.tight_layout()
        _save(fig, path)
