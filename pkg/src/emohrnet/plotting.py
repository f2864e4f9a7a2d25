"""Report figures (matplotlib, Agg) and 8-bit PGM spectrogram images."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "image.cmap": "magma",
}


def to_gray(values: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; only the minimum maps to 0 and a constant image is all 0."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros(v.shape, dtype=np.uint8)
    g = np.rint(255.0 * (v - lo) / (hi - lo))
    g[(v > lo) & (g == 0)] = 1
    return g.astype(np.uint8)


def write_pgm(path, values: np.ndarray) -> None:
    """Binary (P5) PGM, low mel bins at the bottom row."""
    g = to_gray(np.flipud(values))
    h, w = g.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + g.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def plot_preview(original: np.ndarray, augmented: np.ndarray, path) -> None:
    diff = np.abs(augmented - original)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(11, 3), sharey=True)
        for ax, img, title in zip(axes, (original, augmented, diff), ("original", "augmented", "|difference|")):
            im = ax.imshow(img, origin="lower", aspect="auto", interpolation="nearest")
            ax.set_title(title)
            ax.set_xlabel("frame")
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.02)
        axes[0].set_ylabel("mel bin")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_history(history, path) -> None:
    epochs = [h[0] for h in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        if epochs:
            ax.semilogy(epochs, [max(h[1], 1e-12) for h in history], color="C0", label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("cross-entropy")
        val = [(h[0], h[2]) for h in history if h[2] is not None]
        if val:
            ax2 = ax.twinx()
            ax2.plot(*zip(*val), color="C1", marker=".", label="val UA")
            ax2.set_ylim(0, 1.02)
            ax2.set_ylabel("validation unweighted accuracy")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_confusion(confusion: np.ndarray, labels, path, title: str = "") -> None:
    cm = np.asarray(confusion)
    rows = cm.sum(axis=1, keepdims=True)
    frac = np.divide(cm, rows, out=np.zeros(cm.shape), where=rows > 0)
    with plt.rc_context(STYLE):
        k = len(labels)
        fig, ax = plt.subplots(figsize=(1.0 + 0.6 * k, 0.8 + 0.6 * k))
        ax.imshow(frac, vmin=0, vmax=1, cmap="Blues")
        for i in range(k):
            for j in range(k):
                ax.text(j, i, str(cm[i, j]), ha="center", va="center", color="white" if frac[i, j] > 0.5 else "black")
        ax.set_xticks(range(k), labels, rotation=45, ha="right")
        ax.set_yticks(range(k), labels)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
