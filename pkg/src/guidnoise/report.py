"""Plot data and figures: residual histograms, training curves, guidance response.

Every figure is written next to the CSV it was drawn from so plots can be
regenerated elsewhere.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import hard_histogram  # noqa: E402

HIST_FIELDS = ["bin_center", "real_prob", "fake_prob"]

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def residual_histograms(real_noisy, clean, fake_noisy, bins: int = 256, lo: float = -1.0,
                        hi: float = 1.0):
    clean = np.asarray(clean, np.float64)
    real = hard_histogram(np.asarray(real_noisy, np.float64) - clean, bins, lo, hi)
    fake = hard_histogram(np.asarray(fake_noisy, np.float64) - clean, bins, lo, hi)
    edges = np.linspace(lo, hi, bins + 1)
    return (edges[:-1] + edges[1:]) / 2, real, fake


def write_histogram_csv(path, centers, real, fake) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HIST_FIELDS)
        for row in zip(centers, real, fake):
            w.writerow([f"{v:.10g}" for v in row])
    return path


def read_histogram_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1], data[:, 2]


def plot_histograms(path, centers, real, fake, title: str = "", zoom: float | None = None) -> Path:
    """Overlay of real and synthesized residual distributions."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        width = centers[1] - centers[0]
        ax.bar(centers, real, width=width, alpha=0.5, label="real", color="tab:blue")
        ax.step(centers, fake, where="mid", label="synthesized", color="tab:red", lw=1.0)
        if zoom is None:
            occupied = centers[(np.asarray(real) + np.asarray(fake)) > 0]
            zoom = float(np.max(np.abs(occupied))) * 1.1 if occupied.size else 1.0
        ax.set_xlim(-zoom, zoom)
        ax.set_xlabel("residual (image - clean)")
        ax.set_ylabel("probability")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_training_log(log_csv, path) -> Path:
    rows = list(csv.DictReader(open(log_csv, newline="")))
    it = np.array([int(r["iter"]) for r in rows])
    phase = np.array([int(r["phase"]) for r in rows])
    ldiff = np.array([float(r["loss_diffusion"]) for r in rows])
    lref = np.array([float(r["loss_refine"]) for r in rows])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.semilogy(it, ldiff, lw=0.8, label="diffusion")
        if np.any(phase == 2):
            ax2 = ax.twinx()
            ax2.plot(it[phase == 2], lref[phase == 2], lw=0.8, color="tab:orange", label="refine")
            ax2.set_ylabel("refine loss")
            ax.axvline(it[phase == 2][0], color="grey", ls=":", lw=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("diffusion loss")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_guidance_response(path, guidance_sigma, output_std) -> Path:
    """Synthesized residual std against the guidance noise level (both in 1/255)."""
    g = np.asarray(guidance_sigma, float)
    o = np.asarray(output_std, float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(g, o, "o", ms=4)
        lim = [0, max(g.max(), o.max()) * 1.1]
        ax.plot(lim, lim, color="grey", ls="--", lw=0.8)
        ax.set_xlabel("guidance noise std (x255)")
        ax.set_ylabel("synthesized noise std (x255)")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_psnr_comparison(path, labels, values) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(labels, values, color=["tab:grey", "tab:green"][: len(values)])
        lo = min(values) - 1.0
        ax.set_ylim(lo, max(values) + 0.5)
        ax.set_ylabel("mean PSNR (dB)")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
