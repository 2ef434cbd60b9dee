"""Matplotlib renderings of session reports (written to files, never shown)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _labels(rows):
    return [str(i + 1) for i in range(len(rows))]


def session_figure(rows, path, title="Spam delivery per session"):
    """Inbox vs spam-trap counts for each session of one report."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        x = np.arange(len(rows))
        ax.bar(x - 0.2, [r["delivered"] for r in rows], 0.4, label="inbox", color="#c0504d")
        ax.bar(x + 0.2, [r["trapped"] for r in rows], 0.4, label="spam trap", color="#4f81bd")
        if rows and "dos_active" in rows[0]:
            for i, r in enumerate(rows):
                if r["dos_active"]:
                    ax.axvspan(i - 0.5, i + 0.5, color="0.85", zorder=0)
        ax.set_xticks(x, _labels(rows))
        ax.set_xlabel("session")
        ax.set_ylabel("messages")
        ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
    return path


def comparison_figure(baseline, treated, path, title="Delivered spam before and after"):
    """Delivered counts per session for two reports side by side."""
    n = max(len(baseline), len(treated))
    pad = lambda rows: [r["delivered"] for r in rows] + [0] * (n - len(rows))  # noqa: E731
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        x = np.arange(n)
        ax.bar(x - 0.2, pad(baseline), 0.4, label="baseline", color="#9bbb59")
        ax.bar(x + 0.2, pad(treated), 0.4, label="treated", color="#8064a2")
        ax.set_xticks(x, [str(i + 1) for i in range(n)])
        ax.set_xlabel("session")
        ax.set_ylabel("delivered")
        ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
    return path
