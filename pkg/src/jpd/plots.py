"""SVG figures for a completed run."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# stable element ids and no timestamp, so reruns give identical files
matplotlib.rcParams["svg.hashsalt"] = "jpd"
_META = {"Date": None, "Creator": None}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def plot_categorization(path, curves, boundaries=None):
    """``curves``: {subject: (stimulus_ids, proportion_upper)}."""
    fig, ax = plt.subplots(figsize=(6, 4))
    allp = []
    for subject, (x, p) in sorted(curves.items()):
        ax.plot(x, p, color="0.75", lw=0.8)
        allp.append(p)
    if allp:
        ax.plot(x, np.mean(allp, axis=0), "k-o", lw=2, label="mean")
    for b in (boundaries or []):
        if b is not None and math.isfinite(b):
            ax.axvline(b, color="tab:red", lw=0.5, alpha=0.5)
    ax.set_xlabel("stimulus")
    ax.set_ylabel("P(upper category)")
    ax.set_ylim(-0.02, 1.02)
    if allp:
        ax.legend(loc="upper left")
    _save(fig, path)


def plot_responses(path, stimuli, response_means):
    """Stimuli and mean responses in the F2 x F1 plane (phonetic orientation).

    ``stimuli``: list of (id, f1, f2); ``response_means``: {group: [(id, f1, f2)]}.
    """
    fig, ax = plt.subplots(figsize=(6, 5))
    sid, s1, s2 = zip(*stimuli)
    ax.plot(s2, s1, "g+", ms=10, label="stimuli")
    markers = iter(["^", "o", "s", "D", "v"])
    for group, rows in sorted(response_means.items()):
        if not rows:
            continue
        rid, r1, r2 = zip(*rows)
        ax.plot(r2, r1, next(markers, "x"), ls="none", label=group)
        for i, a, b in rows:
            ax.annotate(str(i), (b, a), fontsize=7, xytext=(2, 2), textcoords="offset points")
    ax.invert_xaxis()
    ax.invert_yaxis()
    ax.set_xlabel("F2 (Hz)")
    ax.set_ylabel("F1 (Hz)")
    ax.legend()
    _save(fig, path)


def plot_limens(path, refs, values, ylabel, marks=None):
    """Per-reference limen values; NaN entries are drawn as gaps."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(refs, values, "k-o")
    for x, label in (marks or {}).items():
        ax.axvline(x, ls="--", color="0.5", lw=0.8)
        ax.text(x, ax.get_ylim()[1], label, ha="center", va="bottom", fontsize=8)
    ax.set_xlabel("reference stimulus")
    ax.set_ylabel(ylabel)
    _save(fig, path)
