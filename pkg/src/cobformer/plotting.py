"""PNG figures for the analysis and training outputs (headless Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_cuk(path, empirical, theory=None, title="label agreement by hop"):
    """Empirical C^k bars with an optional theoretical curve."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    k = np.arange(len(empirical))
    ax.bar(k, empirical, color="#4c72b0", label="empirical")
    if theory is not None:
        ax.plot(np.arange(len(theory)), theory, "o-", color="#dd8452", label="theory")
    ax.set_xlabel("hop k")
    ax.set_ylabel("mean C_u^k")
    ax.set_ylim(0, 1.05)
    ax.set_title(title)
    ax.legend()
    _save(fig, path)


def plot_attn_k(path, profiles: dict, title="attention mass by hop"):
    """Grouped bars, one series per named AttnKProfile; last group is overflow."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    names = list(profiles)
    width = 0.8 / max(len(names), 1)
    for i, name in enumerate(names):
        prof = profiles[name]
        vals = np.append(prof.bins, prof.overflow)
        ax.bar(np.arange(len(vals)) + i * width, vals, width, label=name)
    kmax = profiles[names[0]].kmax if names else 0
    ax.set_xticks(np.arange(kmax + 2) + 0.4 - width / 2)
    ax.set_xticklabels([str(k) for k in range(kmax + 1)] + [">"])
    ax.set_xlabel("hop k")
    ax.set_ylabel("mean Attn-k")
    ax.set_title(title)
    ax.legend()
    _save(fig, path)


def plot_training(path, history):
    """Loss and validation Micro-F1 per epoch from EpochRecord dicts or objects."""
    rows = [h if isinstance(h, dict) else h.__dict__ for h in history]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3))
    ep = [r["epoch"] for r in rows]
    a1.plot(ep, [r["loss"] for r in rows])
    a1.set_xlabel("epoch")
    a1.set_ylabel("loss")
    a2.plot(ep, [r["val_g"] for r in rows], label="val G")
    if rows and rows[0].get("val_t") is not None:
        a2.plot(ep, [r["val_t"] for r in rows], label="val T")
    a2.set_xlabel("epoch")
    a2.set_ylabel("Micro-F1")
    a2.legend()
    _save(fig, path)
