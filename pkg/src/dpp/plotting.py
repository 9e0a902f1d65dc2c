"""Figures written next to the JSONL/CSV outputs (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PHASE_STYLE = {"dae": ("tab:blue", "DAE pre-training"), "cycle": ("tab:red", "cycle learning")}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def learning_curves(records, path) -> list:
    """Selection metric and (greedy) accuracy per epoch, DAE then cycle on one axis."""
    rows = [r for r in records if r.get("phase") in PHASE_STYLE and "selection" in r]
    fig, (ax_s, ax_a) = plt.subplots(1, 2, figsize=(10, 3.8))
    offset = 0
    for phase in ("dae", "cycle"):
        pts = [r for r in rows if r["phase"] == phase]
        if not pts:
            continue
        color, label = PHASE_STYLE[phase]
        xs = [offset + r["epoch"] for r in pts]
        ax_s.plot(xs, [r["selection"] for r in pts], "o-", color=color, ms=3, label=label)
        acc = [(offset + r["epoch"], r["accuracy"]) for r in pts if isinstance(r.get("accuracy"), (int, float))]
        if acc:
            ax_a.plot([a for a, _ in acc], [100 * b for _, b in acc], "o-", color=color, ms=3, label=label)
        offset = xs[-1]
    ax_s.set_xlabel("epoch")
    ax_s.set_ylabel("selection metric")
    ax_s.set_ylim(bottom=0)
    ax_a.set_xlabel("epoch")
    ax_a.set_ylabel("denotation accuracy (%)")
    ax_a.set_ylim(0, 100)
    for ax in (ax_s, ax_a):
        ax.grid(alpha=0.3)
        if ax.lines:
            ax.legend(frameon=False, fontsize=8)
    return [_save(fig, path)]


def ablation_bars(rows, path, title="") -> Path:
    """Horizontal bars of accuracy per configuration, selection metric annotated."""
    labels = [r.label for r in rows]
    acc = [0.0 if r.accuracy is None else 100 * r.accuracy for r in rows]
    fig, ax = plt.subplots(figsize=(6, 0.45 * len(rows) + 1.2))
    ys = range(len(rows))
    ax.barh(list(ys), acc, color=["tab:gray" if r.accuracy is None else "tab:blue" for r in rows])
    for y, r, a in zip(ys, rows, acc):
        note = "failed" if r.accuracy is None else f"{a:.1f}  (sel {r.selection:.2f})"
        ax.text(a + 1, y, note, va="center", fontsize=8)
    ax.set_yticks(list(ys))
    ax.set_yticklabels(labels)
    ax.invert_yaxis()
    ax.set_xlim(0, 115)
    ax.set_xlabel("denotation accuracy (%)")
    if title:
        ax.set_title(title, fontsize=10)
    return _save(fig, path)
