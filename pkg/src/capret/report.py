"""Delimited tables and rendered figures for runs and evaluations.

Every CLI report path writes a machine-readable delimited table and, next to
it, a PNG rendering of the same numbers.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def format_table(rows: list[dict], columns: list[str] | None = None, delimiter: str = "\t") -> str:
    """Render dict rows as a delimited table with a header line."""
    if not rows:
        raise ValueError("no rows to format")
    if columns is None:
        columns = []
        for row in rows:
            for key in row:
                if key not in columns:
                    columns.append(key)
    lines = [delimiter.join(columns)]
    for row in rows:
        lines.append(delimiter.join(_cell(row.get(c, "")) for c in columns))
    return "\n".join(lines) + "\n"


def write_table(rows: list[dict], path: str | Path, columns: list[str] | None = None, delimiter: str = "\t") -> str:
    text = format_table(rows, columns, delimiter)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return text


def plot_training_curves(log: list[dict], path: str | Path) -> None:
    """Loss components and periodic validation metrics over training steps."""
    loss_rows = [r for r in log if "loss_total" in r]
    val_rows = [r for r in log if "val_mean_recall" in r]
    fig, axes = plt.subplots(1, 2 if val_rows else 1, figsize=(10 if val_rows else 5.5, 4))
    ax = axes[0] if val_rows else axes
    if loss_rows:
        steps = [r["step"] for r in loss_rows]
        for key, label in [("loss_caption", "caption"), ("loss_t2i", "t2i"), ("loss_i2t", "i2t"), ("loss_total", "total")]:
            ax.plot(steps, [r[key] for r in loss_rows], label=label)
        ax.legend()
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    if val_rows:
        ax2 = axes[1]
        steps = [r["step"] for r in val_rows]
        for key in ("val_R@1", "val_R@5", "val_R@10", "val_mean_recall"):
            if key in val_rows[0]:
                ax2.plot(steps, [r[key] for r in val_rows], marker="o", label=key)
        if "val_bleu1" in val_rows[0]:
            ax2.plot(steps, [100 * r["val_bleu1"] for r in val_rows], marker="s", linestyle="--", label="val_bleu1 x100")
        ax2.set_xlabel("step")
        ax2.set_ylabel("val metric")
        ax2.set_title("validation")
        ax2.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_recall_bars(metrics: dict[str, float], path: str | Path, title: str = "text-to-image recall") -> None:
    names = [k for k in metrics if k.startswith("R@")] + ["mean_recall"]
    values = [metrics[k] for k in names]
    fig, ax = plt.subplots(figsize=(5.5, 4))
    bars = ax.bar(names, values, color=["#4878b0"] * (len(names) - 1) + ["#e1812c"])
    ax.bar_label(bars, fmt="%.1f")
    ax.set_ylim(0, 105)
    ax.set_ylabel("recall (%)")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def plot_caption_scores(scores: dict[str, float], path: str | Path, title: str = "caption metrics") -> None:
    names = list(scores)
    values = [scores[k] for k in names]
    fig, ax = plt.subplots(figsize=(6, 4))
    bars = ax.bar(names, values, color="#4878b0")
    ax.bar_label(bars, fmt="%.3f")
    ax.set_ylabel("score")
    ax.set_title(title + "  (CIDEr-D on its native 0-10 scale)")
    fig.tight_layout()
    _save(fig, path)


def plot_stage1_curves(log: list[dict], path: str | Path) -> None:
    """Contrastive losses and val recall for encoder fine-tuning runs."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    steps = [r["step"] for r in log]
    ax.plot(steps, [r["loss_t2i"] for r in log], label="t2i")
    ax.plot(steps, [r["loss_i2t"] for r in log], label="i2t")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    val_rows = [r for r in log if "val_R@1" in r]
    if val_rows:
        ax2 = ax.twinx()
        ax2.plot([r["step"] for r in val_rows], [r["val_R@1"] for r in val_rows], "o--", color="#e1812c", label="val R@1")
        ax2.set_ylabel("val R@1 (%)")
        ax2.set_ylim(0, 105)
    ax.legend(loc="upper right")
    ax.set_title("encoder fine-tuning")
    fig.tight_layout()
    _save(fig, path)


def _save(fig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
