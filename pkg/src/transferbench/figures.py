"""Matplotlib rendering of experiment reports (RMSE bars + ASR lines)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_report_figure(report, path: str | Path) -> None:
    """One figure per report: per-attack RMSE as bars, mean ASR as lines.

    Rows are grouped by gamma so the gamma sweep shows up as paired bars and
    a second line, matching how the protocols are meant to be read.
    """
    gammas = sorted({row.gamma for row in report.rows})
    attacks = list(dict.fromkeys(row.attack for row in report.rows))
    positions = np.arange(len(attacks))
    width = 0.8 / max(len(gammas), 1)

    fig, ax_asr = plt.subplots(figsize=(7.0, 4.0))
    ax_rmse = ax_asr.twinx()
    bar_shades = ["#b0c4de", "#5b7aa9", "#2f4a73"]
    line_colors = ["#c23b22", "#7a1f1f", "#3f0d0d"]

    for gi, gamma in enumerate(gammas):
        rows = {row.attack: row for row in report.rows if row.gamma == gamma}
        rmse = [rows[a].mean_rmse_255 if a in rows else np.nan for a in attacks]
        asr = [rows[a].mean_asr if a in rows else np.nan for a in attacks]
        offset = (gi - (len(gammas) - 1) / 2.0) * width
        label = f"gamma={gamma:g}" if len(gammas) > 1 else None
        ax_rmse.bar(
            positions + offset, rmse, width=width * 0.9,
            color=bar_shades[gi % len(bar_shades)], alpha=0.8, zorder=1,
            label=f"RMSE {label}" if label else "RMSE",
        )
        ax_asr.plot(
            positions, asr, marker="o",
            color=line_colors[gi % len(line_colors)],
            linestyle="-" if gi == 0 else "--", zorder=3,
            label=f"ASR {label}" if label else "ASR",
        )

    ax_asr.set_xticks(positions)
    ax_asr.set_xticklabels(attacks, rotation=30, ha="right")
    ax_asr.set_ylabel("mean ASR")
    ax_asr.set_ylim(0.0, 1.0)
    ax_rmse.set_ylabel("mean RMSE (0-255 scale)")
    ax_rmse.set_ylim(0.0, max(report.epsilon_255 * 1.1, 1.0))
    ax_asr.set_zorder(ax_rmse.get_zorder() + 1)
    ax_asr.patch.set_visible(False)

    handles_a, labels_a = ax_asr.get_legend_handles_labels()
    handles_r, labels_r = ax_rmse.get_legend_handles_labels()
    ax_asr.legend(handles_a + handles_r, labels_a + labels_r, loc="upper left", fontsize=8)
    ax_asr.set_title(
        f"{report.name}: {len(report.victims)} victims, "
        f"{report.eval_count} samples, eps={report.epsilon_255:g}"
    )
    fig.tight_layout()
    # strip the creation-software comment so identical reports give identical bytes
    fig.savefig(path, dpi=150, metadata={"Software": None})
    plt.close(fig)
