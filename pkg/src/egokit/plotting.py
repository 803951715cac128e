"""Static figures for the ablation report."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def ablation_chart(rows, path, metric: str = "mpjpe") -> None:
    """Grouped bars of ``metric`` per variant and sequence length, with stderr whiskers.

    ``rows`` are dicts with keys variant, seqlen, <metric> and <metric>_se.
    The SVG is written without timestamps so reruns are byte-identical.
    """
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    seqlens = sorted({int(r["seqlen"]) for r in rows})
    lookup = {(r["variant"], int(r["seqlen"])): r for r in rows}
    width = 0.8 / max(len(seqlens), 1)
    x = np.arange(len(variants))
    with plt.rc_context({"svg.hashsalt": "egokit", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(7.0, 4.0))
        for i, length in enumerate(seqlens):
            vals = [lookup.get((v, length), {}).get(metric, np.nan) for v in variants]
            errs = [lookup.get((v, length), {}).get(f"{metric}_se", 0.0) for v in variants]
            ax.bar(x + (i - (len(seqlens) - 1) / 2) * width, vals, width, yerr=errs, capsize=3,
                   label=f"seqlen {length}")
        ax.set_xticks(x)
        ax.set_xticklabels(variants, rotation=15)
        ax.set_ylabel(f"{metric} (mm)")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
