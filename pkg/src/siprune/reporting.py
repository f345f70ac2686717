"""Figure rendering for the CLI report paths.

Each figure is written next to its CSV with the same stem. Matplotlib runs
on the Agg backend so the CLI works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def histogram_figure(rows, path, title: str) -> None:
    """Bar chart from (bin_low, bin_high, count) rows."""
    centers = [(lo + hi) / 2.0 for lo, hi, _ in rows]
    widths = [max(hi - lo, 1e-12) for lo, hi, _ in rows]
    counts = [c for _, _, c in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(centers, counts, width=widths, edgecolor="black", linewidth=0.3)
    ax.set_xlabel("importance score")
    ax.set_ylabel("count")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def distortion_figure(rows, path) -> None:
    """Per-layer distortion with and without induction."""
    names = [r["layer"] for r in rows]
    idx = range(len(names))
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(names)), 4))
    ax.bar([i - 0.2 for i in idx], [r["frob_no_si"] for r in rows],
           width=0.4, label="no SI")
    ax.bar([i + 0.2 for i in idx], [r["frob_si"] for r in rows],
           width=0.4, label="SI")
    ax.set_xticks(list(idx))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("output distortion (Frobenius)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def trace_figure(traces: dict, path) -> None:
    """Objective value per optimization step, one line per stage."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for stage, points in traces.items():
        steps = [s for s, _ in points]
        vals = [v for _, v in points]
        ax.plot(steps, vals, marker=".", label=stage)
    ax.set_xlabel("step")
    ax.set_ylabel("objective")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def bench_figure(result: dict, path) -> None:
    """Per-iteration refresh time, classical vs fast."""
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(["classical", "fast"], [result["classical_s"], result["fast_s"]])
    ax.set_ylabel("time per refresh (s)")
    ax.set_title(f"speedup {result['speedup']:.1f}x "
                 f"(d_in={result['d_in']}, n={result['n_samples']})")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
