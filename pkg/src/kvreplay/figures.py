"""Matplotlib renderings that accompany the delimited report outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)


def save_density_figure(rows: list[dict], gate: float, path: Path) -> Path:
    """Bar chart of per-layer attention variance against the gate line."""
    layers = [int(r["layer"]) for r in rows]
    variances = [float(r["variance"]) for r in rows]
    colors = ["tab:blue" if r["classification"] == "dense" else "tab:red" for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(layers, variances, color=colors)
    ax.axhline(gate, color="black", linestyle="--", linewidth=1, label=f"gate = {gate:g}")
    ax.set_xlabel("layer")
    ax.set_ylabel("column-sum variance")
    ax.set_title("attention density per layer (blue = dense, red = sparse)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_replay_figures(report, stem: Path) -> list[Path]:
    """Drift curve and per-layer cache occupancy for one replay."""
    written = []
    steps = range(len(report.step_drift))

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, report.step_drift, label="output drift (L2)")
    ax.plot(steps, report.step_retained_mass, label="retained attention mass")
    ax.set_xlabel("generation step")
    ax.set_title(f"{report.policy}: drift and retained mass per step")
    ax.legend()
    fig.tight_layout()
    drift_path = stem.with_name(stem.name + "_drift.png")
    fig.savefig(drift_path, dpi=120)
    plt.close(fig)
    written.append(drift_path)

    fig, ax = plt.subplots(figsize=(7, 4))
    entries = list(zip(*report.step_entries)) if report.step_entries else []
    for layer, series in enumerate(entries):
        ax.plot(steps, series, label=f"layer {layer}")
    ax.set_xlabel("generation step")
    ax.set_ylabel("cache entries (all heads)")
    ax.set_title(f"{report.policy}: cache occupancy per layer")
    if entries:
        ax.legend(fontsize=8)
    fig.tight_layout()
    occ_path = stem.with_name(stem.name + "_occupancy.png")
    fig.savefig(occ_path, dpi=120)
    plt.close(fig)
    written.append(occ_path)
    return written


def save_compare_figure(rows: list[dict], path: Path) -> Path:
    """Mean drift and peak cache entries per policy, side by side."""
    ok = [r for r in rows if r["status"] == "ok"]
    names = [r["policy"] for r in ok]
    drift = [float(r["mean_drift"]) for r in ok]
    peaks = [int(r["peak_total_entries"]) for r in ok]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.bar(names, drift, color="tab:orange")
    ax1.set_ylabel("mean output drift (L2)")
    ax1.set_title("quality proxy")
    ax1.tick_params(axis="x", rotation=20)
    ax2.bar(names, peaks, color="tab:green")
    ax2.set_ylabel("peak cache entries")
    ax2.set_title("memory proxy")
    ax2.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
