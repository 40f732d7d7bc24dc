"""SVG line plots built from ``results.csv`` alone."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .sweep import read_csv  # noqa: E402

_LEVEL_LABEL = {"blur": r"$\sigma_{GB}$", "noise": r"$\sigma_{GN}$"}


def _series(rows, kind, profile, y_key, ci_key=None):
    """mode -> sorted [(level, y, ci)] for one kind and profile."""
    out = defaultdict(list)
    for r in rows:
        if r["kind"] != kind or r["profile"] != profile or r[y_key] == "":
            continue
        ci = float(r[ci_key]) if ci_key and r[ci_key] != "" else 0.0
        out[r["mode"]].append((int(r["level"]), float(r[y_key]), ci))
    return {m: sorted(v) for m, v in out.items()}


def _plot(path: Path, series, xlabel: str, ylabel: str, title: str) -> Path:
    plt.rcParams["svg.hashsalt"] = "eeoffload"
    fig, ax = plt.subplots(figsize=(4.8, 3.4))
    for mode in sorted(series):
        pts = series[mode]
        xs, ys, cis = zip(*pts)
        ax.errorbar(xs, ys, yerr=cis if any(cis) else None, marker="o", capsize=3, label=mode)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    if series:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def write_figures(csv_path, out_dir) -> list[Path]:
    rows = read_csv(csv_path)
    out_dir = Path(out_dir)
    kinds = sorted({r["kind"] for r in rows})
    profiles = list(dict.fromkeys(r["profile"] for r in rows))
    exit_cols = [c for c in (rows[0] if rows else {}) if c.startswith("exit") and c.endswith("_accuracy")]
    side_col = exit_cols[-2] if len(exit_cols) >= 2 else None
    written = []
    for kind in kinds:
        xl = _LEVEL_LABEL.get(kind, "level")
        first = profiles[0]
        written.append(_plot(out_dir / f"fig_accuracy_{kind}.svg", _series(rows, kind, first, "accuracy", "accuracy_ci95"),
                             xl, "overall accuracy", f"{kind}: overall accuracy"))
        written.append(_plot(out_dir / f"fig_ondevice_{kind}.svg", _series(rows, kind, first, "on_device", "on_device_ci95"),
                             xl, "on-device probability", f"{kind}: on-device classification"))
        if side_col:
            written.append(_plot(out_dir / f"fig_exit_accuracy_{kind}.svg", _series(rows, kind, first, side_col),
                                 xl, "accuracy", f"{kind}: {side_col.split('_')[0]} accuracy"))
        for profile in profiles:
            written.append(_plot(out_dir / f"fig_latency_{kind}_{profile}.svg",
                                 _series(rows, kind, profile, "latency_ms", "latency_ms_ci95"),
                                 xl, "end-to-end latency (ms)", f"{kind}: latency, {profile}"))
    return written
