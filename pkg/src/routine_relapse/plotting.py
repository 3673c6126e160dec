"""SVG renderings of report tables.  Figures are drawn only from the CSV files
they illustrate, so every plotted number can be traced back to a table row.

Element ids make figures machine-checkable: the axes patch of each boxplot
panel has id ``axes:<score>:<ylo>:<yhi>`` (its y-limits in data units), each
box outline ``box:<score>:<x>:<group>`` and each median line
``median:<score>:<x>:<group>``.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

FORMATS = ("csv", "svg")
GROUPS = ("pre-NR", "NR")
_RC = {"svg.hashsalt": "routine-relapse", "svg.fonttype": "none", "font.size": 8}


class PlotFormatError(ValueError):
    pass


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _ylim(values: np.ndarray) -> tuple[float, float]:
    lo, hi = float(np.min(values)), float(np.max(values))
    pad = 0.05 * (hi - lo) if hi > lo else 0.5
    return lo - pad, hi + pad


def boxplot_svg(box: pd.DataFrame, path) -> Path:
    """One panel per score; a pre-NR/NR box pair per window length."""
    path = Path(path)
    scores = list(dict.fromkeys(box["score"]))
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(len(scores), 1, figsize=(6, 2.2 * max(1, len(scores))), squeeze=False)
        for ax, score in zip(axes[:, 0], scores):
            sub = box[box["score"] == score]
            xs = sorted(sub["x"].unique())
            data, positions, ids = [], [], []
            for i, x in enumerate(xs):
                for j, group in enumerate(GROUPS):
                    vals = sub.loc[(sub["x"] == x) & (sub["group"] == group), "value"].to_numpy(np.float64)
                    vals = vals[~np.isnan(vals)]
                    if vals.size == 0:
                        continue
                    data.append(vals)
                    positions.append(3 * i + j + 1)
                    ids.append(f"{score}:{x}:{group}")
            if data:
                parts = ax.boxplot(data, positions=positions, widths=0.7, showfliers=False)
                for line, gid in zip(parts["boxes"], ids):
                    line.set_gid(f"box:{gid}")
                for line, gid in zip(parts["medians"], ids):
                    line.set_gid(f"median:{gid}")
                lo, hi = _ylim(np.concatenate(data))
            else:
                lo, hi = 0.0, 1.0
            ax.set_ylim(lo, hi)
            ax.patch.set_gid(f"axes:{score}:{lo!r}:{hi!r}")
            ax.set_xticks([3 * i + 1.5 for i in range(len(xs))], [f"NR{x}" for x in xs])
            ax.set_xlim(0, 3 * len(xs))
            ax.set_ylabel(score)
        axes[0, 0].set_title("pre-NR (left) vs NR (right)")
        fig.tight_layout()
        _save(fig, path)
    return path


def timeseries_svg(series: pd.DataFrame, path, scores=("gmm_weighted_likelihood", "pam_assigned_distance"),
                   max_patients: int = 4) -> Path:
    """Score traces of the first relapsing patients with relapse days marked."""
    path = Path(path)
    relapsing = sorted(series.loc[series["relapse"].astype(bool), "patient_id"].unique())[:max_patients]
    if not relapsing:
        relapsing = sorted(series["patient_id"].unique())[:max_patients]
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(max(1, len(relapsing)), len(scores),
                                 figsize=(3.2 * len(scores), 1.8 * max(1, len(relapsing))), squeeze=False)
        for r, pid in enumerate(relapsing):
            g = series[series["patient_id"] == pid]
            marks = g.loc[g["relapse"].astype(bool), "day"].to_numpy()
            for c, score in enumerate(scores):
                ax = axes[r, c]
                line, = ax.plot(g["day"].to_numpy(), g[score].to_numpy(np.float64), lw=0.8)
                line.set_gid(f"series:{pid}:{score}")
                for m in marks:
                    ax.axvline(m, color="red", lw=0.8, ls="--")
                if r == 0:
                    ax.set_title(score)
                if c == 0:
                    ax.set_ylabel(pid)
        fig.tight_layout()
        _save(fig, path)
    return path


def emit_plot_data(report_dir, fmt: str) -> list[Path]:
    """Write the plot files for ``fmt``; CSV tables already exist in ``report_dir``."""
    report_dir = Path(report_dir)
    if fmt not in FORMATS:
        raise PlotFormatError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    if fmt == "csv":
        return sorted(report_dir.glob("*.csv"))
    box = pd.read_csv(report_dir / "nr_boxplot.csv", dtype={"patient_id": str}, float_precision="round_trip")
    series = pd.read_csv(report_dir / "score_timeseries.csv", dtype={"patient_id": str},
                         float_precision="round_trip")
    return [boxplot_svg(box, report_dir / "nr_boxplot.svg"),
            timeseries_svg(series, report_dir / "score_timeseries.svg")]
