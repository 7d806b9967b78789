"""Static figures for the report command (PNG via the Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

STYLE = {
    "figure.figsize": (7.0, 3.6),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "savefig.dpi": 120,
}
COLORS = {"safe-maddpg": "tab:blue", "maddpg-penalty": "tab:orange", "oracle": "tab:green"}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    # no Software/date metadata so reruns produce identical bytes
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def voltage_tracking(df: pd.DataFrame, bus_label: str, path: Path) -> Path:
    """Predicted against power-flow voltage at one bus over a day (columns t, actual_pu, predicted_pu)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(df["t"], df["actual_pu"], "o-", ms=3, label="power flow")
        ax.plot(df["t"], df["predicted_pu"], "s--", ms=3, label="linear surrogate")
        ax.set_xlabel("hour")
        ax.set_ylabel(f"voltage at {bus_label} [pu]")
        ax.legend()
        return _save(fig, path)


def training_curves(metrics: dict[str, list[pd.DataFrame]], path: Path, window: int = 20) -> Path:
    """Episode return and normalised violation cost, mean over seeds with a min-max band."""
    with plt.rc_context(STYLE):
        fig, (ax_r, ax_v) = plt.subplots(1, 2, figsize=(9.0, 3.4))
        for algo, runs in metrics.items():
            if not runs:
                continue
            color = COLORS.get(algo)
            ret = np.array([r["return"].rolling(window, min_periods=1).mean().to_numpy() for r in runs])
            vio = np.array([r["violation_cost"].rolling(window, min_periods=1).mean().to_numpy() for r in runs])
            ep = runs[0]["episode"].to_numpy() + 1
            for ax, y in ((ax_r, ret), (ax_v, vio)):
                ax.plot(ep, y.mean(axis=0), color=color, label=algo)
                ax.fill_between(ep, y.min(axis=0), y.max(axis=0), color=color, alpha=0.2, lw=0)
        ax_r.set_xlabel("episode")
        ax_r.set_ylabel("episode return [EUR]")
        ax_v.set_xlabel("episode")
        ax_v.set_ylabel("violation cost / step")
        ax_r.legend()
        return _save(fig, path)


def dispatch_profiles(traces: dict[str, pd.DataFrame], day: int, path: Path) -> Path:
    """Fleet-total demand reduction and net battery power over one test day."""
    with plt.rc_context(STYLE):
        fig, (ax_dr, ax_e) = plt.subplots(1, 2, figsize=(9.0, 3.4))
        for name, df in traces.items():
            d = df[df["day"] == day].groupby("t")[["p_dr_kw", "p_ch_kw", "p_dis_kw"]].sum()
            color = COLORS.get(name)
            ax_dr.step(d.index, d["p_dr_kw"], where="post", color=color, label=name)
            ax_e.step(d.index, d["p_ch_kw"] - d["p_dis_kw"], where="post", color=color, label=name)
        ax_dr.set_xlabel("hour")
        ax_dr.set_ylabel("total demand reduction [kW]")
        ax_e.set_xlabel("hour")
        ax_e.set_ylabel("net battery charging [kW]")
        ax_dr.legend()
        return _save(fig, path)


def voltage_profiles(traces: dict[str, pd.DataFrame], v_min: float, v_max: float, path: Path) -> Path:
    """Lowest feeder voltage per hour across the test week."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(9.0, 3.4))
        for name, df in traces.items():
            d = df.groupby(["day", "t"])["v_min_pu"].min().reset_index()
            hours = (d["day"] - d["day"].min()) * 24 + d["t"]
            ax.plot(hours, d["v_min_pu"], color=COLORS.get(name), lw=1, label=name)
        ax.axhline(v_min, color="k", ls=":", lw=1)
        ax.axhline(v_max, color="k", ls=":", lw=1)
        ax.set_xlabel("hour of test week")
        ax.set_ylabel("minimum bus voltage [pu]")
        ax.legend()
        return _save(fig, path)
