"""Report figures, written next to the CSV output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GIB = 2**30

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (6.0, 3.6),
    "savefig.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # no timestamp metadata so repeated runs write identical files
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def memory_breakdown(layouts, path, limit_bytes=None, top=12):
    """Stacked per-GPU memory bars for the first ``top`` (layout, estimate) pairs."""
    items = list(layouts)[:top]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels = [f"tp{lo.tp} pp{lo.pp}\ndp{lo.dp} mb{lo.micro_batch}" for lo, _ in items]
        x = range(len(items))
        bottom = [0.0] * len(items)
        for name in ("weights", "gradients", "optimizer_states", "activations"):
            vals = [getattr(m, name) / GIB for _, m in items]
            ax.bar(x, vals, bottom=bottom, label=name.replace("_", " "))
            bottom = [b + v for b, v in zip(bottom, vals)]
        if limit_bytes:
            ax.axhline(limit_bytes / GIB, color="k", ls="--", lw=0.8, label="GPU memory")
        ax.set_xticks(list(x))
        ax.set_xticklabels(labels, fontsize=6)
        ax.set_ylabel("GiB per GPU")
        ax.legend(frameon=False)
        return _save(fig, path)


def goodput_sweep(rows, path, optimum=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        xs = [r.interval for r in rows]
        ax.plot(xs, [r.analytic for r in rows], "-", label="first-order model")
        ax.errorbar(xs, [r.mean for r in rows], yerr=[r.std for r in rows],
                    fmt="o", ms=3, capsize=2, label="simulated mean")
        if optimum:
            ax.axvline(optimum, color="k", ls=":", lw=0.8, label="sqrt(2 C M)")
        ax.set_xscale("log")
        ax.set_xlabel("checkpoint interval [s]")
        ax.set_ylabel("goodput")
        ax.legend(frameon=False)
        return _save(fig, path)


def iteration_times(records, path, other=None, labels=("run", "compare")):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot([r.iteration for r in records], [r.elapsed_ms for r in records],
                ".-", lw=0.8, label=labels[0])
        if other:
            ax.plot([r.iteration for r in other], [r.elapsed_ms for r in other],
                    ".-", lw=0.8, label=labels[1])
        ax.set_xlabel("iteration")
        ax.set_ylabel("elapsed per iteration [ms]")
        ax.legend(frameon=False)
        return _save(fig, path)


def power_trace(samples, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot([s.t for s in samples], [s.watts for s in samples], lw=0.8)
        ax.set_xlabel("time [s]")
        ax.set_ylabel("power [W]")
        return _save(fig, path)
