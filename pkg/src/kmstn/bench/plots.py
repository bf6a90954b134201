"""Static figures (needs the optional matplotlib dependency)."""
from __future__ import annotations

from pathlib import Path
from typing import List, Sequence

from .harness import MetricsRecord
from .stats import rolling_mean, rolling_std


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:
        raise RuntimeError("plotting needs matplotlib (pip install 'artifact[plots]')") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_all(records: Sequence[MetricsRecord], out_dir) -> List[Path]:
    plt = _pyplot()
    out = Path(out_dir)
    written = []
    recs = [r for r in records if any(q.success for q in r.requests)]
    if not recs:
        return written

    fig, ax = plt.subplots(figsize=(max(6, len(recs)), 4))
    ax.boxplot([[q.latency_ms for q in r.requests if q.success] for r in recs])
    ax.set_xticks(range(1, len(recs) + 1), [r.spec.name for r in recs], rotation=45, ha="right")
    ax.set_ylabel("latency (ms)")
    fig.tight_layout()
    written.append(out / "latency_box.png")
    fig.savefig(written[-1])
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(max(6, len(recs)), 4))
    ax.violinplot([[q.latency_ms for q in r.requests if q.success] or [0.0] for r in recs])
    ax.set_xticks(range(1, len(recs) + 1), [r.spec.name for r in recs], rotation=45, ha="right")
    ax.set_ylabel("latency (ms)")
    fig.tight_layout()
    written.append(out / "latency_violin.png")
    fig.savefig(written[-1])
    plt.close(fig)

    for r in recs:
        lat = [q.latency_ms for q in r.requests if q.success]
        w = r.spec.window
        if len(lat) < w:
            continue
        mean, std = rolling_mean(lat, w), rolling_std(lat, w)
        x = list(range(w - 1, len(lat)))
        fig, ax = plt.subplots(figsize=(7, 3.5))
        ax.plot(range(len(lat)), lat, lw=0.5, alpha=0.4, label="latency")
        ax.plot(x, mean, lw=1.2, label=f"rolling mean ({w})")
        ax.fill_between(x, [m - s for m, s in zip(mean, std)], [m + s for m, s in zip(mean, std)],
                        alpha=0.25, label="±1 rolling std")
        ax.set_xlabel("request")
        ax.set_ylabel("latency (ms)")
        ax.legend(loc="upper right")
        fig.tight_layout()
        written.append(out / f"rolling_{r.spec.name}.png")
        fig.savefig(written[-1])
        plt.close(fig)
    return written
