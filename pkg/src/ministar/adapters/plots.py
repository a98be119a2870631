"""PNG curves of metric CSVs."""

from __future__ import annotations

from collections import deque
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ministar.adapters.metrics_csv import read_metrics  # noqa: E402


def sma(vals: Sequence[float], k: int) -> list[float]:
    if k <= 1:
        return list(vals)
    out = []
    q: deque[float] = deque()
    s = 0.0
    for v in vals:
        q.append(v)
        s += v
        if len(q) > k:
            s -= q.popleft()
        out.append(s / len(q))
    return out


def plot_metrics(csv_path: str | Path, out_png: str | Path, columns: Optional[Sequence[str]] = None,
                 x: Optional[str] = None, smooth: int = 10) -> Path:
    """One line per column (raw and smoothed) against `x` or the row number."""
    rows = read_metrics(csv_path)
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    if len(rows) < 2:
        plt.figure(figsize=(6, 2.5), dpi=160)
        plt.title(f"Not enough rows in {Path(csv_path).name}")
        plt.tight_layout(); plt.savefig(out_png, format="png"); plt.close()
        return out_png

    if columns is None:
        columns = [k for k in rows[0] if k != x and k in ("loss", "total", "win_rate")] or [k for k in rows[0] if k != x][:1]
    xs = [r.get(x, i) for i, r in enumerate(rows)] if x else list(range(len(rows)))

    plt.figure(figsize=(9, 4), dpi=160)
    for col in columns:
        pts = [(xv, r[col]) for xv, r in zip(xs, rows) if col in r]
        if not pts:
            continue
        px, py = zip(*pts)
        plt.plot(px, py, linewidth=1.0, alpha=0.5, label=col)
        if smooth > 1 and len(py) >= smooth:
            plt.plot(px, sma(py, smooth), linewidth=1.5, linestyle="--", label=f"{col} SMA{smooth}")
    plt.title(Path(csv_path).stem)
    plt.xlabel(x or "row")
    plt.grid(True, alpha=0.3); plt.legend(loc="upper right")
    plt.tight_layout(); plt.savefig(out_png, format="png"); plt.close()
    return out_png
