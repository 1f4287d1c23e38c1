"""Atomic CSV/JSON writers, run manifests and matplotlib figures."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import __version__  # noqa: E402

REPORT_COLUMNS = ("step", "loss", "a1", "a2", "a3")
COMPARE_COLUMNS = ("run", "fusion", "template", "steps", "final_loss", "eval_loss", "localization_score", "a1", "a2", "a3", "ms_per_step")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    atomic_write_text(path, csv_text(header, rows))


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def manifest(command: str, config: dict, seed, outputs: Sequence, started: datetime) -> dict:
    return {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "outputs": [str(p) for p in outputs],
        "started": started.isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
    }


def now() -> datetime:
    return datetime.now(timezone.utc)


# -- figures ----------------------------------------------------------------------

_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=110, metadata=_PNG_META)
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_training(losses: Sequence[float], weights: Sequence[Sequence[float]], path, title: str = "") -> None:
    """Loss trace (with 50-step running mean) above the attention-weight trajectories."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6.4, 5.6), sharex=True)
    steps = np.arange(len(losses))
    ax1.plot(steps, losses, lw=0.5, color="0.7", label="per step")
    if len(losses) >= 50:
        smooth = np.convolve(losses, np.ones(50) / 50, mode="valid")
        ax1.plot(steps[49:], smooth, color="C0", label="50-step mean")
    ax1.set_ylabel("heatmap MSE")
    ax1.legend(frameon=False, fontsize=8)
    w = np.asarray(weights).reshape(-1, 3)
    for i in range(3):
        ax2.plot(steps, w[:, i], label=f"a{i + 1}")
    ax2.set_ylim(0, 1)
    ax2.set_xlabel("step")
    ax2.set_ylabel("attention weight")
    ax2.legend(frameon=False, fontsize=8, ncol=3)
    if title:
        ax1.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def plot_size_histogram(rows: Sequence[tuple[float, float, int]], bin_width: float, path) -> None:
    ws = sorted({r[0] for r in rows})
    hs = sorted({r[1] for r in rows})
    grid = np.zeros((len(hs), len(ws)))
    for w, h, c in rows:
        grid[hs.index(h), ws.index(w)] = c
    fig, ax = plt.subplots(figsize=(5, 4.2))
    extent = (0, len(ws) * bin_width, 0, len(hs) * bin_width)
    im = ax.imshow(grid, origin="lower", extent=extent, cmap="viridis", aspect="equal")
    fig.colorbar(im, ax=ax, label="instances")
    ax.set_xlabel("box width (px)")
    ax.set_ylabel("box height (px)")
    fig.tight_layout()
    _save(fig, path)


def plot_compare(rows: Sequence[dict], path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    names = [r["run"] for r in rows]
    x = np.arange(len(rows))
    ax1.bar(x, [float(r["localization_score"] or 0) for r in rows], color="C0")
    ax1.set_ylabel("localization score")
    bottom = np.zeros(len(rows))
    for i in range(3):
        vals = np.array([float(r[f"a{i + 1}"] or 0) for r in rows])
        ax2.bar(x, vals, bottom=bottom, label=f"a{i + 1}")
        bottom += vals
    ax2.set_ylabel("mean attention weight")
    ax2.legend(frameon=False, fontsize=8)
    for ax in (ax1, ax2):
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)
