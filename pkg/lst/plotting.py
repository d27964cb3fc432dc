"""SVG line plots of metric CSVs (training curves, accuracy and NLL-difference vs. step)."""

import csv
import logging
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from lst.errors import ConfigError, CorpusFormatError

logger = logging.getLogger(__name__)


def read_series(path: str | Path, x: str, ys: Sequence[str], group_by: str | None = None) -> dict[str, tuple[list[float], list[float]]]:
    """
    Column series keyed by "<y>" (or "<y> [<group>]" when `group_by` is given). Empty
    cells are skipped.

    Raises:
        CorpusFormatError: If the file cannot be read.
        ConfigError: If a requested column is missing.
    """
    try:
        with Path(path).open(newline="") as f:
            reader = csv.DictReader(f)
            fields = reader.fieldnames or []
            rows = list(reader)
    except OSError as e:
        raise CorpusFormatError(f"cannot read {path}: {e}") from e
    for column in (x, *ys, *([group_by] if group_by else [])):
        if column not in fields:
            raise ConfigError(f"column {column!r} not in {path} (have {', '.join(fields)})", "plot.columns")
    series: dict[str, tuple[list[float], list[float]]] = {}
    for row in rows:
        for y in ys:
            if row[x] == "" or row[y] == "":
                continue
            key = f"{y} [{row[group_by]}]" if group_by else y
            xs, vs = series.setdefault(key, ([], []))
            xs.append(float(row[x]))
            vs.append(float(row[y]))
    return series


def plot_csv(
    paths: Sequence[str | Path],
    out: str | Path,
    *,
    x: str = "step",
    ys: Sequence[str] = ("loss",),
    group_by: str | None = None,
    title: str | None = None,
    labels: Sequence[str] | None = None,
) -> Path:
    """Render one line per (file, column[, group]) to an SVG file."""
    out = Path(out)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    try:
        for i, path in enumerate(paths):
            label = labels[i] if labels else Path(path).parent.name or Path(path).stem
            for key, (xs, vs) in read_series(path, x, ys, group_by).items():
                ax.plot(xs, vs, label=f"{label}: {key}" if len(paths) > 1 else key, linewidth=1.2)
        ax.set_xlabel(x)
        ax.set_ylabel(", ".join(ys))
        if title:
            ax.set_title(title)
        ax.grid(alpha=0.3)
        if ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize=8)
        fig.tight_layout()
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, format="svg")
    finally:
        plt.close(fig)
    logger.info(f"Wrote {out}")
    return out
