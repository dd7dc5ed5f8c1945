"""Static figures rendered from exported shape-grid CSV files.

Plotting is a pure function of the grid files: main effects become line
charts (bar charts for categorical inputs) and pair effects become
heatmaps. Nothing here touches model internals.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import DataError  # noqa: E402


def read_grid_csv(path):
    """Returns (input columns as string lists, values) from a grid file."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-1] != "value" or len(header) not in (2, 3):
            raise DataError(f"{path}: not a shape-grid file (header {header})")
        cols = [[] for _ in header]
        for row in reader:
            for c, cell in zip(cols, row):
                c.append(cell)
    values = [float(v) for v in cols[-1]]
    return cols[:-1], values


def _maybe_numeric(column):
    try:
        return [float(v) for v in column], True
    except ValueError:
        return column, False


def render_grid(csv_path, out_path, title: str | None = None) -> Path:
    """Draw one grid file to an image; the suffix picks the format."""
    inputs, values = read_grid_csv(csv_path)
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    try:
        if len(inputs) == 1:
            xs, numeric = _maybe_numeric(inputs[0])
            if numeric:
                ax.plot(xs, values, lw=1.5)
            else:
                ax.bar(range(len(xs)), values)
                ax.set_xticks(range(len(xs)), xs, rotation=30, ha="right")
            ax.set_xlabel("input")
            ax.set_ylabel("shape value")
            ax.axhline(0.0, color="grey", lw=0.5)
        else:
            x1, num1 = _maybe_numeric(inputs[0])
            x2, num2 = _maybe_numeric(inputs[1])
            u1 = sorted(set(x1), key=x1.index) if not num1 else sorted(set(x1))
            u2 = sorted(set(x2), key=x2.index) if not num2 else sorted(set(x2))
            n1, n2 = len(u1), len(u2)
            if n1 * n2 != len(values):
                raise DataError(f"{csv_path}: grid is not rectangular")
            import numpy as np

            grid = np.asarray(values).reshape(n1, n2)
            extent = None
            if num1 and num2:
                extent = [min(u1), max(u1), min(u2), max(u2)]
            im = ax.imshow(
                grid.T, origin="lower", aspect="auto", extent=extent, cmap="viridis"
            )
            if not num1:
                ax.set_xticks(range(n1), u1, rotation=30, ha="right")
            if not num2:
                ax.set_yticks(range(n2), u2)
            fig.colorbar(im, ax=ax, label="shape value")
            ax.set_xlabel("input 1")
            ax.set_ylabel("input 2")
        ax.set_title(title or Path(csv_path).stem)
        fig.tight_layout()
        fig.savefig(out_path)
    finally:
        plt.close(fig)
    return out_path


def render_all(grid_paths, out_dir, image_format: str = "svg") -> list:
    """Render every grid CSV into out_dir; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in grid_paths:
        path = Path(path)
        out = out_dir / (path.stem + "." + image_format)
        written.append(render_grid(path, out))
    return written
