"""Render figures from meta-risk-lab CSV outputs.

Three figure kinds, matched to the experiment CSV schemas:

  curves    one line of mean risk vs iteration per sweep value
            (phase-transition or stopping curves.csv), optional Bayes
            reference line;
  tradeoff  final risk vs beta_tr, one panel per input CSV
            (tradeoff_<spectrum>.csv files);
  stopping  training-loss and test-risk panels per beta_tr from a
            stopping-run curves.csv, with optional t_eps markers from the
            matching stopping.csv.

No quantity is recomputed here: inputs are plotted as-is, the only numeric
transform is axis scaling.  Rendering is deterministic for fixed input
bytes (fixed style, fixed size, no timestamps in image metadata).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["FigureSpec", "RenderError", "MissingColumnError", "EmptyDataError", "render", "main"]

FIGURE_KINDS = ("curves", "tradeoff", "stopping")

_STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
}

_PNG_METADATA = {"Software": "meta-risk-plots"}


class RenderError(ValueError):
    """Problem with the figure spec or its input data."""


class MissingColumnError(RenderError):
    def __init__(self, path, column):
        self.column = column
        super().__init__(f"{path}: missing required column {column!r}")


class EmptyDataError(RenderError):
    def __init__(self, path):
        super().__init__(f"{path}: no data rows")


@dataclass(frozen=True)
class FigureSpec:
    kind: str
    inputs: tuple
    output: str
    x_scale: str = "log"
    y_scale: str = "log"
    bayes_error: float | None = None
    title: str | None = None

    def __post_init__(self):
        if self.kind not in FIGURE_KINDS:
            raise RenderError(f"kind must be one of {FIGURE_KINDS}, got {self.kind!r}")
        if not self.inputs:
            raise RenderError("at least one input CSV is required")
        for scale in (self.x_scale, self.y_scale):
            if scale not in ("log", "linear"):
                raise RenderError(f"axis scale must be log or linear, got {scale!r}")

    @classmethod
    def from_json_file(cls, path) -> "FigureSpec":
        with open(path) as fh:
            raw = json.load(fh)
        try:
            return cls(
                kind=raw["kind"],
                inputs=tuple(raw["inputs"]),
                output=raw["output"],
                x_scale=raw.get("x_scale", "log"),
                y_scale=raw.get("y_scale", "log"),
                bayes_error=raw.get("bayes_error"),
                title=raw.get("title"),
            )
        except KeyError as exc:
            raise RenderError(f"figure spec is missing field {exc.args[0]!r}") from exc


def _read_table(path, required):
    path = Path(path)
    if not path.exists():
        raise RenderError(f"input CSV not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for column in required:
            if column not in header:
                raise MissingColumnError(path, column)
        rows = [row for row in reader if any(v not in ("", None) for v in row.values())]
    if not rows:
        raise EmptyDataError(path)
    return rows


def _floats(rows, column):
    return np.array([float(r[column]) for r in rows])


def _group_column(rows, path):
    """The sweep column of a curves.csv: whichever of r/beta_tr/spectrum is present."""
    for candidate in ("r", "beta_tr", "spectrum"):
        if candidate in rows[0]:
            return candidate
    raise MissingColumnError(path, "r|beta_tr|spectrum")


def _group_by(rows, column):
    groups = {}
    for row in rows:
        groups.setdefault(row[column], []).append(row)
    return groups


def _render_curves(spec: FigureSpec, fig):
    path = spec.inputs[0]
    rows = _read_table(path, required=["t", "mean_risk"])
    sweep = _group_column(rows, path)
    ax = fig.subplots(1, 1)
    for value, group in _group_by(rows, sweep).items():
        ax.plot(_floats(group, "t"), _floats(group, "mean_risk"), label=f"{sweep}={value}")
    if spec.bayes_error is not None:
        ax.axhline(spec.bayes_error, color="black", linestyle=":", label="Bayes error")
    ax.set_xscale(spec.x_scale)
    ax.set_yscale(spec.y_scale)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean excess risk")
    ax.legend(fontsize=7)


def _render_tradeoff(spec: FigureSpec, fig):
    axes = fig.subplots(1, len(spec.inputs), squeeze=False)[0]
    for ax, path in zip(axes, spec.inputs):
        rows = _read_table(path, required=["beta_tr", "empirical_mean"])
        beta = _floats(rows, "beta_tr")
        ax.plot(beta, _floats(rows, "empirical_mean"), marker="o", markersize=3, label="mean risk")
        uppers = [r.get("upper", "") for r in rows]
        if any(u != "" for u in uppers):
            pts = [(b, float(u)) for b, u in zip(beta, uppers) if u != ""]
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, linestyle="--", label="upper bound")
        ax.set_xscale("linear")
        ax.set_yscale(spec.y_scale)
        ax.set_xlabel("beta_tr")
        ax.set_title(Path(path).stem.replace("tradeoff_", ""), fontsize=8)
        ax.legend(fontsize=7)
    axes[0].set_ylabel("final excess risk")


def _render_stopping(spec: FigureSpec, fig):
    path = spec.inputs[0]
    rows = _read_table(path, required=["beta_tr", "t", "mean_risk", "mean_train_loss"])
    markers = None
    if len(spec.inputs) > 1:
        markers = _read_table(spec.inputs[1], required=["beta_tr", "epsilon", "t_eps"])
    ax_train, ax_test = fig.subplots(1, 2)
    for value, group in _group_by(rows, "beta_tr").items():
        t = _floats(group, "t")
        ax_train.plot(t, _floats(group, "mean_train_loss"), label=f"beta_tr={value}")
        ax_test.plot(t, _floats(group, "mean_risk"), label=f"beta_tr={value}")
    if markers:
        for row in markers:
            if row["t_eps"] in ("", "None"):
                continue
            ax_test.plot(
                [float(row["t_eps"])], [float(row["epsilon"])],
                marker="v", color="black", markersize=5,
            )
    if spec.bayes_error is not None:
        ax_test.axhline(spec.bayes_error, color="black", linestyle=":")
    for ax, ylabel in ((ax_train, "mean training loss"), (ax_test, "mean excess risk")):
        ax.set_xscale(spec.x_scale)
        ax.set_yscale(spec.y_scale)
        ax.set_xlabel("iteration")
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=7)


_RENDERERS = {
    "curves": _render_curves,
    "tradeoff": _render_tradeoff,
    "stopping": _render_stopping,
}


def render(spec: FigureSpec) -> Path:
    """Render the figure described by spec; returns the written image path."""
    widths = {"curves": 5.0, "tradeoff": 3.4 * len(spec.inputs), "stopping": 9.0}
    with plt.rc_context(_STYLE):
        fig = plt.figure(figsize=(widths[spec.kind], 3.4))
        try:
            _RENDERERS[spec.kind](spec, fig)
            if spec.title:
                fig.suptitle(spec.title, fontsize=10)
            fig.tight_layout()
            out = Path(spec.output)
            out.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(out, format="png", metadata=dict(_PNG_METADATA))
        finally:
            plt.close(fig)
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="meta-risk-plots",
        description="Render figures from meta-risk-lab CSV outputs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_render = sub.add_parser("render", help="render one figure from a JSON spec")
    p_render.add_argument("--spec", required=True, help="figure spec JSON file")
    args = parser.parse_args(argv)

    try:
        spec = FigureSpec.from_json_file(args.spec)
        out = render(spec)
    except (RenderError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
