"""Deterministic figure rendering from metrics CSVs.

Same input bytes produce the same image bytes: the style is fixed, no
timestamps or library version tags are embedded, and rows are consumed in
file order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FIGURE_KINDS = ("fscore_curve", "outlier_curve", "model_gap", "ablation_bars")

_REQUIRED_COLUMNS = {
    "fscore_curve": ("round", "f_score"),
    "outlier_curve": ("round", "n_outliers"),
    "model_gap": ("round", "model", "map", "rank1"),
    "ablation_bars": ("pipeline", "seed", "map", "rank1"),
}

_FIGSIZE = (6.0, 4.0)
_DPI = 120
# strip the library tag from the PNG metadata so reruns are byte-identical
_PNG_METADATA = {"Software": None}


class SchemaError(ValueError):
    """The input CSV does not match the documented schema."""


@dataclass(frozen=True)
class PlotSpec:
    kind: str
    input_csv: str | Path
    output_image: str | Path

    def validate(self) -> None:
        if self.kind not in FIGURE_KINDS:
            raise SchemaError(f"unknown figure kind {self.kind!r}; expected one of {FIGURE_KINDS}")
        if not Path(self.input_csv).exists():
            raise SchemaError(f"input CSV not found: {self.input_csv}")


def _read_rows(path: str | Path, required: tuple[str, ...]) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [col for col in required if col not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    return rows


def _main_rows(rows: list[dict]) -> list[dict]:
    # round/outlier curves accept the co-teaching records too; keep one row
    # per round by preferring the main model where a model column exists
    if rows and "model" in rows[0]:
        return [r for r in rows if r["model"] == "main"]
    return rows


def _new_axes():
    fig, ax = plt.subplots(figsize=_FIGSIZE, dpi=_DPI)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _render_fscore(rows: list[dict], ax) -> None:
    rows = _main_rows(rows)
    rounds = [int(r["round"]) for r in rows]
    scores = [float(r["f_score"]) for r in rows]
    ax.plot(rounds, scores, marker="o", color="#1f77b4")
    ax.set_xlabel("round")
    ax.set_ylabel("pairwise F-score")
    ax.set_title("Clustering quality per round")


def _render_outliers(rows: list[dict], ax) -> None:
    rows = _main_rows(rows)
    rounds = [int(r["round"]) for r in rows]
    counts = [int(r["n_outliers"]) for r in rows]
    ax.plot(rounds, counts, marker="s", color="#d62728")
    ax.set_xlabel("round")
    ax.set_ylabel("outlier count")
    ax.set_title("Outlier set size per round")


def _render_model_gap(rows: list[dict], ax) -> None:
    styles = {"main": ("#1f77b4", "o"), "co": ("#ff7f0e", "s")}
    seen = False
    for model, (color, marker) in styles.items():
        model_rows = [r for r in rows if r["model"] == model]
        if not model_rows:
            continue
        seen = True
        rounds = [int(r["round"]) for r in model_rows]
        ax.plot(rounds, [float(r["map"]) for r in model_rows],
                color=color, marker=marker, label=f"{model} mAP")
        ax.plot(rounds, [float(r["rank1"]) for r in model_rows],
                color=color, marker=marker, linestyle="--", alpha=0.6, label=f"{model} rank-1")
    if not seen:
        raise SchemaError("model_gap needs rows with model set to 'main' or 'co'")
    ax.set_xlabel("round")
    ax.set_ylabel("retrieval accuracy")
    ax.set_title("Main vs collaborator")
    ax.legend(fontsize=8)


def _render_ablation(rows: list[dict], ax) -> None:
    by_pipeline: dict[str, list[float]] = {}
    rank1: dict[str, list[float]] = {}
    for r in rows:
        by_pipeline.setdefault(r["pipeline"], []).append(float(r["map"]))
        rank1.setdefault(r["pipeline"], []).append(float(r["rank1"]))
    names = list(by_pipeline)
    med_map = [float(np.median(by_pipeline[n])) for n in names]
    med_r1 = [float(np.median(rank1[n])) for n in names]
    pos = np.arange(len(names))
    width = 0.4
    ax.bar(pos - width / 2, med_map, width, label="median mAP", color="#1f77b4")
    ax.bar(pos + width / 2, med_r1, width, label="median rank-1", color="#ff7f0e")
    ax.set_xticks(pos)
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("retrieval accuracy")
    ax.set_title("Ablation comparison")
    ax.legend(fontsize=8)


_RENDERERS = {
    "fscore_curve": _render_fscore,
    "outlier_curve": _render_outliers,
    "model_gap": _render_model_gap,
    "ablation_bars": _render_ablation,
}


def render(spec: PlotSpec) -> Path:
    """Render one figure; raises SchemaError before writing anything on bad input."""
    spec.validate()
    rows = _read_rows(spec.input_csv, _REQUIRED_COLUMNS[spec.kind])
    fig, ax = _new_axes()
    try:
        _RENDERERS[spec.kind](rows, ax)
        fig.tight_layout()
        out = Path(spec.output_image)
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, format="png", metadata=_PNG_METADATA)
    finally:
        plt.close(fig)
    return Path(spec.output_image)
