"""End-to-end pipeline execution and run artifacts.

A run executes stage 1 (source training), stage 2 (clustering-based
adaptation, skipped for direct transfer) and one stage-3 variant, then
evaluates the final model on the target query/gallery split. All metrics
files are plain CSV/JSON with stable formatting so identical configs and
seeds reproduce them byte for byte.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from asymct.adapt import AdaptConfig, RoundRecord, adapt_stage2, train_source
from asymct.coteach import ActRecord, TraceEvent, run_act, run_ct, run_merge_outliers
from asymct.config import PIPELINES, RunSettings, settings_snapshot
from asymct.datasynth import EvalSplit, FeatureSet
from asymct.encoder import EncoderParams, forward, l2_normalize, save_checkpoint
from asymct.evaluation import map_and_cmc, pairwise_f_score

ROUND_HEADER = ["round", "f_score", "n_outliers", "n_clusters", "map", "rank1"]
ACT_HEADER = ["round", "model", "map", "rank1", "f_score", "n_outliers"]
TRACE_HEADER = ["round", "epoch", "iter", "parity", "n_selected", "threshold_loss"]


def build_evaluator(target: FeatureSet, split: EvalSplit):
    """Evaluation closure owning the ground truth; training code never sees it."""
    truth = target.ground_truth_identity()
    cams = target.camera
    q, g = split.query_indices, split.gallery_indices

    def evaluate(params: EncoderParams, pseudo_labels: np.ndarray | None = None) -> dict:
        emb = l2_normalize(forward(params, target.features))
        res = map_and_cmc(emb[q], emb[g], truth[q], truth[g], cams[q], cams[g])
        out = {"map": res.map, "rank1": res.rank1}
        if pseudo_labels is not None:
            out["f_score"] = pairwise_f_score(pseudo_labels, truth)
        return out

    return evaluate


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_round_records(path: Path, records: list[RoundRecord]) -> None:
    _write_csv(
        path,
        ROUND_HEADER,
        [[r.round, r.f_score, r.n_outliers, r.n_clusters, r.map, r.rank1] for r in records],
    )


def write_act_records(path: Path, records: list[ActRecord]) -> None:
    _write_csv(
        path,
        ACT_HEADER,
        [[r.round, r.model, r.map, r.rank1, r.f_score, r.n_outliers] for r in records],
    )


def write_selection_trace(path: Path, trace: list[TraceEvent]) -> None:
    _write_csv(
        path,
        TRACE_HEADER,
        [[t.round, t.epoch, t.iteration, t.parity, t.n_selected, t.threshold_loss] for t in trace],
    )


def _stage2_settings(adapt_cfg: AdaptConfig) -> AdaptConfig:
    # Plain k-means adaptation pseudo-labels every sample; the outlier trick
    # only applies to the co-teaching stage.
    if adapt_cfg.cluster.backend == "kmeans":
        return replace(adapt_cfg, cluster=replace(adapt_cfg.cluster, outlier_frac=0.0))
    return adapt_cfg


def run_pipeline(
    source: FeatureSet,
    target: FeatureSet,
    split: EvalSplit,
    settings: RunSettings,
    pipeline: str,
    seed: int,
    out_dir: str | Path | None = None,
) -> dict:
    """Execute one pipeline variant and (optionally) write its artifacts.

    The target set is label-locked before any training stage; only the
    evaluator closure reads ground truth.
    """
    if pipeline not in PIPELINES:
        raise ValueError(f"unknown pipeline {pipeline!r}; expected one of {PIPELINES}")
    settings.validate()
    adapt_cfg = replace(settings.adapt, train=replace(settings.adapt.train, seed=seed))
    evaluator = build_evaluator(target, split)
    locked = target.hidden_labels()

    timings: dict[str, float] = {}
    checkpoints: dict[str, EncoderParams] = {}
    t0 = time.perf_counter()
    m_src = train_source(source, adapt_cfg)
    timings["stage1_s"] = time.perf_counter() - t0
    checkpoints["m_src"] = m_src

    round_records: list[RoundRecord] = []
    act_records: list[ActRecord] = []
    trace: list[TraceEvent] = []
    final = m_src
    if pipeline != "direct":
        t0 = time.perf_counter()
        m_ada, round_records = adapt_stage2(
            m_src, locked, source, _stage2_settings(adapt_cfg), evaluator
        )
        timings["stage2_s"] = time.perf_counter() - t0
        checkpoints["m_ada"] = m_ada
        final = m_ada
        t0 = time.perf_counter()
        if pipeline == "act":
            final, act_records, trace = run_act(m_ada, locked, source, adapt_cfg, evaluator)
        elif pipeline == "ct":
            final, act_records, trace = run_ct(
                m_ada, locked, source, adapt_cfg, include_outliers=False, evaluator=evaluator
            )
        elif pipeline == "ct_plus_to":
            final, act_records, trace = run_ct(
                m_ada, locked, source, adapt_cfg, include_outliers=True, evaluator=evaluator
            )
        elif pipeline == "theory_plus_to":
            final, act_records, trace = run_merge_outliers(
                m_ada, locked, source, adapt_cfg, evaluator
            )
        timings["stage3_s"] = time.perf_counter() - t0
    checkpoints["m_final"] = final

    metrics = evaluator(final, None)
    summary = {
        "pipeline": pipeline,
        "seed": seed,
        "map": metrics["map"],
        "rank1": metrics["rank1"],
        "round_records": round_records,
        "act_records": act_records,
        "trace": trace,
        "timings": timings,
    }
    if out_dir is not None:
        _write_run_artifacts(Path(out_dir), settings, summary, checkpoints)
    return summary


def _write_run_artifacts(
    out: Path, settings: RunSettings, summary: dict, checkpoints: dict[str, EncoderParams]
) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_round_records(out / "round_records.csv", summary["round_records"])
    write_act_records(out / "act_records.csv", summary["act_records"])
    write_selection_trace(out / "selection_trace.csv", summary["trace"])
    with open(out / "metrics.json", "w") as fh:
        json.dump(
            {
                "pipeline": summary["pipeline"],
                "seed": summary["seed"],
                "map": summary["map"],
                "rank1": summary["rank1"],
            },
            fh,
            indent=2,
        )
        fh.write("\n")
    checkpoint_paths = {}
    for name, params in checkpoints.items():
        path = out / f"{name}.npz"
        save_checkpoint(params, path)
        checkpoint_paths[name] = path.name
    write_manifest(out, settings, summary, checkpoint_paths, complete=True)


def write_manifest(
    out: Path,
    settings: RunSettings,
    summary: dict,
    checkpoint_paths: dict[str, str],
    complete: bool,
    error: str | None = None,
) -> None:
    manifest = {
        "pipeline": summary.get("pipeline"),
        "seed": summary.get("seed"),
        "config": settings_snapshot(settings),
        "checkpoints": checkpoint_paths,
        "metrics_files": {
            "round_records": "round_records.csv",
            "act_records": "act_records.csv",
            "selection_trace": "selection_trace.csv",
            "metrics": "metrics.json",
        },
        "timings": summary.get("timings", {}),
        "complete": complete,
    }
    if error is not None:
        manifest["error"] = error
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


ABLATION_HEADER = ["pipeline", "seed", "map", "rank1"]
TABLE2_PIPELINES = ("theory", "theory_plus_to", "ct", "ct_plus_to", "act")
KMEANS_OUTLIER_FRACS = (0.2, 0.3)


def run_ablation(
    source: FeatureSet,
    target: FeatureSet,
    split: EvalSplit,
    settings: RunSettings,
    seeds: list[int],
    out_dir: str | Path,
) -> list[dict]:
    """All stage-3 ablation pipelines plus the k-means backend variants.

    Emits a tidy comparison CSV with one row per (pipeline, seed); per-run
    artifacts land in subdirectories.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []

    def one(name: str, run_settings: RunSettings, pipeline: str, seed: int) -> None:
        run_out = out / f"run_{name}_seed{seed}"
        summary = run_pipeline(source, target, split, run_settings, pipeline, seed, run_out)
        rows.append(
            {"pipeline": name, "seed": seed, "map": summary["map"], "rank1": summary["rank1"]}
        )

    kmeans_base = replace(
        settings,
        adapt=replace(settings.adapt, cluster=replace(settings.adapt.cluster, backend="kmeans")),
    )
    for seed in seeds:
        for pipeline in TABLE2_PIPELINES:
            one(pipeline, settings, pipeline, seed)
        one("kmeans", kmeans_base, "theory", seed)
        for frac in KMEANS_OUTLIER_FRACS:
            variant = replace(
                kmeans_base,
                adapt=replace(
                    kmeans_base.adapt,
                    cluster=replace(kmeans_base.adapt.cluster, outlier_frac=frac),
                ),
            )
            one(f"kmeans_act_u{int(round(frac * 100))}", variant, "act", seed)
    _write_csv(
        out / "ablation.csv",
        ABLATION_HEADER,
        [[r["pipeline"], r["seed"], r["map"], r["rank1"]] for r in rows],
    )
    return rows
