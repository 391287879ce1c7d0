"""Command-line entry point: synth, run, ablate and eval subcommands.

Exit codes are a stable contract: 0 success, 2 configuration error,
3 runtime failure. Relative --out paths are resolved under the ASYMCT_OUT
environment variable when it is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from asymct.config import PIPELINES, RunSettings, benchmark_settings, load_settings
from asymct.datasynth import generate_domain_pair, load_dataset, load_split, save_dataset, save_split, split_query_gallery
from asymct.encoder import forward, l2_normalize, load_checkpoint
from asymct.evaluation import map_and_cmc
from asymct.pipeline import run_ablation, run_pipeline, write_manifest

logger = logging.getLogger("asymct")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _resolve_out(raw: str) -> Path:
    path = Path(raw)
    if path.is_absolute():
        return path
    root = os.environ.get("ASYMCT_OUT")
    return (Path(root) / path) if root else path


def _load_base_settings(args: argparse.Namespace) -> RunSettings:
    if getattr(args, "config", None):
        return load_settings(args.config)
    return benchmark_settings()


def _apply_overrides(settings: RunSettings, args: argparse.Namespace) -> RunSettings:
    adapt = settings.adapt
    stage_overrides = {
        name: getattr(args, name)
        for name in ("e1", "e2", "e3", "r2", "r3")
        if getattr(args, name, None) is not None
    }
    if stage_overrides:
        adapt = replace(adapt, **stage_overrides)
    cluster = adapt.cluster
    if getattr(args, "backend", None):
        cluster = replace(cluster, backend=args.backend)
    if getattr(args, "outlier_frac", None) is not None:
        cluster = replace(cluster, outlier_frac=args.outlier_frac)
    if getattr(args, "rho", None) is not None:
        cluster = replace(cluster, rho=args.rho)
    if getattr(args, "k", None) is not None:
        adapt = replace(adapt, metric=replace(adapt.metric, k=args.k))
    adapt = replace(adapt, cluster=cluster)
    return replace(settings, adapt=adapt)


def cmd_synth(args: argparse.Namespace) -> int:
    settings = _load_base_settings(args)
    synth = settings.synth
    if args.seed is not None:
        synth = replace(synth, seed=args.seed)
    out = _resolve_out(args.out)
    source, target = generate_domain_pair(synth)
    split = split_query_gallery(target, settings.queries_per_identity, seed=synth.seed)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out, source, target, synth)
    save_split(out / "eval_split.json", split, settings.queries_per_identity, synth.seed)
    logger.info("wrote dataset (%d source, %d target) to %s", source.n, target.n, out)
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    settings = _apply_overrides(_load_base_settings(args), args)
    settings.validate()
    data = Path(args.data)
    source, target, _ = load_dataset(data)
    split = load_split(data / "eval_split.json")
    out = _resolve_out(args.out)
    try:
        summary = run_pipeline(source, target, split, settings, args.pipeline, args.seed, out)
    except Exception as exc:  # runtime failure: flag the partial run
        write_manifest(
            out, settings, {"pipeline": args.pipeline, "seed": args.seed}, {},
            complete=False, error=str(exc),
        )
        logger.error("run failed: %s", exc)
        return EXIT_RUNTIME
    logger.info(
        "pipeline=%s seed=%d map=%.4f rank1=%.4f",
        args.pipeline, args.seed, summary["map"], summary["rank1"],
    )
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    settings = _apply_overrides(_load_base_settings(args), args)
    settings.validate()
    data = Path(args.data)
    source, target, _ = load_dataset(data)
    split = load_split(data / "eval_split.json")
    seeds = [int(s) for s in args.seeds.split(",")]
    out = _resolve_out(args.out)
    try:
        rows = run_ablation(source, target, split, settings, seeds, out)
    except Exception as exc:
        logger.error("ablation failed: %s", exc)
        return EXIT_RUNTIME
    logger.info("wrote %d ablation rows to %s", len(rows), out / "ablation.csv")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    data = Path(args.data)
    _, target, _ = load_dataset(data)
    split = load_split(data / "eval_split.json")
    params = load_checkpoint(args.checkpoint)
    emb = l2_normalize(forward(params, target.features))
    q, g = split.query_indices, split.gallery_indices
    ids = target.ground_truth_identity()
    cams = target.camera
    try:
        res = map_and_cmc(emb[q], emb[g], ids[q], ids[g], cams[q], cams[g])
    except Exception as exc:
        logger.error("evaluation failed: %s", exc)
        return EXIT_RUNTIME
    payload = {"map": res.map, "rank1": res.rank1, "cmc": res.cmc.tolist(), "n_skipped": res.n_skipped}
    if args.out:
        out = _resolve_out(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    else:
        json.dump(payload, sys.stdout, indent=2)
        sys.stdout.write("\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asymct",
        description="Asymmetric co-teaching pipeline on synthetic two-domain identity data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a two-domain dataset with an eval split")
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--config", help="config file (sectioned key/value)")
    p_synth.add_argument("--seed", type=int, help="override the dataset seed")
    p_synth.set_defaults(func=cmd_synth)

    p_run = sub.add_parser("run", help="run one pipeline variant end to end")
    p_run.add_argument("--data", required=True, help="directory produced by synth")
    p_run.add_argument("--out", required=True, help="output directory for run artifacts")
    p_run.add_argument("--pipeline", required=True, choices=PIPELINES)
    p_run.add_argument("--seed", type=int, default=0, help="training seed")
    p_run.add_argument("--config", help="config file")
    for name in ("e1", "e2", "e3", "r2", "r3"):
        p_run.add_argument(f"--{name}", type=int, default=None)
    p_run.add_argument("--backend", choices=("dbscan", "kmeans"), default=None)
    p_run.add_argument("--outlier-frac", dest="outlier_frac", type=float, default=None)
    p_run.add_argument("--rho", type=float, default=None)
    p_run.add_argument("--k", type=int, default=None)
    p_run.set_defaults(func=cmd_run)

    p_ablate = sub.add_parser("ablate", help="run every ablation pipeline over several seeds")
    p_ablate.add_argument("--data", required=True)
    p_ablate.add_argument("--out", required=True)
    p_ablate.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    p_ablate.add_argument("--config", help="config file")
    for name in ("e1", "e2", "e3", "r2", "r3"):
        p_ablate.add_argument(f"--{name}", type=int, default=None)
    p_ablate.set_defaults(func=cmd_ablate)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's eval split")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--out", help="metrics JSON path (stdout when omitted)")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
