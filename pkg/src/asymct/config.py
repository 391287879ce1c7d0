"""Run settings: one sectioned key/value config file drives every command.

The builtin defaults are the bundled desk-scale benchmark; a config file and
then command-line flags override them in that order. The fully resolved
snapshot is embedded in each run's manifest.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from asymct.adapt import AdaptConfig
from asymct.cluster import ClusterConfig
from asymct.datasynth import SynthConfig
from asymct.encoder import TrainConfig
from asymct.metric import MetricConfig

PIPELINES = ("direct", "theory", "theory_plus_to", "ct", "ct_plus_to", "act")


@dataclass(frozen=True)
class RunSettings:
    synth: SynthConfig
    queries_per_identity: int
    adapt: AdaptConfig

    def validate(self) -> None:
        self.synth.validate()
        if self.queries_per_identity < 1:
            raise ValueError("queries_per_identity must be >= 1")
        self.adapt.validate()


def benchmark_settings() -> RunSettings:
    """Desk-scale benchmark: the full ablation finishes in minutes on one core."""
    return RunSettings(
        synth=SynthConfig(
            n_identities_source=50,
            n_identities_target=50,
            samples_per_identity=10,
            dim=16,
            n_cameras=6,
            shift_scale=1.1,
            corrupt_frac=0.15,
            noise_sigma=0.5,
            seed=0,
        ),
        queries_per_identity=2,
        adapt=AdaptConfig(
            e1=30,
            e2=5,
            e3=10,
            r2=8,
            r3=5,
            metric=MetricConfig(k=12, lam=0.1),
            cluster=ClusterConfig(min_pts=4, rho=0.02, backend="dbscan", k_means_k=50, outlier_frac=0.2),
            # Learning rates are scaled up from the reference settings: this
            # encoder trains from scratch in a few hundred steps rather than
            # fine-tuning a pretrained backbone.
            train=TrainConfig(
                margin=0.3,
                p_identities=16,
                k_instances=4,
                lr_source=3e-3,
                lr_adapt=7e-4,
                lr_coteach=3e-4,
                embedding_dim=32,
                hidden_dim=64,
                seed=0,
            ),
        ),
    )


_SECTION_FIELDS = {
    "synth": [
        ("n_identities_source", int),
        ("n_identities_target", int),
        ("samples_per_identity", int),
        ("dim", int),
        ("n_cameras", int),
        ("shift_scale", float),
        ("corrupt_frac", float),
        ("noise_sigma", float),
        ("seed", int),
    ],
    "split": [("queries_per_identity", int)],
    "metric": [("k", int), ("lambda", float)],
    "cluster": [
        ("min_pts", int),
        ("rho", float),
        ("backend", str),
        ("k_means_k", int),
        ("outlier_frac", float),
        ("eps_abs", float),
    ],
    "train": [
        ("margin", float),
        ("p_identities", int),
        ("k_instances", int),
        ("lr_source", float),
        ("lr_adapt", float),
        ("lr_coteach", float),
        ("embedding_dim", int),
        ("hidden_dim", int),
        ("seed", int),
    ],
    "stages": [("e1", int), ("e2", int), ("e3", int), ("r2", int), ("r3", int)],
}


def load_settings(path: str | Path, base: RunSettings | None = None) -> RunSettings:
    """Read a sectioned config file on top of the given (or benchmark) defaults."""
    settings = base if base is not None else benchmark_settings()
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ValueError(f"config file not found or unreadable: {path}")
    unknown = set(parser.sections()) - set(_SECTION_FIELDS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")

    def collect(section: str) -> dict:
        out: dict = {}
        if not parser.has_section(section):
            return out
        known = dict(_SECTION_FIELDS[section])
        for key, raw in parser.items(section):
            if key not in known:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            if section == "cluster" and key == "eps_abs" and raw.strip().lower() in ("", "none"):
                out[key] = None
            else:
                out[key] = known[key](raw)
        return out

    synth = replace(settings.synth, **collect("synth"))
    split = collect("split")
    qpi = split.get("queries_per_identity", settings.queries_per_identity)
    metric_raw = collect("metric")
    if "lambda" in metric_raw:
        metric_raw["lam"] = metric_raw.pop("lambda")
    metric = replace(settings.adapt.metric, **metric_raw)
    cluster = replace(settings.adapt.cluster, **collect("cluster"))
    train = replace(settings.adapt.train, **collect("train"))
    stages = collect("stages")
    adapt = replace(settings.adapt, metric=metric, cluster=cluster, train=train, **stages)
    out = RunSettings(synth=synth, queries_per_identity=qpi, adapt=adapt)
    out.validate()
    return out


def settings_snapshot(settings: RunSettings) -> dict:
    """JSON-ready dict of the fully resolved settings."""
    return {
        "synth": asdict(settings.synth),
        "split": {"queries_per_identity": settings.queries_per_identity},
        "metric": asdict(settings.adapt.metric),
        "cluster": asdict(settings.adapt.cluster),
        "train": asdict(settings.adapt.train),
        "stages": {
            "e1": settings.adapt.e1,
            "e2": settings.adapt.e2,
            "e3": settings.adapt.e3,
            "r2": settings.adapt.r2,
            "r3": settings.adapt.r3,
        },
    }


def write_settings(path: str | Path, settings: RunSettings) -> None:
    """Write the settings as a config file (the inverse of load_settings)."""
    snap = settings_snapshot(settings)
    parser = configparser.ConfigParser()
    for section, fields in _SECTION_FIELDS.items():
        parser.add_section(section)
        values = snap[section if section != "split" else "split"]
        for key, _ in fields:
            attr = "lam" if key == "lambda" else key
            if attr not in values:
                continue
            value = values[attr]
            if value is None:
                parser.set(section, key, "none")
            else:
                parser.set(section, key, repr(value) if isinstance(value, float) else str(value))
    with open(path, "w") as fh:
        parser.write(fh)
