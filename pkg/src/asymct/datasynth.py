"""Synthetic two-domain identity datasets with controllable shift and corruption.

Identities live as well-separated Gaussian means on a sphere; the target
domain is produced by pushing fresh draws from its own identity means through
a fixed random affine map (rotation + scaling + translation) whose magnitude
is controlled by ``shift_scale``. A configurable fraction of target samples
receives additional large-variance noise and plays the role of hard samples.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

SOURCE = "source"
TARGET = "target"

# Identity means sit on a sphere of radius max(_MIN_RADIUS, ratio * noise_sigma)
# so cluster cores stay separated from per-sample noise.
_RADIUS_NOISE_RATIO = 12.0
_MIN_RADIUS = 1.0
# Corrupted target samples receive additional large-variance noise biased by
# one of a handful of dataset-level factor offsets: hard samples share
# systematic factors (as occlusions or bad cameras would), which displace them
# far outside every cluster core while keeping their nearest clean neighbor
# mostly identity-preserving. A heavy tail additionally gets large isotropic
# noise, scrambling its neighborhoods entirely.
_CORRUPT_N_FACTORS = 5
_CORRUPT_OFFSET_RATIO = 11.0  # norm of each factor offset, relative to noise_sigma
_CORRUPT_JITTER_RATIO = 1.0  # isotropic spread around the offset
_CORRUPT_TAIL_RATIO = 10.0  # extra isotropic sigma for tail samples
_CORRUPT_TAIL_FRAC = 0.15
# Relative strength of the rotation / log-scale / translation parts of the
# domain map at shift_scale = 1.
_ROTATION_RATE = 0.5
_LOG_SCALE_RATE = 0.2
_TRANSLATE_RATE = 0.5


class LabelAccessError(RuntimeError):
    """Ground-truth identities were read from a label-locked feature set."""


@dataclass(frozen=True)
class SynthConfig:
    n_identities_source: int = 50
    n_identities_target: int = 50
    samples_per_identity: int = 10
    dim: int = 16
    n_cameras: int = 6
    shift_scale: float = 1.0
    corrupt_frac: float = 0.15
    noise_sigma: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        counts = {
            "n_identities_source": self.n_identities_source,
            "n_identities_target": self.n_identities_target,
            "samples_per_identity": self.samples_per_identity,
            "dim": self.dim,
            "n_cameras": self.n_cameras,
        }
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a count >= 1, got {value!r}")
        if not 0.0 <= self.corrupt_frac <= 1.0:
            raise ValueError(f"corrupt_frac must lie in [0, 1], got {self.corrupt_frac!r}")
        if self.shift_scale < 0:
            raise ValueError(f"shift_scale must be nonnegative, got {self.shift_scale!r}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be nonnegative, got {self.noise_sigma!r}")


class FeatureSet:
    """Feature matrix with per-sample identity, camera and domain tags.

    Ground-truth identities are retained for evaluation only. A feature set
    can be label-locked (``hidden_labels``); training code that touches
    ``identity`` on a locked set raises :class:`LabelAccessError`, while
    evaluation code uses :meth:`ground_truth_identity` explicitly.
    """

    def __init__(
        self,
        features: np.ndarray,
        identity: np.ndarray,
        camera: np.ndarray,
        domain: np.ndarray,
        corrupted: np.ndarray | None = None,
        labels_visible: bool = True,
    ) -> None:
        features = np.asarray(features, dtype=np.float64)
        identity = np.asarray(identity, dtype=np.int64)
        camera = np.asarray(camera, dtype=np.int64)
        domain = np.asarray(domain)
        if features.ndim != 2:
            raise ValueError("features must be a 2-d matrix")
        n = features.shape[0]
        if identity.shape != (n,) or camera.shape != (n,) or domain.shape != (n,):
            raise ValueError("identity/camera/domain must be 1-d arrays matching features")
        if not np.all(np.isfinite(features)):
            raise ValueError("features contain non-finite entries")
        if np.any(identity < 0) or np.any(camera < 0):
            raise ValueError("identity and camera ids must be nonnegative")
        bad = set(np.unique(domain)) - {SOURCE, TARGET}
        if bad:
            raise ValueError(f"unknown domain tags: {sorted(bad)}")
        if corrupted is not None:
            corrupted = np.asarray(corrupted, dtype=bool)
            if corrupted.shape != (n,):
                raise ValueError("corrupted mask must match the number of samples")
        self.features = features
        self._identity = identity
        self.camera = camera
        self.domain = domain
        self.corrupted = corrupted
        self.labels_visible = labels_visible

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def identity(self) -> np.ndarray:
        if not self.labels_visible:
            raise LabelAccessError(
                "identities on this feature set are hidden; training code must "
                "not read ground truth (use ground_truth_identity() in "
                "evaluation code only)"
            )
        return self._identity

    def ground_truth_identity(self) -> np.ndarray:
        """Evaluation-only accessor that bypasses the label lock."""
        return self._identity

    def hidden_labels(self) -> "FeatureSet":
        """A view of this set with ground-truth identities locked."""
        return FeatureSet(
            self.features, self._identity, self.camera, self.domain,
            corrupted=self.corrupted, labels_visible=False,
        )

    def subset(self, indices: np.ndarray) -> "FeatureSet":
        indices = np.asarray(indices, dtype=np.int64)
        return FeatureSet(
            self.features[indices],
            self._identity[indices],
            self.camera[indices],
            self.domain[indices],
            corrupted=None if self.corrupted is None else self.corrupted[indices],
            labels_visible=self.labels_visible,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureSet):
            return NotImplemented
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self._identity, other._identity)
            and np.array_equal(self.camera, other.camera)
            and np.array_equal(self.domain, other.domain)
        )

    def __repr__(self) -> str:
        doms = ",".join(sorted(set(self.domain.tolist())))
        return f"FeatureSet(n={self.n}, dim={self.dim}, domains={doms})"


@dataclass(frozen=True)
class EvalSplit:
    """Query/gallery index lists into one feature set."""

    query_indices: np.ndarray
    gallery_indices: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.query_indices, dtype=np.int64)
        g = np.asarray(self.gallery_indices, dtype=np.int64)
        object.__setattr__(self, "query_indices", q)
        object.__setattr__(self, "gallery_indices", g)
        if np.intersect1d(q, g).size:
            raise ValueError("query and gallery indices must be disjoint")


def _identity_means(rng: np.random.Generator, n_ids: int, dim: int, radius: float) -> np.ndarray:
    raw = rng.standard_normal((n_ids, dim))
    norms = np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-12)
    return radius * raw / norms


def _domain_map(
    rng: np.random.Generator, dim: int, shift_scale: float, radius: float
) -> tuple[np.ndarray, np.ndarray]:
    """Random rotation + scaling + translation; exactly the identity at shift 0.

    The rotation is a Cayley transform of a scaled skew-symmetric matrix, so
    it is orthogonal for every shift_scale and equals I when shift_scale = 0.
    """
    g = rng.standard_normal((dim, dim))
    skew = (g - g.T) / (2.0 * np.sqrt(dim))
    a = shift_scale * _ROTATION_RATE * skew
    eye = np.eye(dim)
    rot = np.linalg.solve(eye - a, eye + a)
    log_scale = float(rng.standard_normal())
    scale = float(np.exp(_LOG_SCALE_RATE * shift_scale * log_scale))
    direction = rng.standard_normal(dim)
    direction /= max(np.linalg.norm(direction), 1e-12)
    offset = _TRANSLATE_RATE * shift_scale * radius * direction
    return scale * rot, offset


def mean_radius(noise_sigma: float) -> float:
    return max(_MIN_RADIUS, _RADIUS_NOISE_RATIO * noise_sigma)


def generate_domain_pair(cfg: SynthConfig) -> tuple[FeatureSet, FeatureSet]:
    """Generate a labeled source set and a shifted target set.

    Source and target identity id spaces are disjoint. Everything is a pure
    function of the config (bit-identical outputs for equal configs).
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    radius = mean_radius(cfg.noise_sigma)
    n_src, n_tgt = cfg.n_identities_source, cfg.n_identities_target
    spi, dim = cfg.samples_per_identity, cfg.dim

    means = _identity_means(rng, n_src + n_tgt, dim, radius)

    src_ids = np.repeat(np.arange(n_src), spi)
    src_feats = means[src_ids] + cfg.noise_sigma * rng.standard_normal((src_ids.size, dim))
    src_cams = rng.integers(0, cfg.n_cameras, size=src_ids.size)

    tgt_ids = np.repeat(np.arange(n_src, n_src + n_tgt), spi)
    clean = means[tgt_ids] + cfg.noise_sigma * rng.standard_normal((tgt_ids.size, dim))
    amat, offset = _domain_map(rng, dim, cfg.shift_scale, radius)
    tgt_feats = clean @ amat.T + offset

    n_corrupt = int(round(cfg.corrupt_frac * tgt_ids.size))
    corrupted = np.zeros(tgt_ids.size, dtype=bool)
    if n_corrupt:
        picked = rng.choice(tgt_ids.size, size=n_corrupt, replace=False)
        corrupted[picked] = True
        sigma = cfg.noise_sigma if cfg.noise_sigma > 0 else radius / _RADIUS_NOISE_RATIO
        directions = rng.standard_normal((_CORRUPT_N_FACTORS, dim))
        directions /= np.maximum(np.linalg.norm(directions, axis=1, keepdims=True), 1e-12)
        offsets = _CORRUPT_OFFSET_RATIO * sigma * directions
        factor = rng.integers(0, _CORRUPT_N_FACTORS, size=n_corrupt)
        extra = offsets[factor] + _CORRUPT_JITTER_RATIO * sigma * rng.standard_normal((n_corrupt, dim))
        tail = rng.random(n_corrupt) < _CORRUPT_TAIL_FRAC
        extra[tail] += _CORRUPT_TAIL_RATIO * sigma * rng.standard_normal((int(tail.sum()), dim))
        tgt_feats[picked] += extra
    tgt_cams = rng.integers(0, cfg.n_cameras, size=tgt_ids.size)

    source = FeatureSet(
        src_feats, src_ids, src_cams, np.full(src_ids.size, SOURCE), corrupted=None
    )
    target = FeatureSet(
        tgt_feats, tgt_ids, tgt_cams, np.full(tgt_ids.size, TARGET), corrupted=corrupted
    )
    return source, target


def split_query_gallery(fset: FeatureSet, queries_per_identity: int, seed: int) -> EvalSplit:
    """Per identity, pick queries and leave the rest as gallery.

    Guarantees every query identity a cross-camera gallery match: when the
    gallery keeps at least two samples, two samples with distinct cameras are
    pinned to it; a single-sample gallery must differ in camera from every
    query. Identities that cannot satisfy this are rejected by name.
    """
    if queries_per_identity < 1:
        raise ValueError("queries_per_identity must be >= 1")
    rng = np.random.default_rng([seed, 5])
    ids = fset.ground_truth_identity()
    cams = fset.camera
    queries: list[int] = []
    gallery: list[int] = []
    for ident in np.unique(ids):
        idx = np.flatnonzero(ids == ident)
        if idx.size <= queries_per_identity:
            raise ValueError(
                f"identity {int(ident)} has only {idx.size} samples; "
                f"needs more than {queries_per_identity}"
            )
        id_cams = cams[idx]
        distinct = np.unique(id_cams)
        gallery_size = idx.size - queries_per_identity
        if distinct.size < 2:
            raise ValueError(
                f"identity {int(ident)} has all samples on camera "
                f"{int(distinct[0])}; no cross-camera match is possible"
            )
        if gallery_size >= 2:
            first_cam = id_cams[0]
            pin_a = idx[0]
            pin_b = idx[np.flatnonzero(id_cams != first_cam)[0]]
            rest = np.setdiff1d(idx, [pin_a, pin_b])
            chosen = rng.choice(rest, size=queries_per_identity, replace=False)
            q_set = set(chosen.tolist())
        else:
            # Single gallery sample: its camera must differ from all others.
            candidates = [
                int(i) for pos, i in enumerate(idx)
                if all(id_cams[other] != id_cams[pos] for other in range(idx.size) if other != pos)
            ]
            if not candidates:
                raise ValueError(
                    f"identity {int(ident)}: no single-sample gallery can "
                    "cover every query camera"
                )
            keep = int(rng.choice(np.asarray(candidates)))
            q_set = set(int(i) for i in idx if int(i) != keep)
        for i in idx:
            if int(i) in q_set:
                queries.append(int(i))
            else:
                gallery.append(int(i))
    return EvalSplit(np.sort(queries), np.sort(gallery))


def _float_cell(x: float) -> str:
    return repr(float(x))


def save_dataset(out_dir: str | Path, source: FeatureSet, target: FeatureSet, cfg: SynthConfig) -> None:
    """Write dataset.csv (both domains) and a JSON sidecar with the config.

    The sidecar also records which target rows were corrupted; that mask is
    evaluation-only metadata and is not part of the CSV schema.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dim = source.dim
    header = ["domain", "identity", "camera"] + [f"f_{i}" for i in range(dim)]
    with open(out / "dataset.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for fset in (source, target):
            ids = fset.ground_truth_identity()
            for row in range(fset.n):
                writer.writerow(
                    [fset.domain[row], int(ids[row]), int(fset.camera[row])]
                    + [_float_cell(v) for v in fset.features[row]]
                )
    sidecar = {
        "config": asdict(cfg),
        "corrupted_target_indices": (
            [] if target.corrupted is None else np.flatnonzero(target.corrupted).tolist()
        ),
    }
    with open(out / "synth_config.json", "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")


def load_dataset(data_dir: str | Path) -> tuple[FeatureSet, FeatureSet, SynthConfig]:
    data = Path(data_dir)
    with open(data / "synth_config.json") as fh:
        sidecar = json.load(fh)
    cfg = SynthConfig(**sidecar["config"])
    rows = {SOURCE: [], TARGET: []}
    with open(data / "dataset.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 3
        for rec in reader:
            rows[rec[0]].append((int(rec[1]), int(rec[2]), [float(v) for v in rec[3 : 3 + dim]]))

    def build(domain: str, corrupted: np.ndarray | None) -> FeatureSet:
        recs = rows[domain]
        feats = np.array([r[2] for r in recs], dtype=np.float64)
        ids = np.array([r[0] for r in recs], dtype=np.int64)
        cams = np.array([r[1] for r in recs], dtype=np.int64)
        return FeatureSet(feats, ids, cams, np.full(len(recs), domain), corrupted=corrupted)

    n_tgt = len(rows[TARGET])
    mask = np.zeros(n_tgt, dtype=bool)
    mask[np.asarray(sidecar.get("corrupted_target_indices", []), dtype=int)] = True
    return build(SOURCE, None), build(TARGET, mask), cfg


def save_split(path: str | Path, split: EvalSplit, queries_per_identity: int, seed: int) -> None:
    payload = {
        "query_indices": split.query_indices.tolist(),
        "gallery_indices": split.gallery_indices.tolist(),
        "queries_per_identity": queries_per_identity,
        "seed": seed,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_split(path: str | Path) -> EvalSplit:
    with open(path) as fh:
        payload = json.load(fh)
    return EvalSplit(
        np.asarray(payload["query_indices"], dtype=np.int64),
        np.asarray(payload["gallery_indices"], dtype=np.int64),
    )
