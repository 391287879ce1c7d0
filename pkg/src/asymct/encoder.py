"""Small embedding encoder trained with batch-hard triplet loss.

The encoder is a stack of affine layers with optional relu activations plus
an optional linear classifier head used during supervised source training.
Gradients are derived by hand (reverse-mode through the layer stack, with the
mined positive/negative indices of the triplet loss frozen per forward pass)
and applied with a bias-corrected adaptive-moment optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDENTITY = "identity"
RELU = "relu"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class EncoderParams:
    """Affine layer stack (weights, biases), one activation tag per layer."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    activations: list[str]
    classifier: tuple[np.ndarray, np.ndarray] | None = None

    def validate(self) -> None:
        if len(self.layers) != len(self.activations):
            raise ValueError("one activation tag per layer is required")
        if not self.layers:
            raise ValueError("encoder needs at least one layer")
        prev = self.layers[0][0].shape[0]
        for (w, b), act in zip(self.layers, self.activations):
            if act not in (IDENTITY, RELU):
                raise ValueError(f"unknown activation: {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError("layer weight/bias shapes are inconsistent")
            if w.shape[0] != prev:
                raise ValueError("layer shapes do not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("parameters contain non-finite entries")
            prev = w.shape[1]
        if self.classifier is not None:
            wc, bc = self.classifier
            if wc.shape[0] != prev or bc.shape != (wc.shape[1],):
                raise ValueError("classifier head shapes are inconsistent")

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            [(w.copy(), b.copy()) for w, b in self.layers],
            list(self.activations),
            None if self.classifier is None else (self.classifier[0].copy(), self.classifier[1].copy()),
        )

    def without_classifier(self) -> "EncoderParams":
        out = self.copy()
        out.classifier = None
        return out


@dataclass
class ParamGrads:
    """Gradient arrays congruent with EncoderParams."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    classifier: tuple[np.ndarray, np.ndarray] | None = None


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.3
    p_identities: int = 16
    k_instances: int = 4
    lr_source: float = 3e-4
    lr_adapt: float = 6e-5  # clustering-based fine-tuning stage
    lr_coteach: float = 6e-5  # co-teaching stage
    embedding_dim: int = 32
    hidden_dim: int = 0  # 0 means a single linear layer
    seed: int = 0

    @property
    def batch_size(self) -> int:
        return self.p_identities * self.k_instances

    def validate(self) -> None:
        if self.margin < 0:
            raise ValueError(f"margin must be nonnegative, got {self.margin!r}")
        if self.p_identities < 2:
            raise ValueError("p_identities must be >= 2 (negatives need a second identity)")
        if self.k_instances < 1:
            raise ValueError("k_instances must be >= 1")
        if self.lr_source <= 0 or self.lr_adapt <= 0 or self.lr_coteach <= 0:
            raise ValueError("learning rates must be positive")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if self.hidden_dim < 0:
            raise ValueError("hidden_dim must be >= 0")


@dataclass
class BatchLossReport:
    total_loss: float
    per_anchor_losses: np.ndarray


def init_encoder(
    dim_in: int,
    cfg: TrainConfig,
    rng: np.random.Generator,
    n_classes: int | None = None,
) -> EncoderParams:
    """Glorot-normal initialized encoder per the config's architecture."""

    def glorot(n_in: int, n_out: int) -> np.ndarray:
        return rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / (n_in + n_out))

    layers: list[tuple[np.ndarray, np.ndarray]] = []
    activations: list[str] = []
    if cfg.hidden_dim > 0:
        layers.append((glorot(dim_in, cfg.hidden_dim), np.zeros(cfg.hidden_dim)))
        activations.append(RELU)
        layers.append((glorot(cfg.hidden_dim, cfg.embedding_dim), np.zeros(cfg.embedding_dim)))
        activations.append(IDENTITY)
    else:
        layers.append((glorot(dim_in, cfg.embedding_dim), np.zeros(cfg.embedding_dim)))
        activations.append(IDENTITY)
    classifier = None
    if n_classes is not None:
        classifier = (glorot(cfg.embedding_dim, n_classes), np.zeros(n_classes))
    params = EncoderParams(layers, activations, classifier)
    params.validate()
    return params


def _forward_cached(params: EncoderParams, x: np.ndarray) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Forward pass keeping (layer input, pre-activation) pairs for backprop."""
    h = x
    caches = []
    for (w, b), act in zip(params.layers, params.activations):
        z = h @ w + b
        caches.append((h, z))
        h = np.maximum(z, 0.0) if act == RELU else z
    return h, caches


def forward(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    params.validate()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ValueError(
            f"input of shape {x.shape} does not match encoder input dim {params.input_dim}"
        )
    emb, _ = _forward_cached(params, x)
    return emb


def _backprop(
    params: EncoderParams,
    caches: list[tuple[np.ndarray, np.ndarray]],
    d_emb: np.ndarray,
) -> list[tuple[np.ndarray, np.ndarray]]:
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)  # type: ignore[list-item]
    dh = d_emb
    for li in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[li]
        h_in, z = caches[li]
        dz = dh * (z > 0) if params.activations[li] == RELU else dh
        grads[li] = (h_in.T @ dz, dz.sum(axis=0))
        dh = dz @ w.T
    return grads


def l2_normalize(x: np.ndarray) -> np.ndarray:
    """Row-normalize embeddings; zero rows are left untouched."""
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def _pairwise_euclidean(emb: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", emb, emb)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (emb @ emb.T)
    d2 = (d2 + d2.T) / 2.0
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def _mine_batch(
    emb: np.ndarray, labels: np.ndarray, margin: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batch-hard mining: per anchor the farthest positive and nearest negative.

    Returns (losses, positive index, negative index, valid mask); anchors with
    no positive or no negative in the batch are marked invalid and carry zero
    loss. Ties resolve to the lowest index.
    """
    n = emb.shape[0]
    dist = _pairwise_euclidean(emb)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    pos_d = np.where(pos_mask, dist, -np.inf)
    neg_d = np.where(neg_mask, dist, np.inf)
    p_idx = np.argmax(pos_d, axis=1)
    n_idx = np.argmin(neg_d, axis=1)
    rows = np.arange(n)
    losses = np.maximum(0.0, dist[rows, p_idx] - dist[rows, n_idx] + margin)
    losses[~valid] = 0.0
    return losses, p_idx, n_idx, valid


def triplet_loss_batch(emb: np.ndarray, labels: np.ndarray, margin: float) -> BatchLossReport:
    """Batch-hard triplet loss summed over anchors (Euclidean, not squared)."""
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels)
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    if emb.ndim != 2 or emb.shape[0] != labels.shape[0]:
        raise ValueError("embeddings and labels disagree")
    if emb.shape[0] == 0:
        raise ValueError("empty batch")
    losses, _, _, valid = _mine_batch(emb, labels, margin)
    if not np.all(valid):
        bad = np.flatnonzero(~valid)
        raise ValueError(
            f"batch violates the PK structure: anchors {bad.tolist()} lack a "
            "positive or a negative"
        )
    return BatchLossReport(float(losses.sum()), losses)


def _triplet_grad_emb(emb: np.ndarray, labels: np.ndarray, margin: float) -> tuple[float, np.ndarray]:
    """Loss and gradient w.r.t. embeddings, skipping invalid anchors.

    The hinge subgradient at zero is zero, and zero-distance pairs contribute
    no gradient.
    """
    n = emb.shape[0]
    dist = _pairwise_euclidean(emb)
    losses, p_idx, n_idx, valid = _mine_batch(emb, labels, margin)
    d_emb = np.zeros_like(emb)
    active = valid & (losses > 0.0)
    rows = np.flatnonzero(active)
    for a in rows:
        p, q = p_idx[a], n_idx[a]
        d_ap, d_an = dist[a, p], dist[a, q]
        if d_ap > 0.0:
            g = (emb[a] - emb[p]) / d_ap
            d_emb[a] += g
            d_emb[p] -= g
        if d_an > 0.0:
            g = (emb[a] - emb[q]) / d_an
            d_emb[a] -= g
            d_emb[q] += g
    return float(losses.sum()), d_emb


def triplet_loss_and_grad(
    params: EncoderParams,
    x: np.ndarray,
    labels: np.ndarray,
    margin: float,
    normalize: bool = False,
) -> tuple[float, ParamGrads]:
    """Total batch-hard triplet loss and its exact parameter gradient.

    Anchors without an in-batch positive or negative are excluded from the
    loss; mined indices are treated as constants of the forward pass. With
    ``normalize`` the loss acts on row-normalized embeddings (gradients flow
    through the normalization), which pins the margin to the unit sphere
    regardless of how the raw embedding scale drifts during training.
    """
    params.validate()
    emb, caches = _forward_cached(params, np.asarray(x, dtype=np.float64))
    if normalize:
        norms = np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
        unit = emb / norms
        loss, d_unit = _triplet_grad_emb(unit, np.asarray(labels), margin)
        d_emb = (d_unit - unit * np.sum(d_unit * unit, axis=1, keepdims=True)) / norms
    else:
        loss, d_emb = _triplet_grad_emb(emb, np.asarray(labels), margin)
    return loss, ParamGrads(_backprop(params, caches, d_emb))


def grad(params: EncoderParams, x: np.ndarray, labels: np.ndarray, margin: float) -> ParamGrads:
    """Gradient of triplet_loss_batch w.r.t. all encoder parameters."""
    emb = forward(params, x)
    triplet_loss_batch(emb, np.asarray(labels), margin)  # strict PK validation
    _, grads = triplet_loss_and_grad(params, x, labels, margin)
    return grads


def ce_loss_and_grad(
    params: EncoderParams, x: np.ndarray, labels: np.ndarray
) -> tuple[float, ParamGrads]:
    """Softmax cross-entropy (mean over the batch) through the classifier head."""
    params.validate()
    if params.classifier is None:
        raise ValueError("encoder has no classifier head")
    labels = np.asarray(labels, dtype=np.int64)
    wc, bc = params.classifier
    n_classes = wc.shape[1]
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError("labels out of range for the classifier head")
    x = np.asarray(x, dtype=np.float64)
    emb, caches = _forward_cached(params, x)
    logits = emb @ wc + bc
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    b = x.shape[0]
    loss = float(-log_probs[np.arange(b), labels].mean())
    d_logits = np.exp(log_probs)
    d_logits[np.arange(b), labels] -= 1.0
    d_logits /= b
    grads_head = (emb.T @ d_logits, d_logits.sum(axis=0))
    d_emb = d_logits @ wc.T
    return loss, ParamGrads(_backprop(params, caches, d_emb), grads_head)


def add_grads(a: ParamGrads, b: ParamGrads) -> ParamGrads:
    layers = [(wa + wb, ba + bb) for (wa, ba), (wb, bb) in zip(a.layers, b.layers)]
    if a.classifier is None:
        head = b.classifier
    elif b.classifier is None:
        head = a.classifier
    else:
        head = (a.classifier[0] + b.classifier[0], a.classifier[1] + b.classifier[1])
    return ParamGrads(layers, head)


def pk_sample(
    labels: np.ndarray, p_identities: int, k_instances: int, rng: np.random.Generator
) -> np.ndarray:
    """Indices of a P x K batch: P distinct identities, K instances each.

    Identities holding fewer than K samples are drawn with replacement.
    """
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if ids.size < p_identities:
        raise ValueError(
            f"need at least {p_identities} identities, found {ids.size}"
        )
    chosen = rng.choice(ids, size=p_identities, replace=False)
    out: list[np.ndarray] = []
    for ident in chosen:
        idx = np.flatnonzero(labels == ident)
        replace = idx.size < k_instances
        out.append(rng.choice(idx, size=k_instances, replace=replace))
    return np.concatenate(out)


def _flat_params(params: EncoderParams) -> list[np.ndarray]:
    arrays: list[np.ndarray] = []
    for w, b in params.layers:
        arrays.extend((w, b))
    if params.classifier is not None:
        arrays.extend(params.classifier)
    return arrays


def _flat_grads(params: EncoderParams, grads: ParamGrads) -> list[np.ndarray]:
    arrays: list[np.ndarray] = []
    for w, b in grads.layers:
        arrays.extend((w, b))
    if params.classifier is not None:
        if grads.classifier is None:
            arrays.extend((np.zeros_like(params.classifier[0]), np.zeros_like(params.classifier[1])))
        else:
            arrays.extend(grads.classifier)
    return arrays


def _rebuild(params: EncoderParams, arrays: list[np.ndarray]) -> EncoderParams:
    layers = []
    pos = 0
    for _ in params.layers:
        layers.append((arrays[pos], arrays[pos + 1]))
        pos += 2
    head = None
    if params.classifier is not None:
        head = (arrays[pos], arrays[pos + 1])
    return EncoderParams(layers, list(params.activations), head)


@dataclass
class AdamState:
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def initial(cls, params: EncoderParams) -> "AdamState":
        flats = _flat_params(params)
        return cls(0, [np.zeros_like(a) for a in flats], [np.zeros_like(a) for a in flats])


def opt_step(
    state: AdamState, params: EncoderParams, grads: ParamGrads, lr: float
) -> tuple[AdamState, EncoderParams]:
    """One bias-corrected adaptive-moment update; pure function of its inputs."""
    flat_p = _flat_params(params)
    flat_g = _flat_grads(params, grads)
    t = state.t + 1
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(flat_p, flat_g, state.m, state.v):
        m1 = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v1 = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        m_hat = m1 / (1.0 - ADAM_BETA1**t)
        v_hat = v1 / (1.0 - ADAM_BETA2**t)
        new_m.append(m1)
        new_v.append(v1)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS))
    return AdamState(t, new_m, new_v), _rebuild(params, new_p)


CHECKPOINT_VERSION = 1


def save_checkpoint(params: EncoderParams, path: str | Path) -> None:
    params.validate()
    payload: dict[str, np.ndarray] = {
        "version": np.asarray(CHECKPOINT_VERSION),
        "n_layers": np.asarray(len(params.layers)),
        "activations": np.asarray(params.activations),
        "has_classifier": np.asarray(params.classifier is not None),
    }
    for i, (w, b) in enumerate(params.layers):
        payload[f"w_{i}"] = w
        payload[f"b_{i}"] = b
    if params.classifier is not None:
        payload["w_head"], payload["b_head"] = params.classifier
    np.savez(path, **payload)


def load_checkpoint(path: str | Path) -> EncoderParams:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {version}")
        n_layers = int(data["n_layers"])
        layers = [(data[f"w_{i}"], data[f"b_{i}"]) for i in range(n_layers)]
        activations = [str(a) for a in data["activations"]]
        head = None
        if bool(data["has_classifier"]):
            head = (data["w_head"], data["b_head"])
    params = EncoderParams(layers, activations, head)
    params.validate()
    return params
