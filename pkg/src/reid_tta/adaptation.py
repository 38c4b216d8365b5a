"""Online test-time adaptation of the feature extractor by re-id entropy.

Incoming query batches are scored against a fixed store of pre-extracted
gallery features by cosine similarity. Treating each gallery feature as its
own class, the similarities of the k best-matching galleries become softmax
logits; the Shannon entropy of that distribution ("re-id entropy") measures
how ambiguous the retrieval is. Each batch is predicted first, then a single
Adam step lowers mean re-id entropy plus an L2 pull toward the source
parameters, and the batch is discarded. Only BN gamma/beta can move.
"""

from __future__ import annotations

import copy
import hashlib
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .autodiff import (
    AdamState,
    BnMode,
    Tensor,
    adam_step,
    entropy_rows,
    gather_rows,
    l2_normalize_rows,
    matmul,
    softmax_rows,
)
from .extractor import ParameterSet, extract_features

GALLERY_MAGIC = b"RIDG"
GALLERY_VERSION = 1

NORM_FLOOR = 1e-12


class SelectionStrategy(Enum):
    TOP_K = "top-k"
    BOTTOM_K = "bottom-k"
    TOP_BOTTOM = "top-bottom"
    RANDOM = "random"

    @classmethod
    def parse(cls, name: str) -> "SelectionStrategy":
        for member in cls:
            if member.value == name or member.name.lower() == name.lower():
                return member
        raise ValueError(f"unknown selection strategy {name!r}")


@dataclass(frozen=True)
class TempConfig:
    """Hyperparameters of the adaptation step.

    `lam` weighs the anti-forgetting pull toward the source parameters
    (exposed as --lambda on the command line).
    """

    k: int = 50
    lam: float = 0.0001
    learning_rate: float = 0.00035
    selection: SelectionStrategy = SelectionStrategy.TOP_K
    batch_size: int = 16

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.selection is SelectionStrategy.TOP_BOTTOM and self.k % 2:
            raise ValueError("top-bottom selection needs an even k")


class GalleryStore:
    """Immutable matrix of pre-extracted gallery features with identities.

    Rows must be finite and have nonzero norm; the arrays are frozen after
    construction so the store can be shared read-only.
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray, extraction_model_tag: str = ""):
        features = np.asarray(features, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] < 1:
            raise ValueError("gallery features must be a nonempty n x d matrix")
        if labels.shape != (features.shape[0],):
            raise ValueError("labels must match the gallery rows")
        if not np.isfinite(features).all():
            raise ValueError("gallery features must be finite")
        norms = np.linalg.norm(features.astype(np.float64), axis=1)
        if (norms < NORM_FLOOR).any():
            raise ValueError("gallery contains a zero-norm feature row")
        features = features.copy()
        labels = labels.copy()
        features.flags.writeable = False
        labels.flags.writeable = False
        self.features = features
        self.labels = labels
        self.extraction_model_tag = extraction_model_tag
        unit = features / np.maximum(norms[:, None], NORM_FLOOR)
        unit = unit.astype(np.float32)
        unit.flags.writeable = False
        self.unit_features = unit

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def parameter_tag(params: ParameterSet) -> str:
    """Short content hash of the parameter values, recorded on galleries so a
    store can be traced to the parameter state that produced it."""
    h = hashlib.sha1()
    for name in sorted(params.tensors):
        h.update(name.encode())
        h.update(params.tensors[name].data.tobytes())
    for bn in params.bn_states:
        h.update(bn.running_mean.tobytes())
        h.update(bn.running_var.tobytes())
    return "sha1:" + h.hexdigest()[:12]


def build_gallery(params: ParameterSet, images: np.ndarray, labels: np.ndarray) -> GalleryStore:
    """Extract gallery features once (frozen running statistics) and freeze
    them together with their identity labels."""
    images = np.asarray(images, dtype=np.float32)
    if images.shape[0] == 0:
        raise ValueError("gallery image set is empty")
    feats = extract_features(params, images, BnMode.RUNNING_STATS).data
    return GalleryStore(feats, labels, extraction_model_tag=parameter_tag(params))


def similarity_matrix(query_features, gallery: GalleryStore):
    """Cosine similarity of every query row against every gallery row.

    Accepts a Tensor (differentiable with respect to the query features) or a
    plain array; gallery features are constants either way. Zero-norm query
    rows are guarded by a denominator floor instead of failing.
    """
    if isinstance(query_features, Tensor):
        if query_features.shape[1] != gallery.dim:
            raise ValueError("query feature dimension does not match the gallery")
        qn = l2_normalize_rows(query_features, eps=NORM_FLOOR)
        g = Tensor(gallery.unit_features.T.astype(query_features.data.dtype),
                   dtype=query_features.data.dtype)
        return matmul(qn, g)
    q = np.asarray(query_features, dtype=np.float32)
    if q.ndim != 2 or q.shape[1] != gallery.dim:
        raise ValueError("query feature dimension does not match the gallery")
    norms = np.maximum(np.linalg.norm(q.astype(np.float64), axis=1, keepdims=True), NORM_FLOOR)
    return ((q / norms) @ gallery.unit_features.T.astype(np.float64)).astype(np.float32)


def select_galleries(
    similarities: np.ndarray,
    k: int,
    strategy: SelectionStrategy = SelectionStrategy.TOP_K,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Pick k gallery indices per query row; ties break toward the lowest
    index. The indices are constants for differentiation: gradients flow only
    through the similarity values gathered at them.
    """
    sims = np.asarray(similarities)
    squeeze = sims.ndim == 1
    if squeeze:
        sims = sims[None, :]
    n = sims.shape[1]
    if k > n:
        raise ValueError(f"k={k} exceeds gallery size {n}")
    if strategy is SelectionStrategy.TOP_K:
        idx = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    elif strategy is SelectionStrategy.BOTTOM_K:
        idx = np.argsort(sims, axis=1, kind="stable")[:, :k]
    elif strategy is SelectionStrategy.TOP_BOTTOM:
        top = np.argsort(-sims, axis=1, kind="stable")[:, : k // 2]
        bottom = np.argsort(sims, axis=1, kind="stable")[:, : k // 2]
        idx = np.concatenate([top, bottom], axis=1)
    elif strategy is SelectionStrategy.RANDOM:
        if rng is None:
            raise ValueError("random selection needs a seeded generator")
        # Uniform k-subset per row: argsort of iid uniforms.
        idx = np.argsort(rng.random(sims.shape), axis=1, kind="stable")[:, :k]
    else:  # pragma: no cover
        raise ValueError(f"unhandled strategy {strategy}")
    return idx[0] if squeeze else idx


def selection_probabilities(selected_sims: np.ndarray) -> np.ndarray:
    """Softmax over the selected similarities (per row), max-stabilized."""
    s = np.asarray(selected_sims, dtype=np.float64)
    if not np.isfinite(s).all():
        raise ValueError("similarities must be finite")
    shifted = s - s.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def reid_entropy(probabilities: np.ndarray):
    """Shannon entropy (nats) of retrieval probabilities, per query.

    Accepts one probability vector or a batch of rows; rows are renormalized
    and the result is clipped into [0, ln k] so the analytic bounds hold
    exactly despite float rounding. Uses the 0*log(0) = 0 convention.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    squeeze = p.ndim == 1
    if squeeze:
        p = p[None, :]
    if (p < 0).any():
        raise ValueError("probabilities must be nonnegative")
    p = p / p.sum(axis=-1, keepdims=True)
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = np.clip(-plogp.sum(axis=-1), 0.0, np.log(p.shape[-1]))
    return float(h[0]) if squeeze else h


def mean_reid_entropy(query_features: np.ndarray, gallery: GalleryStore, config: TempConfig,
                      rng: np.random.Generator | None = None) -> float:
    """Monitoring path: mean re-id entropy of a batch under `config`."""
    sims = similarity_matrix(np.asarray(query_features), gallery)
    idx = select_galleries(sims, config.k, config.selection, rng)
    probs = selection_probabilities(np.take_along_axis(sims, idx, axis=1))
    return float(np.mean(reid_entropy(probs)))


def adaptation_objective(
    query_features: Tensor,
    gallery: GalleryStore,
    params: ParameterSet,
    config: TempConfig,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, dict]:
    """Differentiable loss: mean re-id entropy plus lam * squared drift from
    the source snapshot. With lam = 0 the loss is exactly the mean entropy."""
    sims = similarity_matrix(query_features, gallery)
    idx = select_galleries(sims.data, config.k, config.selection, rng)
    selected = gather_rows(sims, idx)
    probs = softmax_rows(selected)
    entropy = entropy_rows(probs).mean()
    if config.lam > 0:
        loss = entropy + config.lam * params.drift_sq_graph()
    else:
        loss = entropy
    info = {"mean_reid_entropy": float(entropy.data)}
    return loss, info


def predict(query_features: np.ndarray, gallery: GalleryStore) -> np.ndarray:
    """Rank gallery indices by descending cosine similarity per query; ties
    break toward the lowest index."""
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    sims = similarity_matrix(np.asarray(query_features), gallery)
    return np.argsort(-sims, axis=1, kind="stable")


def top1_identities(ranking: np.ndarray, gallery: GalleryStore) -> np.ndarray:
    return gallery.labels[ranking[:, 0]]


@dataclass
class AdaptState:
    """Single-owner state of one adaptation run; mutated batch by batch."""

    params: ParameterSet
    adam: AdamState
    config: TempConfig
    gallery: GalleryStore | None = None
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        if self.adam.weight_decay != 0:
            raise ValueError("adaptation runs with weight decay 0")

    def clone(self) -> "AdaptState":
        return AdaptState(
            params=self.params.clone(),
            adam=copy.deepcopy(self.adam),
            config=self.config,
            gallery=self.gallery,
            rng=copy.deepcopy(self.rng),
        )


def make_adapt_state(params: ParameterSet, config: TempConfig, seed: int = 0) -> AdaptState:
    return AdaptState(
        params=params,
        adam=AdamState(learning_rate=config.learning_rate, weight_decay=0.0),
        config=config,
        rng=np.random.default_rng(seed),
    )


def adapt_step(state: AdaptState, images: np.ndarray) -> tuple[np.ndarray, dict]:
    """Predict the batch with the current parameters, then take one gradient
    step on the adaptation objective. Returns (ranking, info); the batch is
    not retained. Running BN statistics are never touched here.
    """
    if state.gallery is None:
        raise RuntimeError("no gallery has been built for this state")
    features = extract_features(state.params, images, BnMode.RUNNING_STATS)
    ranking = predict(features.data, state.gallery)

    loss, info = adaptation_objective(features, state.gallery, state.params, state.config, state.rng)
    state.params.zero_grad()
    loss.backward()
    adam_step(state.params.tensors, state.params.trainable_mask, state.adam)

    info["loss"] = float(loss.data)
    info["param_drift_l2"] = state.params.drift_l2()
    return ranking, info


# -- gallery container io -------------------------------------------------------
#
# Byte layout (little-endian):
#   magic "RIDG" | uint32 version | uint32 n | uint32 d | uint32 tag length |
#   tag UTF-8 | n*d float32 features (row-major) | n int64 labels


def save_gallery(path, gallery: GalleryStore) -> None:
    tag = gallery.extraction_model_tag.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(GALLERY_MAGIC)
        fh.write(struct.pack("<III", GALLERY_VERSION, len(gallery), gallery.dim))
        fh.write(struct.pack("<I", len(tag)))
        fh.write(tag)
        fh.write(np.ascontiguousarray(gallery.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(gallery.labels, dtype="<i8").tobytes())


def load_gallery(path) -> GalleryStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != GALLERY_MAGIC:
        raise ValueError("not a gallery file (bad magic)")
    version, n, d = struct.unpack_from("<III", blob, 4)
    if version != GALLERY_VERSION:
        raise ValueError(f"unsupported gallery version {version}")
    (tag_len,) = struct.unpack_from("<I", blob, 16)
    offset = 20
    tag = blob[offset:offset + tag_len].decode("utf-8")
    offset += tag_len
    feats = np.frombuffer(blob, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    offset += n * d * 4
    labels = np.frombuffer(blob, dtype="<i8", count=n, offset=offset)
    return GalleryStore(feats.astype(np.float32), labels.astype(np.int64), extraction_model_tag=tag)
