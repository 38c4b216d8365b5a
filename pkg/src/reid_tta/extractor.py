"""Feature extractor, source pretraining, and parameter-set management.

The extractor is a small batch-normalized network in one of two flavours:

* vector input:  (linear -> BN -> ReLU) per hidden width, then a linear
  projection to the feature dimension;
* image input:   (3x3 conv, pad 1 -> BN -> ReLU -> 2x2 avg pool) per channel
  plan entry, then global average pooling and a linear projection.

Every hidden block contains exactly one BN layer, so the adaptation-time
trainable surface (the BN affine pairs) is spread through the depth of the
network. Pretraining minimizes cross-entropy on a classifier head plus a
batch-hard softmax-triplet loss over PK-sampled batches, then freezes the
source snapshot and restricts the trainable mask to BN gamma/beta.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    AdamState,
    BnMode,
    BnState,
    Tensor,
    adam_step,
    avg_pool2d,
    batchnorm_forward,
    clamp_min,
    conv2d,
    gather_rows,
    global_avg_pool,
    l2_normalize_rows,
    linear,
    log_softmax_rows,
    matmul,
    relu,
    softplus,
    transpose,
    update_running_stats,
)

CHECKPOINT_MAGIC = b"RIDC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class VectorInput:
    dim: int


@dataclass(frozen=True)
class ImageInput:
    channels: int
    height: int
    width: int


def input_kind_to_dict(kind: VectorInput | ImageInput) -> dict:
    if isinstance(kind, VectorInput):
        return {"kind": "vector", "dim": kind.dim}
    return {"kind": "image", "channels": kind.channels, "height": kind.height, "width": kind.width}


def input_kind_from_dict(d: dict) -> VectorInput | ImageInput:
    if d["kind"] == "vector":
        return VectorInput(dim=int(d["dim"]))
    if d["kind"] == "image":
        return ImageInput(int(d["channels"]), int(d["height"]), int(d["width"]))
    raise ValueError(f"unknown input kind {d['kind']!r}")


@dataclass(frozen=True)
class ExtractorConfig:
    """Architecture description; `hidden` is layer widths (vector mode) or
    the conv channel plan (image mode)."""

    input_kind: VectorInput | ImageInput
    hidden: tuple[int, ...] = (64, 64, 64)
    feature_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be at least 2")
        if not self.hidden or any(w <= 0 for w in self.hidden):
            raise ValueError("hidden plan must be nonempty positive integers")
        if isinstance(self.input_kind, ImageInput):
            shrink = 2 ** len(self.hidden)
            if self.input_kind.height % shrink or self.input_kind.width % shrink:
                raise ValueError(
                    f"image extent {self.input_kind.height}x{self.input_kind.width} "
                    f"must be divisible by {shrink} (one 2x2 pool per block)"
                )

    def to_dict(self) -> dict:
        return {
            "input_kind": input_kind_to_dict(self.input_kind),
            "hidden": list(self.hidden),
            "feature_dim": self.feature_dim,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractorConfig":
        return cls(
            input_kind=input_kind_from_dict(d["input_kind"]),
            hidden=tuple(int(w) for w in d["hidden"]),
            feature_dim=int(d["feature_dim"]),
            seed=int(d.get("seed", 0)),
        )


def _is_bn_affine(name: str) -> bool:
    return name.endswith(".gamma") or name.endswith(".beta")


@dataclass
class ParameterSet:
    """Named parameter tensors with a frozen source snapshot and a mask.

    `theta0` (and `bn_stats0`) are plain arrays captured by
    `snapshot_and_mask`; after the snapshot the mask is true exactly on the
    BN affine tensors, so the optimizer can never move anything else.
    """

    tensors: dict[str, Tensor]
    theta0: dict[str, np.ndarray]
    trainable_mask: dict[str, bool]
    bn_states: list[BnState]
    config: ExtractorConfig
    bn_stats0: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def snapshot_and_mask(self) -> None:
        """Freeze theta0 := theta and restrict training to BN gamma/beta."""
        self.theta0 = {name: t.data.copy() for name, t in self.tensors.items()}
        self.trainable_mask = {name: _is_bn_affine(name) for name in self.tensors}
        self.bn_stats0 = [(bn.running_mean.copy(), bn.running_var.copy()) for bn in self.bn_states]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def trainable_tensors(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if self.trainable_mask.get(n, False)}

    def drift_l2(self) -> float:
        """Euclidean distance between theta and the source snapshot."""
        total = 0.0
        for name, t in self.tensors.items():
            diff = t.data.astype(np.float64) - self.theta0[name].astype(np.float64)
            total += float((diff * diff).sum())
        return float(np.sqrt(total))

    def drift_sq_graph(self) -> Tensor:
        """Differentiable squared drift; only trainable tensors enter the
        graph (the rest never move, so they contribute exactly zero)."""
        total: Tensor | None = None
        for name, t in self.tensors.items():
            if not self.trainable_mask.get(name, False):
                continue
            ref = Tensor(self.theta0[name].astype(t.data.dtype), dtype=t.data.dtype)
            term = ((t - ref) * (t - ref)).sum()
            total = term if total is None else total + term
        if total is None:
            raise RuntimeError("parameter set has no trainable tensors")
        return total

    def clone(self) -> "ParameterSet":
        tensors = {
            name: Tensor(t.data.copy(), requires_grad=t.requires_grad)
            for name, t in self.tensors.items()
        }
        out = ParameterSet(
            tensors=tensors,
            theta0={n: a.copy() for n, a in self.theta0.items()},
            trainable_mask=dict(self.trainable_mask),
            bn_states=_rebind_bn_states(self.bn_states, tensors, copy_buffers=True),
            config=self.config,
            bn_stats0=[(m.copy(), v.copy()) for m, v in self.bn_stats0],
        )
        return out

    def source_copy(self) -> "ParameterSet":
        """A fresh parameter set rewound to the source snapshot."""
        out = self.clone()
        for name, t in out.tensors.items():
            t.data[...] = out.theta0[name]
        for bn, (mean0, var0) in zip(out.bn_states, out.bn_stats0):
            bn.running_mean[...] = mean0
            bn.running_var[...] = var0
        return out

    def with_tensors(self, tensors: dict[str, Tensor]) -> "ParameterSet":
        """View with substituted tensors (used by the gradient checker);
        BN buffers are cast to the substituted dtype."""
        dtype = next(iter(tensors.values())).data.dtype
        bn_states = _rebind_bn_states(self.bn_states, tensors, copy_buffers=False, dtype=dtype)
        return ParameterSet(
            tensors=tensors,
            theta0=self.theta0,
            trainable_mask=dict(self.trainable_mask),
            bn_states=bn_states,
            config=self.config,
            bn_stats0=self.bn_stats0,
        )


def _rebind_bn_states(
    bn_states: list[BnState],
    tensors: dict[str, Tensor],
    copy_buffers: bool,
    dtype=None,
) -> list[BnState]:
    out = []
    for i, bn in enumerate(bn_states):
        mean = bn.running_mean.copy() if copy_buffers else bn.running_mean
        var = bn.running_var.copy() if copy_buffers else bn.running_var
        if dtype is not None and mean.dtype != dtype:
            mean = mean.astype(dtype)
            var = var.astype(dtype)
        out.append(
            BnState(
                gamma=tensors[f"block{i}.gamma"],
                beta=tensors[f"block{i}.beta"],
                running_mean=mean,
                running_var=var,
                epsilon=bn.epsilon,
            )
        )
    return out


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_extractor(config: ExtractorConfig) -> ParameterSet:
    """Seeded construction; the mask starts all-true (pretraining mode) and
    theta0 is captured immediately, so a fresh extractor has zero drift."""
    rng = np.random.default_rng(config.seed)
    tensors: dict[str, Tensor] = {}
    bn_states: list[BnState] = []

    if isinstance(config.input_kind, VectorInput):
        in_dim = config.input_kind.dim
        if in_dim <= 0:
            raise ValueError("vector input dim must be positive")
        for i, width in enumerate(config.hidden):
            w = _kaiming_uniform(rng, (in_dim, width), fan_in=in_dim)
            tensors[f"block{i}.weight"] = Tensor(w, requires_grad=True)
            bn = BnState.create(width)
            tensors[f"block{i}.gamma"] = bn.gamma
            tensors[f"block{i}.beta"] = bn.beta
            bn_states.append(bn)
            in_dim = width
        head_in = in_dim
    else:
        in_ch = config.input_kind.channels
        for i, ch in enumerate(config.hidden):
            w = _kaiming_uniform(rng, (ch, in_ch, 3, 3), fan_in=in_ch * 9)
            tensors[f"block{i}.weight"] = Tensor(w, requires_grad=True)
            bn = BnState.create(ch)
            tensors[f"block{i}.gamma"] = bn.gamma
            tensors[f"block{i}.beta"] = bn.beta
            bn_states.append(bn)
            in_ch = ch
        head_in = in_ch

    tensors["out.weight"] = Tensor(
        _kaiming_uniform(rng, (head_in, config.feature_dim), fan_in=head_in), requires_grad=True
    )
    tensors["out.bias"] = Tensor(np.zeros(config.feature_dim, dtype=np.float32), requires_grad=True)

    params = ParameterSet(
        tensors=tensors,
        theta0={},
        trainable_mask={name: True for name in tensors},
        bn_states=bn_states,
        config=config,
    )
    params.theta0 = {name: t.data.copy() for name, t in tensors.items()}
    params.bn_stats0 = [(bn.running_mean.copy(), bn.running_var.copy()) for bn in bn_states]
    return params


def _forward_features(
    params: ParameterSet,
    batch: Tensor,
    bn_mode: BnMode,
    running_momentum: float | None = None,
) -> Tensor:
    """Shared forward pass. `running_momentum` (pretraining only) blends each
    BN layer's input statistics into its running buffers before normalizing."""
    cfg = params.config
    x = batch
    if isinstance(cfg.input_kind, VectorInput):
        if x.data.ndim != 2 or x.shape[1] != cfg.input_kind.dim:
            raise ValueError(f"expected N x {cfg.input_kind.dim} input, got {x.shape}")
        for i in range(len(cfg.hidden)):
            h = matmul(x, params.tensors[f"block{i}.weight"])
            if running_momentum is not None:
                update_running_stats(params.bn_states[i], h.data, running_momentum)
            h = batchnorm_forward(h, params.bn_states[i], bn_mode)
            x = relu(h)
    else:
        kind = cfg.input_kind
        if x.data.ndim != 4 or x.shape[1:] != (kind.channels, kind.height, kind.width):
            raise ValueError(
                f"expected N x {kind.channels} x {kind.height} x {kind.width} input, got {x.shape}"
            )
        x = x * (1.0 / 255.0)  # pixel inputs arrive in [0, 255]
        for i in range(len(cfg.hidden)):
            h = conv2d(x, params.tensors[f"block{i}.weight"], padding=1)
            if running_momentum is not None:
                update_running_stats(params.bn_states[i], h.data, running_momentum)
            h = batchnorm_forward(h, params.bn_states[i], bn_mode)
            x = avg_pool2d(relu(h), 2)
        x = global_avg_pool(x)
    return linear(x, params.tensors["out.weight"], params.tensors["out.bias"])


def extract_features(
    params: ParameterSet,
    batch: np.ndarray | Tensor,
    bn_mode: BnMode = BnMode.RUNNING_STATS,
) -> Tensor:
    """Map a batch to N x d feature vectors. Mutates nothing: parameters and
    running statistics are read-only here."""
    if not isinstance(batch, Tensor):
        batch = Tensor(np.asarray(batch, dtype=np.float32))
    return _forward_features(params, batch, bn_mode, running_momentum=None)


# -- losses ------------------------------------------------------------------


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the labelled class."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError("labels must be a vector matching the batch")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError("label outside [0, num_classes)")
    lp = log_softmax_rows(logits)
    picked = gather_rows(lp, labels.astype(np.int64)[:, None])
    return -picked.mean()


def softmax_triplet_loss(features: Tensor, labels: np.ndarray) -> Tensor:
    """Batch-hard softmax triplet loss on L2-normalized features.

    For each anchor, takes the largest positive distance and smallest negative
    distance and scores -log(exp(-d_ap) / (exp(-d_ap) + exp(-d_an))), i.e.
    softplus(d_ap - d_an). Hard-example indices are differentiation constants.
    """
    labels = np.asarray(labels)
    n = features.shape[0]
    if labels.shape != (n,):
        raise ValueError("labels must be a vector matching the batch")
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    if not pos_mask.any(axis=1).all():
        raise ValueError("every anchor needs at least one positive")
    if not neg_mask.any(axis=1).all():
        raise ValueError("every anchor needs at least one negative")

    f = l2_normalize_rows(features)
    d_sq = clamp_min(2.0 - 2.0 * matmul(f, transpose(f)), 0.0)
    d = (d_sq + 1e-12).sqrt()

    dist = d.data
    hardest_pos = np.where(pos_mask, dist, -np.inf).argmax(axis=1)
    hardest_neg = np.where(neg_mask, dist, np.inf).argmin(axis=1)
    d_ap = gather_rows(d, hardest_pos[:, None].astype(np.int64))
    d_an = gather_rows(d, hardest_neg[:, None].astype(np.int64))
    return softplus(d_ap - d_an).mean()


# -- classifier head -----------------------------------------------------------


@dataclass
class ClassifierHead:
    """Linear map feature_dim -> C source identities, used by pretraining and
    by the source-entropy baseline."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, feature_dim: int, num_classes: int, rng: np.random.Generator) -> "ClassifierHead":
        return cls(
            weight=Tensor(_kaiming_uniform(rng, (feature_dim, num_classes), fan_in=feature_dim),
                          requires_grad=True),
            bias=Tensor(np.zeros(num_classes, dtype=np.float32), requires_grad=True),
        )

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def logits(self, features: Tensor) -> Tensor:
        return linear(features, self.weight, self.bias)


# -- PK sampling and pretraining -------------------------------------------------


def pk_batches(labels: np.ndarray, p: int, k: int, rng: np.random.Generator):
    """Yield index batches with exactly `p` distinct identities, `k` instances
    each, for one epoch. Identities with fewer than `k` samples are rejected
    up front; a trailing group smaller than `p` is dropped."""
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < p:
        raise ValueError(f"need at least {p} identities, got {len(ids)}")
    if counts.min() < k:
        raise ValueError(f"every identity needs at least {k} samples")
    by_id = {i: np.flatnonzero(labels == i) for i in ids}
    order = rng.permutation(ids)
    for start in range(0, len(order) - p + 1, p):
        chosen = order[start:start + p]
        batch = [rng.choice(by_id[i], size=k, replace=False) for i in chosen]
        yield np.concatenate(batch)


@dataclass(frozen=True)
class PretrainConfig:
    learning_rate: float = 0.00035
    p: int = 4
    k: int = 4
    weight_decay: float = 0.0005
    epochs: int = 30
    ce_weight: float = 1.0
    triplet_weight: float = 1.0
    bn_momentum: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.p < 2 or self.k < 2:
            raise ValueError("PK sampling needs p >= 2 and k >= 2")


@dataclass
class PretrainResult:
    params: ParameterSet
    head: ClassifierHead
    epoch_losses: list[float]


def pretrain(
    inputs: np.ndarray,
    labels: np.ndarray,
    extractor_config: ExtractorConfig,
    config: PretrainConfig = PretrainConfig(),
) -> PretrainResult:
    """Train the extractor + classifier head on the labelled source set.

    BN layers run on batch statistics and blend them into the running buffers
    (momentum 0.1); weight decay is applied uniformly, including to the BN
    affine pairs. On completion the source snapshot is frozen and the
    trainable mask shrinks to BN gamma/beta only.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    num_classes = len(classes)
    if not np.array_equal(classes, np.arange(num_classes)):
        raise ValueError("labels must be 0..C-1")

    params = build_extractor(extractor_config)
    rng = np.random.default_rng(config.seed)
    head = ClassifierHead.create(extractor_config.feature_dim, num_classes, rng)

    opt_tensors = dict(params.tensors)
    opt_tensors["classifier.weight"] = head.weight
    opt_tensors["classifier.bias"] = head.bias
    mask = {name: True for name in opt_tensors}
    opt = AdamState(learning_rate=config.learning_rate, weight_decay=config.weight_decay)

    epoch_losses: list[float] = []
    for _ in range(config.epochs):
        batch_losses = []
        for idx in pk_batches(labels, config.p, config.k, rng):
            x = Tensor(np.asarray(inputs[idx], dtype=np.float32))
            y = labels[idx]
            feats = _forward_features(params, x, BnMode.BATCH_STATS, running_momentum=config.bn_momentum)
            loss = config.ce_weight * cross_entropy_loss(head.logits(feats), y)
            loss = loss + config.triplet_weight * softmax_triplet_loss(feats, y)
            for t in opt_tensors.values():
                t.grad = None
            loss.backward()
            adam_step(opt_tensors, mask, opt)
            batch_losses.append(loss.item())
        epoch_losses.append(float(np.mean(batch_losses)))

    params.snapshot_and_mask()
    return PretrainResult(params=params, head=head, epoch_losses=epoch_losses)


# -- checkpoint io ----------------------------------------------------------------
#
# Byte layout (all integers little-endian):
#
#   offset 0   4 bytes   magic "RIDC"
#   offset 4   uint32    format version (currently 1)
#   offset 8   uint32    header length H
#   offset 12  H bytes   UTF-8 JSON header:
#                          extractor   ExtractorConfig dict
#                          mask        {tensor name: bool}
#                          has_head    bool
#                          arrays      ordered list of {name, shape}
#   offset 12+H          float32 little-endian payload, one array after
#                        another in exactly the header's order
#
# Array names: "theta/<tensor>", "theta0/<tensor>", "bn/<i>/mean", "bn/<i>/var",
# "bn0/<i>/mean", "bn0/<i>/var", and optionally "head/weight", "head/bias".


def save_checkpoint(path, params: ParameterSet, head: ClassifierHead | None = None) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    for name, t in params.tensors.items():
        arrays.append((f"theta/{name}", t.data))
    for name, a in params.theta0.items():
        arrays.append((f"theta0/{name}", a))
    for i, bn in enumerate(params.bn_states):
        arrays.append((f"bn/{i}/mean", bn.running_mean))
        arrays.append((f"bn/{i}/var", bn.running_var))
    for i, (mean0, var0) in enumerate(params.bn_stats0):
        arrays.append((f"bn0/{i}/mean", mean0))
        arrays.append((f"bn0/{i}/var", var0))
    if head is not None:
        arrays.append(("head/weight", head.weight.data))
        arrays.append(("head/bias", head.bias.data))

    header = {
        "extractor": params.config.to_dict(),
        "mask": {name: bool(v) for name, v in params.trainable_mask.items()},
        "has_head": head is not None,
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[ParameterSet, ClassifierHead | None]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + header_len].decode("utf-8"))

    offset = 12 + header_len
    loaded: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        loaded[entry["name"]] = a.astype(np.float32)
        offset += count * 4

    config = ExtractorConfig.from_dict(header["extractor"])
    mask = {name: bool(v) for name, v in header["mask"].items()}

    tensors: dict[str, Tensor] = {}
    theta0: dict[str, np.ndarray] = {}
    for key, a in loaded.items():
        if key.startswith("theta/"):
            tensors[key[len("theta/"):]] = Tensor(a.copy(), requires_grad=True)
        elif key.startswith("theta0/"):
            theta0[key[len("theta0/"):]] = a.copy()

    bn_states: list[BnState] = []
    bn_stats0: list[tuple[np.ndarray, np.ndarray]] = []
    for i in range(len(config.hidden)):
        bn_states.append(
            BnState(
                gamma=tensors[f"block{i}.gamma"],
                beta=tensors[f"block{i}.beta"],
                running_mean=loaded[f"bn/{i}/mean"].copy(),
                running_var=loaded[f"bn/{i}/var"].copy(),
            )
        )
        bn_stats0.append((loaded[f"bn0/{i}/mean"].copy(), loaded[f"bn0/{i}/var"].copy()))

    params = ParameterSet(
        tensors=tensors,
        theta0=theta0,
        trainable_mask=mask,
        bn_states=bn_states,
        config=config,
        bn_stats0=bn_stats0,
    )
    head = None
    if header["has_head"]:
        head = ClassifierHead(
            weight=Tensor(loaded["head/weight"].copy(), requires_grad=True),
            bias=Tensor(loaded["head/bias"].copy(), requires_grad=True),
        )
    return params, head
