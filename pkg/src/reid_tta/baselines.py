"""Comparison methods sharing the adaptation harness contract.

Every step predicts the batch first and only then (if the method adapts at
all) touches any state, so all methods are directly comparable per batch:

* no-adapt     - score with the frozen source model; state never changes;
* bn-adapt     - replace BN statistics with the current batch's (optionally
                 blend them into the running buffers with a momentum instead);
* source-tent  - minimize the entropy of the source classifier head's
                 predictions, updating only BN gamma/beta.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .adaptation import AdaptState, TempConfig, adapt_step, make_adapt_state, mean_reid_entropy, predict
from .autodiff import BnMode, Tensor, adam_step, entropy_rows, softmax_rows
from .extractor import ClassifierHead, ParameterSet, _forward_features, extract_features


class BaselineKind(Enum):
    NO_ADAPT = "no-adapt"
    BN_ADAPT = "bn-adapt"
    SOURCE_TENT = "source-tent"


@dataclass(frozen=True)
class BaselineOptions:
    """Paper-silent knobs, exposed for ablation.

    `bn_momentum` switches bn-adapt from pure per-batch replacement to
    momentum blending into the running buffers. `tent_batch_stats` keeps the
    usual entropy-minimization convention of normalizing with batch
    statistics; switching it off uses the frozen running statistics instead.
    """

    bn_momentum: float | None = None
    tent_batch_stats: bool = True


def no_adapt_step(state: AdaptState, images: np.ndarray) -> tuple[np.ndarray, dict]:
    """Score with the source model; nothing is ever updated. The loss field
    reports mean re-id entropy for monitoring only."""
    if state.gallery is None:
        raise RuntimeError("no gallery has been built for this state")
    features = extract_features(state.params, images, BnMode.RUNNING_STATS).data
    ranking = predict(features, state.gallery)
    entropy = mean_reid_entropy(features, state.gallery, state.config, state.rng)
    info = {
        "loss": entropy,
        "mean_reid_entropy": entropy,
        "param_drift_l2": state.params.drift_l2(),
    }
    return ranking, info


def bn_adapt_step(
    state: AdaptState,
    images: np.ndarray,
    options: BaselineOptions = BaselineOptions(),
) -> tuple[np.ndarray, dict]:
    """Normalize with statistics estimated from this mini-batch; weights,
    including gamma/beta, stay untouched. Batches of one non-spatial sample
    are a degenerate-batch error."""
    if state.gallery is None:
        raise RuntimeError("no gallery has been built for this state")
    batch = Tensor(np.asarray(images, dtype=np.float32))
    if options.bn_momentum is None:
        features = _forward_features(state.params, batch, BnMode.BATCH_STATS).data
    else:
        # Blend batch statistics into the running buffers, then normalize
        # with the blended buffers.
        features = _forward_features(
            state.params, batch, BnMode.RUNNING_STATS, running_momentum=options.bn_momentum
        ).data
    ranking = predict(features, state.gallery)
    entropy = mean_reid_entropy(features, state.gallery, state.config, state.rng)
    info = {
        "loss": entropy,
        "mean_reid_entropy": entropy,
        "param_drift_l2": state.params.drift_l2(),
    }
    return ranking, info


def source_tent_step(
    state: AdaptState,
    head: ClassifierHead,
    images: np.ndarray,
    options: BaselineOptions = BaselineOptions(),
) -> tuple[np.ndarray, dict]:
    """Entropy minimization over the C source classes of the pretraining
    head: predict by gallery similarity first, then one Adam step on the BN
    affine parameters."""
    if head is None:
        raise ValueError("source-tent needs the pretraining classifier head")
    if state.gallery is None:
        raise RuntimeError("no gallery has been built for this state")
    mode = BnMode.BATCH_STATS if options.tent_batch_stats else BnMode.RUNNING_STATS
    features = extract_features(state.params, images, mode)
    ranking = predict(features.data, state.gallery)

    probs = softmax_rows(head.logits(features))
    loss = entropy_rows(probs).mean()
    state.params.zero_grad()
    head.weight.grad = None
    head.bias.grad = None
    loss.backward()
    adam_step(state.params.tensors, state.params.trainable_mask, state.adam)

    info = {
        "loss": float(loss.data),
        "mean_reid_entropy": mean_reid_entropy(features.data, state.gallery, state.config, state.rng),
        "param_drift_l2": state.params.drift_l2(),
    }
    return ranking, info


@dataclass
class MethodRunner:
    """Uniform step interface so the harness can swap methods by name."""

    name: str
    state: AdaptState
    head: ClassifierHead | None = None
    options: BaselineOptions = BaselineOptions()

    def set_gallery(self, gallery) -> None:
        self.state.gallery = gallery

    def step(self, images: np.ndarray) -> tuple[np.ndarray, dict]:
        if self.name == "temp":
            return adapt_step(self.state, images)
        if self.name == "no-adapt":
            return no_adapt_step(self.state, images)
        if self.name == "bn-adapt":
            return bn_adapt_step(self.state, images, self.options)
        if self.name == "source-tent":
            return source_tent_step(self.state, self.head, images, self.options)
        raise ValueError(f"unknown method {self.name!r}")


METHOD_NAMES = ("temp", "no-adapt", "bn-adapt", "source-tent")


def build_method(
    name: str,
    params: ParameterSet,
    config: TempConfig,
    seed: int = 0,
    head: ClassifierHead | None = None,
    options: BaselineOptions = BaselineOptions(),
) -> MethodRunner:
    """Construct a runner over a private clone of `params`."""
    key = name.strip().lower().replace("_", "-")
    aliases = {"noadapt": "no-adapt", "bnadapt": "bn-adapt", "sourcetent": "source-tent"}
    key = aliases.get(key, key)
    if key not in METHOD_NAMES:
        raise ValueError(f"unknown method {name!r}; expected one of {METHOD_NAMES}")
    if key == "source-tent" and head is None:
        raise ValueError("source-tent requires a supervised pretraining head")
    state = make_adapt_state(params.clone(), config, seed)
    return MethodRunner(name=key, state=state, head=head, options=options)
