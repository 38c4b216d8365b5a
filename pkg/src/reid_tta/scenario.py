"""Synthetic retrieval worlds and the two temporal-shift stream kinds.

A world holds several identities observed in several domains. Domain 0 plays
the role of the pretraining environment; the others apply a global input
transform (uniform scale plus a shift direction, with sample noise), which is
the kind of distortion a normalization-layer adaptation can plausibly undo.
Identities are Gaussian clusters around latent prototypes (vector worlds) or
seeded blob-plus-texture colour patterns (image worlds).

Streams replay deterministically from their seed:

* location change - one phase per domain; queries and the gallery both come
  from that domain, and a gallery (re)build is signalled at each phase start;
* corruption      - the gallery is fixed once, clean, from the source domain,
  and each phase corrupts the query images at one schedule strength.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.ndimage import convolve1d

from .corruptions import CorruptionSpec
from .extractor import ImageInput, VectorInput, input_kind_from_dict, input_kind_to_dict

DOMAIN_SCALE_CYCLE = (1.0, 1.3, 0.75, 1.2, 0.85, 1.15)


@dataclass(frozen=True)
class WorldConfig:
    input_kind: VectorInput | ImageInput
    num_identities: int = 30
    num_domains: int = 3
    samples_per_identity: int = 20
    gallery_per_identity: int = 6
    shift_magnitude: float | None = None   # default: 1.5 (vector), 40.0 (image)
    noise_scale: float | None = None       # default: 0.35 (vector), 6.0 (image)
    seed: int = 0

    def __post_init__(self):
        if self.num_identities < 2:
            raise ValueError("need at least two identities")
        if self.num_domains < 3:
            raise ValueError("need at least three domains")
        if not 0 < self.gallery_per_identity < self.samples_per_identity:
            raise ValueError("gallery split must leave a nonempty query split")

    @property
    def resolved_shift(self) -> float:
        if self.shift_magnitude is not None:
            return self.shift_magnitude
        return 1.5 if isinstance(self.input_kind, VectorInput) else 40.0

    @property
    def resolved_noise(self) -> float:
        if self.noise_scale is not None:
            return self.noise_scale
        return 0.35 if isinstance(self.input_kind, VectorInput) else 6.0

    def to_dict(self) -> dict:
        return {
            "input_kind": input_kind_to_dict(self.input_kind),
            "num_identities": self.num_identities,
            "num_domains": self.num_domains,
            "samples_per_identity": self.samples_per_identity,
            "gallery_per_identity": self.gallery_per_identity,
            "shift_magnitude": self.shift_magnitude,
            "noise_scale": self.noise_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        return cls(
            input_kind=input_kind_from_dict(d["input_kind"]),
            num_identities=int(d["num_identities"]),
            num_domains=int(d["num_domains"]),
            samples_per_identity=int(d["samples_per_identity"]),
            gallery_per_identity=int(d["gallery_per_identity"]),
            shift_magnitude=d.get("shift_magnitude"),
            noise_scale=d.get("noise_scale"),
            seed=int(d.get("seed", 0)),
        )


@dataclass
class DomainData:
    query_x: np.ndarray
    query_y: np.ndarray
    gallery_x: np.ndarray
    gallery_y: np.ndarray


@dataclass
class SyntheticWorld:
    config: WorldConfig
    domains: list[DomainData]

    @property
    def num_domains(self) -> int:
        return len(self.domains)

    def domain_input_mean(self, domain: int) -> np.ndarray:
        d = self.domains[domain]
        x = np.concatenate([d.query_x, d.gallery_x])
        return x.reshape(x.shape[0], -1).mean(axis=0)


def _vector_prototypes(rng, count: int, dim: int, radius: float = 3.0, min_dist: float = 2.0):
    protos: list[np.ndarray] = []
    attempts = 0
    while len(protos) < count:
        attempts += 1
        if attempts > 20000:
            raise RuntimeError("could not place identity prototypes with the required margin")
        cand = rng.normal(size=dim)
        cand *= radius / np.linalg.norm(cand)
        if all(np.linalg.norm(cand - p) >= min_dist for p in protos):
            protos.append(cand)
    return np.stack(protos).astype(np.float32)


def _orthonormal_directions(rng, dim: int, count: int) -> np.ndarray:
    """`count` mutually well-separated unit vectors; orthonormal whenever the
    ambient dimension allows it."""
    if count <= dim:
        a = rng.normal(size=(dim, count))
        q, _ = np.linalg.qr(a)
        return q.T.astype(np.float32)
    dirs = rng.normal(size=(count, dim))
    return (dirs / np.linalg.norm(dirs, axis=1, keepdims=True)).astype(np.float32)


def _smooth2d(a: np.ndarray, passes: int = 2) -> np.ndarray:
    box = np.ones(3) / 3.0
    for _ in range(passes):
        a = convolve1d(a, box, axis=-2, mode="mirror")
        a = convolve1d(a, box, axis=-1, mode="mirror")
    return a


def _image_prototype(rng, channels: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((channels, h, w))
    for _ in range(3):
        cy, cx = rng.uniform(3, h - 3), rng.uniform(3, w - 3)
        r = rng.uniform(2.5, 5.0)
        amp = rng.uniform(60, 220, size=channels)
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img += amp[:, None, None] * g[None]
    texture = _smooth2d(rng.uniform(-1, 1, size=(channels, h, w)))
    img += 90.0 * texture + 40.0
    return np.clip(img, 0, 255).astype(np.float32)


def generate_world(config: WorldConfig) -> SyntheticWorld:
    """Deterministically build every domain's disjoint query/gallery split."""
    rng = np.random.default_rng(config.seed)
    kind = config.input_kind
    shift = config.resolved_shift
    noise = config.resolved_noise
    n_id = config.num_identities
    n_dom = config.num_domains
    per_id = config.samples_per_identity
    n_gal = config.gallery_per_identity

    scales = [DOMAIN_SCALE_CYCLE[d % len(DOMAIN_SCALE_CYCLE)] for d in range(n_dom)]

    if isinstance(kind, VectorInput):
        protos = _vector_prototypes(rng, n_id, kind.dim)
        dirs = _orthonormal_directions(rng, kind.dim, n_dom - 1)
        shifts = np.zeros((n_dom, kind.dim), dtype=np.float32)
        shifts[1:] = shift * dirs

        domains = []
        for d in range(n_dom):
            xs, ys = [], []
            for i in range(n_id):
                base = protos[i] + noise * rng.normal(size=(per_id, kind.dim))
                xs.append(scales[d] * base + shifts[d])
                ys.append(np.full(per_id, i, dtype=np.int64))
            x = np.concatenate(xs).astype(np.float32)
            y = np.concatenate(ys)
            domains.append(_split_domain(x, y, n_id, per_id, n_gal))
    else:
        protos = np.stack([_image_prototype(rng, kind.channels, kind.height, kind.width)
                           for _ in range(n_id)])
        dirs = _orthonormal_directions(rng, kind.channels, n_dom - 1)
        shifts = np.zeros((n_dom, kind.channels), dtype=np.float32)
        shifts[1:] = shift * dirs

        domains = []
        for d in range(n_dom):
            xs, ys = [], []
            for i in range(n_id):
                samples = []
                for _ in range(per_id):
                    dy, dx = rng.integers(-2, 3, size=2)
                    jittered = np.roll(protos[i], (int(dy), int(dx)), axis=(-2, -1))
                    sample = jittered + noise * rng.normal(size=jittered.shape)
                    sample = scales[d] * sample + shifts[d][:, None, None]
                    samples.append(np.clip(sample, 0, 255))
                xs.append(np.stack(samples).astype(np.float32))
                ys.append(np.full(per_id, i, dtype=np.int64))
            x = np.concatenate(xs)
            y = np.concatenate(ys)
            domains.append(_split_domain(x, y, n_id, per_id, n_gal))

    return SyntheticWorld(config=config, domains=domains)


def _split_domain(x, y, n_id: int, per_id: int, n_gal: int) -> DomainData:
    gal_idx, query_idx = [], []
    for i in range(n_id):
        rows = np.flatnonzero(y == i)
        gal_idx.extend(rows[:n_gal])
        query_idx.extend(rows[n_gal:])
    gal_idx = np.asarray(gal_idx)
    query_idx = np.asarray(query_idx)
    return DomainData(
        query_x=x[query_idx], query_y=y[query_idx],
        gallery_x=x[gal_idx], gallery_y=y[gal_idx],
    )


def source_training_set(world: SyntheticWorld, domain: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """All samples of one domain as a labelled training set. Pretraining
    worlds are generated with their own seed, so their identities are
    disjoint from any evaluation world's."""
    d = world.domains[domain]
    return (
        np.concatenate([d.query_x, d.gallery_x]),
        np.concatenate([d.query_y, d.gallery_y]),
    )


def same_identity_margin_rate(world: SyntheticWorld, domain: int = 0,
                              comparisons: int = 2000, seed: int = 0) -> float:
    """Fraction of random (same-identity pair, cross-identity pair) draws in
    which the same-identity pair is closer in raw input space."""
    d = world.domains[domain]
    x = np.concatenate([d.query_x, d.gallery_x]).reshape(-1, int(np.prod(d.query_x.shape[1:])))
    y = np.concatenate([d.query_y, d.gallery_y])
    rng = np.random.default_rng(seed)
    wins = 0
    for _ in range(comparisons):
        i = rng.integers(len(y))
        same_pool = np.flatnonzero((y == y[i]) & (np.arange(len(y)) != i))
        cross_pool = np.flatnonzero(y != y[i])
        j = rng.choice(same_pool)
        k = rng.choice(cross_pool)
        if np.linalg.norm(x[i] - x[j]) < np.linalg.norm(x[i] - x[k]):
            wins += 1
    return wins / comparisons


# -- streams -----------------------------------------------------------------


@dataclass(frozen=True)
class Phase:
    index: int
    label: str
    domain: int | None = None
    strength: float | None = None


@dataclass(frozen=True)
class GalleryEvent:
    phase: int
    images: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class QueryBatch:
    phase: int
    images: np.ndarray
    labels: np.ndarray


class ScenarioStream:
    """Ordered phases with replayable events; iterate via `events()`."""

    def __init__(self, phases: list[Phase], make_events):
        self.phases = phases
        self._make_events = make_events

    def events(self) -> Iterator[GalleryEvent | QueryBatch]:
        return self._make_events()


def _batched_query_passes(x, y, phase: int, batch_size: int, seed, phase_key) -> Iterator[QueryBatch]:
    rng = np.random.default_rng((seed, phase_key))
    order = rng.permutation(len(y))
    for start in range(0, len(order), batch_size):
        rows = order[start:start + batch_size]
        yield QueryBatch(phase=phase, images=x[rows], labels=y[rows])


def make_location_change_stream(world: SyntheticWorld, domain_order,
                                batch_size: int, seed: int = 0) -> ScenarioStream:
    """One phase per domain; each phase starts by signalling a gallery
    rebuild from that domain, then plays one seeded pass over its queries."""
    domain_order = tuple(int(d) for d in domain_order)
    if sorted(domain_order) != list(range(world.num_domains)):
        raise ValueError(f"domain order {domain_order} is not a permutation of the world's domains")

    phases = [Phase(index=p, label=f"domain{d}", domain=d) for p, d in enumerate(domain_order)]

    def make_events():
        for p, d in enumerate(domain_order):
            dom = world.domains[d]
            yield GalleryEvent(phase=p, images=dom.gallery_x, labels=dom.gallery_y)
            yield from _batched_query_passes(dom.query_x, dom.query_y, p, batch_size, seed, p)

    return ScenarioStream(phases, make_events)


def make_corruption_stream(world: SyntheticWorld, source_domain: int,
                           spec: CorruptionSpec, batch_size: int, seed: int = 0) -> ScenarioStream:
    """Fixed clean gallery from the source domain; one phase per schedule
    strength, corrupting every query image of that phase at that strength."""
    if not isinstance(world.config.input_kind, ImageInput):
        raise ValueError("image corruptions require an image-input world")
    dom = world.domains[source_domain]

    phases = [
        Phase(index=p, label=f"{spec.kind.value}:{s:g}", domain=source_domain, strength=float(s))
        for p, s in enumerate(spec.schedule)
    ]

    def make_events():
        yield GalleryEvent(phase=0, images=dom.gallery_x, labels=dom.gallery_y)
        for p, strength in enumerate(spec.schedule):
            corrupted = spec.apply(dom.query_x, strength)
            yield from _batched_query_passes(corrupted, dom.query_y, p, batch_size, seed, p)

    return ScenarioStream(phases, make_events)


# -- scenario description files -------------------------------------------------


@dataclass(frozen=True)
class ScenarioSpec:
    """Everything needed to replay a stream exactly: world config, schedule
    kind, corruption spec, and seeds. Persisted as JSON next to run output."""

    kind: str  # "location-change" | "corruption"
    world: WorldConfig
    batch_size: int = 16
    seed: int = 0
    domain_order: tuple[int, ...] | None = None
    source_domain: int = 0
    corruption: CorruptionSpec | None = None

    def __post_init__(self):
        if self.kind not in ("location-change", "corruption"):
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.kind == "corruption" and self.corruption is None:
            raise ValueError("corruption scenario needs a corruption spec")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "world": self.world.to_dict(),
            "batch_size": self.batch_size,
            "seed": self.seed,
            "domain_order": list(self.domain_order) if self.domain_order else None,
            "source_domain": self.source_domain,
            "corruption": self.corruption.to_dict() if self.corruption else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        return cls(
            kind=d["kind"],
            world=WorldConfig.from_dict(d["world"]),
            batch_size=int(d.get("batch_size", 16)),
            seed=int(d.get("seed", 0)),
            domain_order=tuple(d["domain_order"]) if d.get("domain_order") else None,
            source_domain=int(d.get("source_domain", 0)),
            corruption=CorruptionSpec.from_dict(d["corruption"]) if d.get("corruption") else None,
        )


def save_scenario(path, spec: ScenarioSpec) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scenario(path) -> ScenarioSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return ScenarioSpec.from_dict(json.load(fh))


def build_stream(spec: ScenarioSpec, world: SyntheticWorld, seed: int | None = None) -> ScenarioStream:
    """Stream for `spec`; `seed` overrides the spec's default for repeated
    runs over the same scenario."""
    stream_seed = spec.seed if seed is None else seed
    if spec.kind == "location-change":
        order = spec.domain_order or tuple(range(world.num_domains))
        return make_location_change_stream(world, order, spec.batch_size, stream_seed)
    return make_corruption_stream(world, spec.source_domain, spec.corruption,
                                  spec.batch_size, stream_seed)
