"""Finite-difference verification of every differentiable primitive and of
the full adaptation objective through a three-block extractor.

Each check builds a scalar loss from seeded random inputs and compares the
analytic gradient against central differences. Gallery-selection indices are
frozen at the evaluation point: they are differentiation constants in the
objective, so the comparison must not straddle a selection switch.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .adaptation import GalleryStore, select_galleries, similarity_matrix
from .autodiff import BnMode, BnState, Tensor, finite_difference_check
from .extractor import ExtractorConfig, VectorInput, build_extractor, extract_features


def _rand(rng, *shape, scale=1.0, dtype=np.float32):
    return (scale * rng.standard_normal(shape)).astype(dtype)


def _tensor_params(rng, spec: dict[str, tuple[int, ...]], scale=1.0) -> dict[str, Tensor]:
    return {name: Tensor(_rand(rng, *shape, scale=scale), requires_grad=True)
            for name, shape in spec.items()}


def primitive_checks(seed: int = 0) -> dict[str, float]:
    """Max relative FD error for each primitive, keyed by primitive name."""
    rng = np.random.default_rng(seed)
    checks: dict[str, float] = {}

    p = _tensor_params(rng, {"a": (4, 5), "b": (4, 5)})
    checks["add/mul/sub"] = finite_difference_check(
        lambda t: ((t["a"] * t["b"] + t["a"] - 0.5 * t["b"]) * t["a"]).sum(), p)

    p = _tensor_params(rng, {"a": (3, 4), "b": (3, 4)})
    p["b"].data += 3.0  # keep the divisor away from zero
    checks["div/pow"] = finite_difference_check(
        lambda t: ((t["a"] / t["b"]) ** 3).sum(), p)

    p = _tensor_params(rng, {"a": (6,)}, scale=0.5)
    checks["exp/log"] = finite_difference_check(
        lambda t: ((t["a"] * 0.9).exp() + (t["a"] * t["a"] + 1.0).log()).sum(), p)

    p = _tensor_params(rng, {"a": (5,)})
    p["a"].data = np.abs(p["a"].data) + 0.5
    checks["sqrt"] = finite_difference_check(lambda t: (t["a"].sqrt() * 2.0).sum(), p)

    p = _tensor_params(rng, {"a": (4, 6)})
    p["a"].data += np.sign(p["a"].data) * 0.1  # keep away from the ReLU kink
    checks["relu"] = finite_difference_check(lambda t: (ad.relu(t["a"]) * 1.5).sum(), p)

    p = _tensor_params(rng, {"a": (8,)})
    checks["softplus"] = finite_difference_check(lambda t: ad.softplus(t["a"] * 2.0).sum(), p)

    p = _tensor_params(rng, {"a": (6,)})
    p["a"].data += np.sign(p["a"].data) * 0.1
    checks["clamp_min"] = finite_difference_check(lambda t: (ad.clamp_min(t["a"], 0.0) * 3.0).sum(), p)

    p = _tensor_params(rng, {"a": (3, 4), "b": (4, 2)})
    checks["matmul/transpose"] = finite_difference_check(
        lambda t: (ad.matmul(t["a"], t["b"]) * ad.transpose(ad.matmul(ad.transpose(t["b"]), ad.transpose(t["a"])))).sum(), p)

    p = _tensor_params(rng, {"x": (5, 3), "w": (3, 4), "b": (4,)})
    checks["linear"] = finite_difference_check(
        lambda t: (ad.linear(t["x"], t["w"], t["b"]) ** 2).sum(), p)

    p = _tensor_params(rng, {"a": (4, 7)})
    checks["sum/mean/reshape"] = finite_difference_check(
        lambda t: (t["a"].reshape(7, 4).mean(axis=0) * t["a"].sum(axis=0)).sum(), p)

    idx = np.stack([np.random.default_rng(seed + 1).permutation(7)[:3] for _ in range(4)])
    p = _tensor_params(rng, {"a": (4, 7)})
    checks["gather_rows"] = finite_difference_check(
        lambda t: (ad.gather_rows(t["a"], idx) ** 2).sum(), p)

    p = _tensor_params(rng, {"a": (5, 6)})
    checks["softmax"] = finite_difference_check(
        lambda t: (ad.softmax_rows(t["a"] * 2.0) ** 2).sum(), p)

    p = _tensor_params(rng, {"a": (5, 6)})
    checks["log_softmax"] = finite_difference_check(
        lambda t: (ad.log_softmax_rows(t["a"]) * 0.3).sum(), p)

    p = _tensor_params(rng, {"a": (4, 5)})
    checks["entropy"] = finite_difference_check(
        lambda t: ad.entropy_rows(ad.softmax_rows(t["a"])).sum(), p)

    p = _tensor_params(rng, {"a": (6, 4)})
    p["a"].data += np.sign(p["a"].data)  # rows well away from zero norm
    checks["l2_normalize"] = finite_difference_check(
        lambda t: (ad.l2_normalize_rows(t["a"]) * 0.7).sum(), p)

    p = _tensor_params(rng, {"x": (2, 3, 6, 6), "w": (4, 3, 3, 3)}, scale=0.5)
    checks["conv2d"] = finite_difference_check(
        lambda t: (ad.conv2d(t["x"], t["w"], padding=1) ** 2).mean(), p)

    p = _tensor_params(rng, {"x": (2, 3, 4, 4)})
    checks["avg_pool/gap"] = finite_difference_check(
        lambda t: (ad.global_avg_pool(t["x"]) + ad.avg_pool2d(t["x"], 2).mean(axis=(2, 3))).sum(), p)

    for mode_name, mode in (("running", BnMode.RUNNING_STATS), ("batch", BnMode.BATCH_STATS)):
        rng_bn = np.random.default_rng(seed + 2)
        p = {
            "x": Tensor(_rand(rng_bn, 6, 5), requires_grad=True),
            "gamma": Tensor(1.0 + 0.1 * _rand(rng_bn, 5), requires_grad=True),
            "beta": Tensor(0.1 * _rand(rng_bn, 5), requires_grad=True),
        }
        mean = _rand(rng_bn, 5, scale=0.3)
        var = 1.0 + 0.2 * np.abs(_rand(rng_bn, 5))

        def bn_loss(t, mode=mode, mean=mean, var=var):
            bn = BnState(gamma=t["gamma"], beta=t["beta"],
                         running_mean=mean.astype(t["x"].data.dtype),
                         running_var=var.astype(t["x"].data.dtype))
            out = ad.batchnorm_forward(t["x"], bn, mode)
            return (out * out).sum()

        checks[f"batchnorm[{mode_name}]"] = finite_difference_check(bn_loss, p)

    return checks


def objective_check(seed: int = 0, num_queries: int = 8, num_gallery: int = 20,
                    k: int = 5, lam: float = 1e-4) -> float:
    """FD check of the full objective (mean re-id entropy + lam * squared
    drift) through a three-block vector extractor."""
    rng = np.random.default_rng(seed)
    config = ExtractorConfig(input_kind=VectorInput(dim=8), hidden=(16, 12, 10),
                             feature_dim=6, seed=seed)
    params = build_extractor(config)
    # Perturb away from the fresh initialization so gamma/beta gradients and
    # the drift term are both nonzero.
    for name, t in params.tensors.items():
        t.data += 0.05 * _rand(rng, *t.data.shape)
    params.snapshot_and_mask()
    for name, t in params.tensors.items():
        if params.trainable_mask[name]:
            t.data += 0.03 * _rand(rng, *t.data.shape)

    batch = _rand(rng, num_queries, 8, scale=1.5).astype(np.float32)
    gallery = GalleryStore(_rand(rng, num_gallery, 6, scale=1.2), np.arange(num_gallery))

    base = extract_features(params, batch)
    sims = similarity_matrix(base, gallery)
    frozen_idx = select_galleries(sims.data, k)

    theta0 = {n: a.copy() for n, a in params.theta0.items()}
    mask = dict(params.trainable_mask)

    def loss_fn(tensors: dict[str, Tensor]) -> Tensor:
        view = params.with_tensors(tensors)
        feats = extract_features(view, batch)
        s = similarity_matrix(feats, gallery)
        probs = ad.softmax_rows(ad.gather_rows(s, frozen_idx))
        entropy = ad.entropy_rows(probs).mean()
        drift = None
        dtype = feats.data.dtype
        for name, t in tensors.items():
            if not mask[name]:
                continue
            ref = Tensor(theta0[name].astype(dtype), dtype=dtype)
            term = ((t - ref) * (t - ref)).sum()
            drift = term if drift is None else drift + term
        return entropy + lam * drift

    # Check every parameter, trainable or not: gradients must be correct
    # through the whole depth of the network.
    return finite_difference_check(
        loss_fn, params.tensors, trainable={n: True for n in params.tensors}
    )


def run_gradient_suite(verbose: bool = False, seed: int = 0) -> float:
    """Run all checks; returns the worst max relative error observed."""
    worst = 0.0
    for name, err in primitive_checks(seed).items():
        worst = max(worst, err)
        if verbose:
            print(f"  {name:<22s} max rel err {err:.3e}")
    obj = objective_check(seed)
    worst = max(worst, obj)
    if verbose:
        print(f"  {'full objective':<22s} max rel err {obj:.3e}")
    return worst
