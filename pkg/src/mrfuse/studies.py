"""Phantom datasets and the two analysis studies (iteration sweep, capacity sweep)."""

from __future__ import annotations

import logging
from dataclasses import replace
from typing import Callable, Optional, Sequence

import numpy as np

from .meanfield import FusionConfig
from .model import MRFUNet, build_model
from .mrf import mrf_overhead_ratio
from .phantom import PhantomSpec, generate_phantom
from .training import Sample, TrainConfig, evaluate, train
from .unet import param_count

logger = logging.getLogger(__name__)


def make_dataset(spec: PhantomSpec, count: int, seed: int, prefix: str = "case") -> list[Sample]:
    """``count`` phantoms whose per-case seeds are spawned from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(count)
    out = []
    for i, child in enumerate(children):
        image, labels = generate_phantom(spec, int(child.generate_state(1)[0]))
        out.append(Sample(image, labels, f"{prefix}{i:03d}"))
    return out


def regime_splits(spec: PhantomSpec, n_train: int, n_val: int, n_test: int, seed: int) -> dict[str, list[Sample]]:
    """Train/val/in-distribution test sets plus an out-of-distribution test set.

    The out_dist cases reuse the label geometry of the in_dist test cases, so
    the two test splits differ only in their intensity regime.
    """
    s_train, s_val, s_test = np.random.SeedSequence(seed).spawn(3)
    seed_of = lambda s: int(s.generate_state(1)[0])  # noqa: E731
    base = spec.with_regime("in_dist")
    return {
        "train": make_dataset(base, n_train, seed_of(s_train), "train"),
        "val": make_dataset(base, n_val, seed_of(s_val), "val"),
        "test_in": make_dataset(base, n_test, seed_of(s_test), "test"),
        "test_out": make_dataset(base.with_regime("out_dist"), n_test, seed_of(s_test), "test"),
    }


def convergence_study(model: MRFUNet, splits: dict[str, Sequence[Sample]], max_iter: int = 20) -> list[dict]:
    """Mean Dice for every sweep count ``n = 0..max_iter``, one row per (split, n)."""
    if max_iter < 0:
        raise ValueError("max_iter must be non-negative")
    rows = []
    for split, samples in splits.items():
        for n in range(max_iter + 1):
            per_sample = evaluate(model, samples, n_iter=n)
            row = {"split": split, "n_iter": n}
            for c in range(model.k):
                row[f"dice_{c}"] = float(np.mean([r[f"dice_{c}"] for r in per_sample]))
            row["mean_dice"] = float(np.mean([r["mean_dice"] for r in per_sample]))
            rows.append(row)
    return rows


CAPACITY_COLUMNS = ["j", "seed", "model", "unet_params", "mrf_params", "overhead_ratio", "epochs",
                    "best_val_loss", "dice_in", "dice_out"]


def capacity_study(j_list: Sequence[int], seeds: Sequence[int], spec: PhantomSpec, train_config: TrainConfig,
                   n_train: int = 6, n_val: int = 2, n_test: int = 4, fusion: Optional[FusionConfig] = None,
                   progress: Optional[Callable[[dict], None]] = None,
                   splits: Optional[dict[str, Sequence[Sample]]] = None) -> list[dict]:
    """Train a baseline UNet and an MRF-UNet for every (j, seed) and score both regimes.

    Both models of a cell share data, UNet initialisation and training
    seed; they differ only in the fusion head.  Without ``splits`` every
    seed gets its own phantom splits from ``regime_splits``.
    """
    rows = []
    fixed_splits = splits
    for j in j_list:
        for seed in seeds:
            splits = fixed_splits or regime_splits(spec, n_train, n_val, n_test, seed)
            cfg = replace(train_config, seed=seed)
            for use_mrf in (False, True):
                model = build_model(j=j, k=spec.k, seed=seed, use_mrf=use_mrf, fusion=fusion)
                result = train(model, splits["train"], splits["val"], cfg)
                best = result.best.to_model()
                n_unet = param_count(best.unet.config)
                n_mrf = best.param_count()["mrf"]
                row = {
                    "j": j, "seed": seed, "model": "mrf_unet" if use_mrf else "unet",
                    "unet_params": n_unet, "mrf_params": n_mrf,
                    "overhead_ratio": mrf_overhead_ratio(best.mrf, best.unet.config) if use_mrf else 0.0,
                    "epochs": cfg.epochs,
                    "best_val_loss": float(result.best.state["best_val_loss"]),
                    "dice_in": float(np.mean([r["mean_dice"] for r in evaluate(best, splits["test_in"])])),
                    "dice_out": float(np.mean([r["mean_dice"] for r in evaluate(best, splits["test_out"])])),
                }
                logger.info("capacity j=%d seed=%d %s: in %.4f out %.4f", j, seed, row["model"],
                            row["dice_in"], row["dice_out"])
                rows.append(row)
                if progress is not None:
                    progress(row)
    return rows


# --- exact-oracle invariant suite -----------------------------------------------

ORACLE_CHECKS = ("factorized", "offset_constancy", "fixed_point", "monotonicity")
ORACLE_TOLERANCES = {"factorized": 1e-10, "offset_constancy": 1e-8, "fixed_point": 1e-8, "monotonicity": 1e-10}


def _random_simplex(rng: np.random.Generator, k: int, spatial) -> np.ndarray:
    r = rng.random((k,) + tuple(spatial)) + 1e-3
    return r / r.sum(axis=0, keepdims=True)


def oracle_check(grid=(2, 2, 1), k: int = 2, trials: int = 100, seed: int = 0,
                 samples_per_trial: int = 20, sweeps: int = 20) -> list[dict]:
    """Run the mean-field invariants against exact enumeration in 64-bit.

    Per trial: one sweep with a zero kernel must reproduce the exact
    marginals; ``KL(q || p) - F(q)`` must not depend on q; a converged
    checkerboard run must be a fixed point of the update; checkerboard
    sweeps with a parity-respecting symmetric kernel must never raise F.
    Returns one row per check with the worst deviation seen.
    """
    from .meanfield import free_energy, fuse_forward, mean_field_sweep, normalize_logits
    from .mrf import MRFKernel
    from .oracle import MAX_CONFIGS, enumerate_product, exact_kl, exact_marginals
    from .tensor import Tensor, precision

    grid = tuple(int(g) for g in grid)
    if len(grid) != 3 or min(grid) < 1:
        raise ValueError(f"grid must have three positive extents, got {grid}")
    if k ** int(np.prod(grid)) > MAX_CONFIGS:
        raise ValueError(f"{k}**{int(np.prod(grid))} configurations exceed the enumeration budget")
    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(ORACLE_CHECKS, 0.0)
    violations = dict.fromkeys(ORACLE_CHECKS, 0)
    with precision("f64"):
        for _ in range(trials):
            U_log = normalize_logits(Tensor(rng.normal(size=(k,) + grid) * 1.5))

            zero = MRFKernel.zeros(k)
            R1 = fuse_forward(U_log, zero, n_iter=1).R.data
            dev = float(np.abs(R1 - exact_marginals(enumerate_product(U_log, zero))).max())
            worst["factorized"] = max(worst["factorized"], dev)
            violations["factorized"] += dev > ORACLE_TOLERANCES["factorized"]

            kernel = MRFKernel.random_symmetric(k, rng, 1.0, "full")
            dist = enumerate_product(U_log, kernel)
            gaps = [exact_kl(r, dist) - free_energy(U_log, r, kernel)
                    for r in (_random_simplex(rng, k, grid) for _ in range(samples_per_trial))]
            dev = float(np.ptp(gaps))
            worst["offset_constancy"] = max(worst["offset_constancy"], dev)
            violations["offset_constancy"] += dev > ORACLE_TOLERANCES["offset_constancy"]

            cfg = FusionConfig(schedule="checkerboard", convergence_tol=1e-13)
            R = fuse_forward(U_log, kernel, cfg, n_iter=5000).R
            dev = float(np.abs(mean_field_sweep(U_log, R, kernel, "checkerboard").data - R.data).max())
            worst["fixed_point"] = max(worst["fixed_point"], dev)
            violations["fixed_point"] += dev > ORACLE_TOLERANCES["fixed_point"]

            odd = MRFKernel.random_symmetric(k, rng, 1.5, "odd")
            R = Tensor(_random_simplex(rng, k, grid))
            prev = free_energy(U_log, R, odd)
            for _ in range(sweeps):
                R = mean_field_sweep(U_log, R, odd, "checkerboard")
                cur = free_energy(U_log, R, odd)
                rise = cur - prev
                worst["monotonicity"] = max(worst["monotonicity"], rise)
                violations["monotonicity"] += rise > ORACLE_TOLERANCES["monotonicity"]
                prev = cur
    return [{"check": c, "trials": trials, "max_deviation": worst[c], "tolerance": ORACLE_TOLERANCES[c],
             "violations": int(violations[c]), "passed": violations[c] == 0} for c in ORACLE_CHECKS]
