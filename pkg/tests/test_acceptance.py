"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``; the verdicts are
collected in the "acceptance criteria" section of the terminal summary.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from mrfuse import tensor as T
from mrfuse.checkpoint import Checkpoint
from mrfuse.meanfield import FusionConfig, free_energy, fuse_forward, mean_field_sweep, normalize_logits
from mrfuse.model import build_model
from mrfuse.mrf import MRFKernel, build_mrf_net, mrf_overhead_ratio, zero_mrf_net
from mrfuse.oracle import enumerate_product, exact_kl, exact_marginals
from mrfuse.phantom import PhantomSpec
from mrfuse.studies import capacity_study, convergence_study, make_dataset
from mrfuse.tensor import GradTape, Tensor, precision
from mrfuse.training import TrainConfig, sample_rng, train, write_metrics_csv
from mrfuse.unet import UNetConfig
from mrfuse.volume import one_hot

from oracles import central_difference, relative_error

# phantom task shared by the convergence and capacity criteria
PHANTOM = PhantomSpec(shape=(16, 16, 16), k=2)
CONVERGENCE_TRAIN = dict(n_train=24, epochs=100)
CAPACITY = dict(j_list=(1, 2), seeds=(0, 1, 2), n_train=16, n_val=2, n_test=4, epochs=30)


def random_simplex(rng, k, spatial):
    r = rng.random((k,) + tuple(spatial)) + 1e-3
    return r / r.sum(axis=0, keepdims=True)


def test_criterion_01_factorized_case(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    with precision("f64"):
        for _ in range(100):
            grid = tuple(int(g) for g in rng.integers(1, 3, size=3))
            k = int(rng.integers(2, 4))
            U = Tensor(rng.normal(size=(k,) + grid) * 2.0)
            R = fuse_forward(U, MRFKernel.zeros(k), n_iter=1).R.data
            exact = exact_marginals(enumerate_product(normalize_logits(U), MRFKernel.zeros(k)))
            worst = max(worst, float(np.abs(R - exact).max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8 and elapsed < 10
    assert report(1, "factorized case equals exact marginals", ok,
                  f"max L-inf {worst:.2e} (< 1e-8) over 100 instances, {elapsed:.2f}s (< 10s)")


def test_criterion_02_offset_constancy(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    with precision("f64"):
        U = normalize_logits(Tensor(rng.normal(size=(2, 2, 2, 1))))
        kernel = MRFKernel.random_symmetric(2, rng, 1.0, "full")
        dist = enumerate_product(U, kernel)
        gaps = np.array([exact_kl(r, dist) - free_energy(U, r, kernel)
                         for r in (random_simplex(rng, 2, (2, 2, 1)) for _ in range(100))])
    spread = float(np.ptp(gaps))
    elapsed = time.perf_counter() - t0
    ok = spread < 1e-8 and elapsed < 10
    assert report(2, "KL(q||p) - F(q) constant in q", ok,
                  f"spread {spread:.2e} (< 1e-8), offset {gaps.mean():.6f} vs ln Z {dist.log_z:.6f}, "
                  f"{elapsed:.2f}s (< 10s)")


def test_criterion_03_checkerboard_monotonicity(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    increases, worst = 0, -np.inf
    with precision("f64"):
        for _ in range(100):
            k = int(rng.integers(2, 5))
            spatial = tuple(int(s) for s in rng.integers(2, 7, size=3))
            U = normalize_logits(Tensor(rng.normal(size=(k,) + spatial) * 2.0))
            # symmetric kernel on offsets that join opposite parities
            kernel = MRFKernel.random_symmetric(k, rng, float(rng.uniform(0.1, 3.0)), "odd")
            R = Tensor(random_simplex(rng, k, spatial))
            prev = free_energy(U, R, kernel)
            for _ in range(20):
                R = mean_field_sweep(U, R, kernel, "checkerboard")
                cur = free_energy(U, R, kernel)
                worst = max(worst, cur - prev)
                increases += cur - prev > 1e-10
                prev = cur
    elapsed = time.perf_counter() - t0
    ok = increases == 0 and elapsed < 30
    assert report(3, "checkerboard sweeps never raise the free energy", ok,
                  f"{increases} increases > 1e-10 in 100x20 sweeps (largest change {worst:+.2e}), "
                  f"{elapsed:.2f}s (< 30s)")


def test_criterion_04_fixed_point(report):
    rng = np.random.default_rng(404)
    worst = 0.0
    with precision("f64"):
        for _ in range(10):
            k = int(rng.integers(2, 5))
            U = normalize_logits(Tensor(rng.normal(size=(k, 8, 8, 8)) * 2.0))
            kernel = MRFKernel.random_symmetric(k, rng, 0.5, "full")
            res = fuse_forward(U, kernel, FusionConfig(schedule="checkerboard", convergence_tol=1e-14),
                               n_iter=10_000)
            R = res.R
            update = T.softmax_channels(T.add(U, kernel.message(R)))
            worst = max(worst, float(np.abs(update.data - R.data).max()))
    ok = worst < 1e-8
    assert report(4, "converged R = softmax(U_log + message(R))", ok,
                  f"max L-inf residual {worst:.2e} (< 1e-8) over 10 instances")


def test_criterion_05_gradient_check(report):
    t0 = time.perf_counter()
    with precision("f64"):
        model = build_model(j=1, k=2, seed=55)
        rng = np.random.default_rng(505)
        # non-zero MRF biases so every MRF parameter carries signal
        model.mrf.b1.data[:] = rng.normal(size=model.mrf.b1.data.shape) * 0.1
        model.mrf.b2.data[:] = rng.normal(size=model.mrf.b2.data.shape) * 0.1
        x = Tensor(rng.normal(size=(1, 4, 4, 4)))
        target = one_hot(rng.integers(0, 2, size=(1, 4, 4, 4)), 2)

        def loss_value():
            return T.cross_entropy(model.forward(x, n_iter=3).log_R, target).item()

        with GradTape() as tape:
            loss = T.cross_entropy(model.forward(x, n_iter=3).log_R, target)
        tape.backward(loss)
        worst, worst_name, checked, failures = 0.0, "", 0, 0
        for name, t in model.named_parameters():
            grad = t.grad.reshape(-1) if t.grad is not None else np.zeros(t.data.size)
            for i, num in central_difference(loss_value, t.data).items():
                err = relative_error(grad[i], num)
                checked += 1
                failures += err >= 1e-4
                if err > worst:
                    worst, worst_name = err, f"{name}[{i}]"
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and elapsed < 300
    assert report(5, "analytic gradients match central differences", ok,
                  f"{checked} parameters, {failures} above 1e-4, worst {worst:.2e} at {worst_name}, "
                  f"{elapsed:.0f}s (< 300s)")


def test_criterion_06_zero_mrf_reduction(report):
    rng = np.random.default_rng(606)
    model = build_model(j=1, k=4, seed=6)
    zeroed = replace(model, mrf=zero_mrf_net(4))
    baseline = replace(model, mrf=None)
    image = Tensor(rng.normal(size=(1, 16, 16, 16)))
    reference = baseline.forward(image).R.data
    worst = 0.0
    for n in (0, 1, 2, 3, 5, 10, 15, 20):
        worst = max(worst, float(np.abs(zeroed.forward(image, n_iter=n).R.data - reference).max()))
    for s in range(3):
        r = zeroed.forward(image, mode="train", rng=np.random.default_rng(s)).R.data
        worst = max(worst, float(np.abs(r - reference).max()))
    ok = worst < 1e-6
    assert report(6, "zeroed MRF reduces to the baseline UNet", ok,
                  f"max L-inf {worst:.2e} (< 1e-6) for n in 0..20 and train-mode draws")


def test_criterion_07_iteration_law(report):
    U = Tensor(np.zeros((2, 1, 1, 1)))
    kernel = MRFKernel.zeros(2)
    draws = np.array([fuse_forward(U, kernel, mode="train", rng=sample_rng(7, 1, i)).n_iter
                      for i in range(10_000)])
    freq = np.bincount(draws, minlength=16)[5:16] / draws.size
    outside = int(((draws < 5) | (draws > 15)).sum())
    dev = float(np.abs(freq - 1 / 11).max())
    ok = outside == 0 and dev <= 0.01
    assert report(7, "training-mode sweep counts are uniform on 5..15", ok,
                  f"max |freq - 1/11| = {dev:.4f} (<= 0.01), {outside} draws outside 5..15")


@pytest.fixture(scope="module")
def convergence_model():
    t0 = time.perf_counter()
    train_set = make_dataset(PHANTOM, CONVERGENCE_TRAIN["n_train"], 81, "train")
    val_set = make_dataset(PHANTOM, 2, 82, "val")
    test_set = make_dataset(PHANTOM, 4, 83, "test")
    result = train(build_model(j=1, k=PHANTOM.k, seed=8), train_set, val_set,
                   TrainConfig(epochs=CONVERGENCE_TRAIN["epochs"], seed=8))
    return result.best.to_model(), test_set, time.perf_counter() - t0


def test_criterion_08_convergence_study(report, convergence_model):
    model, test_set, train_time = convergence_model
    t0 = time.perf_counter()
    rows = convergence_study(model, {"test_in": test_set}, max_iter=20)
    study_time = time.perf_counter() - t0
    dice = np.array([r["mean_dice"] for r in rows])
    gap = float(dice.max() - dice[10])
    ok = gap < 0.005 and dice[10] >= dice[0] and train_time <= 900 and study_time <= 120
    assert report(8, "Dice plateaus by 10 sweeps", ok,
                  f"Dice(0) {dice[0]:.4f}, Dice(10) {dice[10]:.4f}, max {dice.max():.4f} at n={int(dice.argmax())} "
                  f"(gap {gap:.4f} < 0.005); training {train_time:.0f}s (<= 900s), study {study_time:.0f}s (<= 120s)")


def test_criterion_09_capacity_trend(report):
    t0 = time.perf_counter()
    cfg = TrainConfig(epochs=CAPACITY["epochs"])
    rows = capacity_study(CAPACITY["j_list"], CAPACITY["seeds"], PHANTOM, cfg, n_train=CAPACITY["n_train"],
                          n_val=CAPACITY["n_val"], n_test=CAPACITY["n_test"])
    elapsed = time.perf_counter() - t0
    ok, parts = elapsed <= 3600, []
    for j in CAPACITY["j_list"]:
        unet = {r["seed"]: r["dice_out"] for r in rows if r["j"] == j and r["model"] == "unet"}
        mrf = {r["seed"]: r["dice_out"] for r in rows if r["j"] == j and r["model"] == "mrf_unet"}
        mean_u, mean_m = np.mean(list(unet.values())), np.mean(list(mrf.values()))
        wins = sum(mrf[s] > unet[s] for s in unet)
        ok &= mean_m >= mean_u - 0.01
        if j == 1:
            ok &= wins >= 2
        parts.append(f"j={j}: OOD Dice MRF-UNet {mean_m:.4f} vs UNet {mean_u:.4f}, wins {wins}/{len(unet)}")
    assert report(9, "MRF-UNet is at least as robust out of distribution", bool(ok),
                  "; ".join(parts) + f"; {elapsed:.0f}s (<= 3600s)")


def test_criterion_10_parameter_overhead(report):
    net = build_mrf_net(4, 0)
    r1 = mrf_overhead_ratio(net, UNetConfig(j=1, k=4))
    r6 = mrf_overhead_ratio(net, UNetConfig(j=6, k=4))
    ok = r1 < 0.025 and r6 < 1e-4
    assert report(10, "MRF parameter overhead", ok, f"ratio {r1:.5f} at j=1 (< 0.025), {r6:.2e} at j=6 (< 1e-4)")


def test_criterion_11_determinism_and_persistence(report, tmp_path):
    spec = PhantomSpec(shape=(8, 8, 8), k=2)
    train_set, val_set = make_dataset(spec, 3, 111, "train"), make_dataset(spec, 1, 112, "val")
    csvs, models = [], []
    for run in range(2):
        res = train(build_model(j=1, k=2, seed=11), train_set, val_set, TrainConfig(epochs=3, seed=11))
        path = tmp_path / f"metrics{run}.csv"
        write_metrics_csv(path, res.rows, 2)
        csvs.append(path.read_bytes())
        models.append(res.model)
    same_csv = csvs[0] == csvs[1]
    image = Tensor(val_set[0].image)
    before = models[0].forward(image).R.data
    Checkpoint.from_model(models[0]).save(tmp_path / "m.mrfu")
    after = Checkpoint.load(tmp_path / "m.mrfu").to_model().forward(image).R.data
    same_forward = before.tobytes() == after.tobytes()
    assert report(11, "seeded runs and checkpoints are reproducible", same_csv and same_forward,
                  f"metrics CSVs byte-identical: {same_csv}; forward after save/load bit-identical: {same_forward}")
