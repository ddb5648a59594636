"""Acceptance criteria 1-10, one PASS/FAIL line each (see the summary section)."""

import hashlib
import math
import os
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from dpkit import autograd as ag
from dpkit import classical, convnet, data, dp_optim
from dpkit.accountant import (PrivacySpec, SubsampleSchedule, calibrate_noise, epsilon_of,
                              rdp_curve, rdp_to_epsilon)
from dpkit.dp_optim import DpTrainConfig, clip_per_sample, privatize
from dpkit.harness import charts, experiments
from dpkit.harness.experiments import TABLE1_ROWS
from dpkit.mechanisms import LaplaceParams, laplace_perturb

DELTA = 1e-5
# listed noise multipliers of the reference grid, row order
TABLE1_SIGMAS = (0.47, 0.47, 0.67, 0.67, 0.67, 0.67, 0.88, 1.07, 0.76, 0.91, 0.91, 0.76, 0.91,
                 0.91, 0.91, 1.21, 0.91, 1.21, 2.81, 0.91)
HEADLINE_SIGMA = 0.912

TINY = (2, 2, 2, 2)
DESK = dict(optimizer="adam", batch_size=40, clip_norm=1.0, learning_rate=3e-3, epochs=5,
            widths=(8, 16, 16, 16))


# ---------------------------------------------------------------- 1

@pytest.mark.criterion(1)
def test_criterion_01_table1_calibration(criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for (opt, batch, eps, clip, lr, epochs, sigma, runs), want in zip(TABLE1_ROWS,
                                                                     TABLE1_SIGMAS):
        assert sigma == want
        got = calibrate_noise(PrivacySpec(eps, DELTA),
                              SubsampleSchedule.from_training(batch, epochs, 50_000)).sigma
        worst = max(worst, abs(got - want))
    headline = calibrate_noise(PrivacySpec(5.0, DELTA),
                               SubsampleSchedule.from_training(256, 100, 50_000)).sigma
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.05 and abs(headline - HEADLINE_SIGMA) <= 0.02 and elapsed < 60
    criterion(1, ok, f"max |sigma - table| = {worst:.4f} (tol 0.05), headline sigma = "
                     f"{headline:.4f} (tol 0.02 of 0.912), {elapsed:.1f} s (budget 60 s)")


# ---------------------------------------------------------------- 2

@pytest.mark.criterion(2)
@pytest.mark.slow
def test_criterion_02_self_consistency(criterion):
    rng = np.random.default_rng(20240)
    misses = []
    for _ in range(200):
        q = float(rng.uniform(1e-4, 0.1))
        epochs = int(rng.integers(1, 201))
        eps = float(rng.uniform(0.5, 30.0))
        schedule = SubsampleSchedule(q, epochs * math.ceil(1 / q))
        nm = calibrate_noise(PrivacySpec(eps, DELTA), schedule)
        got = epsilon_of(nm.sigma, schedule, DELTA)
        if not eps - 0.05 <= got <= eps:
            misses.append((q, schedule.steps, eps, got))
    criterion(2, not misses, f"{200 - len(misses)}/200 schedules with epsilon_of in "
                             f"[eps - 0.05, eps]; misses: {misses[:3]}")


# ---------------------------------------------------------------- 3

@pytest.mark.criterion(3)
def test_criterion_03_classic_conversion(criterion):
    eps, _ = rdp_to_epsilon(rdp_curve(1.0, 1.0), DELTA, mode="classic")
    closed = 0.5 + math.sqrt(2 * math.log(1 / DELTA))
    criterion(3, abs(eps - closed) <= 0.01 and abs(closed - 5.2985) < 1e-4,
              f"classic epsilon {eps:.4f} vs closed-form minimum {closed:.4f} (tol 0.01)")


# ---------------------------------------------------------------- 4

def _loss_and_pattern(flat, x, y):
    params = convnet.ConvNetParams.from_flat(flat, TINY)
    with ag.Tape() as tape:
        loss = ag.softmax_cross_entropy(convnet.forward(params, x), y, reduction="sum")
    pattern = b"".join(np.packbits(n.inputs[0].data > 0).tobytes() for n in tape.nodes
                       if n.op == "relu")
    return loss.item(), pattern


def _fd(flat, i, h, x, y):
    up, down = flat.copy(), flat.copy()
    up[i] += h
    down[i] -= h
    f_up, p_up = _loss_and_pattern(up, x, y)
    f_down, p_down = _loss_and_pattern(down, x, y)
    return (f_up - f_down) / (2 * h), p_up == p_down


@pytest.mark.criterion(4)
def test_criterion_04_gradients(criterion):
    rng = np.random.default_rng(41)
    params = convnet.init(11, TINY)
    x = rng.normal(size=(3, 3, 32, 32))
    y = np.array([0, 4, 9])
    with ag.Tape() as tape:
        loss = ag.softmax_cross_entropy(convnet.forward(params, x), y, reduction="sum")
    analytic = np.concatenate([g.ravel() for g in ag.backward(tape, loss, params.tensors)])
    flat = params.flat()
    fd = np.empty_like(flat)
    for i in range(flat.size):
        h = 1e-5
        fd[i], smooth = _fd(flat, i, h, x, y)
        # shrink the stencil until no ReLU switches inside it
        while not smooth and h > 1e-9:
            h /= 10
            fd[i], smooth = _fd(flat, i, h, x, y)
    rel = np.abs(fd - analytic) / np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), 1e-6)

    with ag.Tape() as tape:
        losses = ag.softmax_cross_entropy(convnet.forward(params, x), y, reduction="none")
    rows = ag.per_sample_backward(tape, losses, params.tensors).rows
    sum_err = np.linalg.norm(rows.sum(axis=0) - analytic) / np.linalg.norm(analytic)
    criterion(4, params.count <= 5000 and rel.max() < 1e-3 and sum_err <= 1e-9,
              f"{params.count} params, max FD relative error {rel.max():.2e} (tol 1e-3), "
              f"per-sample sum relative error {sum_err:.1e} (tol 1e-9)")


# ---------------------------------------------------------------- 5

@pytest.mark.criterion(5)
def test_criterion_05_clipping(criterion):
    rng = np.random.default_rng(5)
    worst = -math.inf
    for _ in range(1000):
        b, d = int(rng.integers(1, 65)), int(rng.integers(1, 300))
        C = float(10 ** rng.uniform(-3, 3))
        rows = rng.normal(size=(b, d)) * 10 ** rng.uniform(-4, 4, size=(b, 1))
        rows[rng.random(b) < 0.1] = 0.0
        out = clip_per_sample(rows, C)
        norms = np.linalg.norm(out, axis=1)
        worst = max(worst, float((norms - C).max()))
        small = np.linalg.norm(rows, axis=1) <= C
        assert np.array_equal(out[small], rows[small])
    criterion(5, worst <= 1e-9, f"max(row norm - C) = {worst:.3e} over 1000 batches (tol 1e-9)")


# ---------------------------------------------------------------- 6

@pytest.mark.criterion(6)
def test_criterion_06_noise_statistics(criterion):
    n = 1_000_000
    rng = np.random.default_rng(6)
    clip, sigma, batch = 0.7, 1.3, 2.0
    gauss = privatize(np.zeros((1, n)), clip, sigma, batch, rng)
    g_ratio = gauss.var() / (sigma * clip / batch) ** 2
    params = LaplaceParams(2.0, 1.0)
    lap = laplace_perturb(np.zeros(n), params, rng)
    l_ratio = lap.var() / (2 * params.scale**2)
    ks = stats.kstest(lap, stats.laplace(scale=params.scale).cdf).statistic
    ok = abs(g_ratio - 1) < 0.02 and abs(l_ratio - 1) < 0.02 and ks < 0.002
    criterion(6, ok, f"Gaussian var ratio {g_ratio:.4f}, Laplace var ratio {l_ratio:.4f} "
                     f"(tol 2%), Laplace KS {ks:.5f} (tol 0.002)")


# ---------------------------------------------------------------- 7

def _brute_knn(X, y, q, k):
    order = sorted(range(len(X)), key=lambda i: (float(np.sum((X[i] - q) ** 2)), i))[:k]
    votes = np.bincount([int(y[i]) for i in order], minlength=10)
    return int(np.flatnonzero(votes == votes.max())[0])


@pytest.mark.criterion(7)
def test_criterion_07_classifiers(criterion):
    rng = np.random.default_rng(7)
    knn_ok = True
    for _ in range(100):
        X = rng.normal(size=(50, 6))
        y = rng.integers(0, 10, size=50)
        train = classical.LabeledVectors(X, y)
        q = rng.normal(size=6)
        knn_ok &= classical.knn_classify(train, q, 10) == _brute_knn(X, y, q, 10)

    X = rng.normal(size=(40, 2))
    y = (X[:, 0] > 0).astype(int)
    model = classical.nbc_fit(classical.LabeledVectors(X, y))
    nbc_err = 0.0
    for qv in rng.normal(size=(20, 2)):
        for c in (0, 1):
            rows = X[y == c]
            mu, var = rows.mean(axis=0), rows.var(axis=0)
            want = math.log(len(rows) / len(X)) + sum(
                -0.5 * math.log(2 * math.pi * var[d]) - (qv[d] - mu[d]) ** 2 / (2 * var[d])
                for d in range(2))
            nbc_err = max(nbc_err, abs(model.joint_log_likelihood(qv)[0, c] - want))

    xor = classical.LabeledVectors([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]], [0, 0, 1, 1])
    rbf = classical.evaluate(classical.svm_fit(xor, classical.KernelSpec("rbf", gamma=1.0)),
                             xor)["accuracy"]
    lin = classical.evaluate(classical.svm_fit(xor, classical.KernelSpec("linear")),
                             xor)["accuracy"]

    class Fixed:
        def __init__(self, pred):
            self.pred = pred

        def predict(self, X):
            return self.pred

    split = classical.LabeledVectors(np.zeros((26, 1)), np.arange(26) % 10)
    identity = all(
        abs(r["loss"] - (1 - r["accuracy"])) < 1e-15
        for r in (classical.evaluate(Fixed(rng.integers(0, 10, size=26)), split)
                  for _ in range(100)))
    table2 = classical.evaluate(Fixed(np.where(np.arange(26) < 6, np.arange(26) % 10, -1)), split)
    identity &= round(table2["loss"], 4) == 0.7692 and round(100 * table2["accuracy"], 2) == 23.08
    ok = knn_ok and nbc_err < 1e-12 and rbf == 1.0 and lin <= 0.75 and identity
    criterion(7, ok, f"KNN exact on 100 instances: {knn_ok}, NBC max error {nbc_err:.1e} "
                     f"(tol 1e-12), XOR rbf {rbf:.2f} / linear {lin:.2f}, "
                     f"loss = 1 - accuracy: {identity}")


# ---------------------------------------------------------------- 8

def _cifar_dir():
    root = os.environ.get("DPKIT_DATA_DIR")
    if not root:
        return None
    root = Path(root)
    for d in (root, root / "cifar-10-batches-bin"):
        if all((d / f).is_file() for f in data.TRAIN_FILES + (data.TEST_FILE,)):
            return d
    return None


def _sanity(train, test, widths, np_epochs, dp_epochs, np_lr):
    nonprivate = DpTrainConfig(optimizer="adam", batch_size=256, epsilon=math.inf,
                               clip_norm=1e9, learning_rate=np_lr, epochs=np_epochs,
                               noise_multiplier=0.0, widths=widths)
    best = max(r.test_acc for r in dp_optim.train(nonprivate, None, (train, test), "np"))
    private = DpTrainConfig(optimizer="adam", batch_size=256, epsilon=5.0, clip_norm=1.0,
                            learning_rate=1e-3, epochs=dp_epochs, widths=widths)
    spent = [r.epsilon_spent for r in dp_optim.train(private, None, (train, test), "dp")]
    return best, spent


@pytest.mark.criterion(8)
@pytest.mark.slow
def test_criterion_08_desk_training(criterion):
    t0 = time.perf_counter()
    # synthetic stand-in, always run: 1000 images, so batch 256 is a real subsample
    train, test = data.make_synthetic_pair(10, 100, 4.0, seed=8, test_per_class=20)
    best, spent = _sanity(train, test, (4, 8, 8, 8), 10, 3, 1e-2)
    ok = best >= 0.35 and len(spent) == 3 and max(spent) <= 5.05
    detail = (f"synthetic: non-private best test acc {best:.3f} in 10 epochs (need 0.35), "
              f"eps-spent max {max(spent):.3f} (cap 5.05)")
    cifar = _cifar_dir()
    if cifar is None:
        detail += "; CIFAR-10 not found under DPKIT_DATA_DIR, real-data run skipped"
    else:
        ctrain, ctest = data.load_cifar10(cifar, train_subset=5000)
        cbest, cspent = _sanity(ctrain, ctest, convnet.DEFAULT_WIDTHS, 10, 10, 1e-3)
        ok &= cbest >= 0.35 and len(cspent) == 10 and max(cspent) <= 5.05
        detail += (f"; CIFAR-10 5000: non-private best test acc {cbest:.3f}, "
                   f"eps-spent max {max(cspent):.3f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 30 * 60
    criterion(8, ok, detail + f", {elapsed:.0f} s (budget 1800 s)")


# ---------------------------------------------------------------- 9

def _desk_accuracy(epsilon, seeds=(0, 1, 2), **overrides):
    pair = data.make_synthetic_pair(10, 40, 4.0, seed=1, test_per_class=20)
    accs = []
    for s in seeds:
        cfg = DpTrainConfig(**{**DESK, **overrides, "epsilon": epsilon, "seed": s})
        accs.append(dp_optim.train(cfg, None, pair, f"eps{epsilon}")[-1].test_acc)
    return float(np.mean(accs))


@pytest.mark.criterion(9)
@pytest.mark.slow
def test_criterion_09_epsilon_direction(criterion):
    means = [_desk_accuracy(eps) for eps in (20.0, 5.0, 1.0)]
    rises = [b - a for a, b in zip(means, means[1:]) if b > a]
    ok = len(rises) <= 1 and all(r <= 0.02 for r in rises)
    criterion(9, ok, "mean final test acc over 3 seeds at eps 20/5/1: "
                     + " / ".join(f"{m:.3f}" for m in means) + " (one rise of <= 0.02 allowed)")


@pytest.mark.slow
def test_batch_size_direction_soft():
    # directional only at desk scale: a miss is a warning, never a failure
    small = _desk_accuracy(5.0, seeds=(0,), batch_size=20)
    large = _desk_accuracy(5.0, seeds=(0,), batch_size=80)
    if large < small:
        warnings.warn(f"batch 80 did not beat batch 20 at eps 5 ({large:.3f} < {small:.3f})")


# ---------------------------------------------------------------- 10

@pytest.mark.criterion(10)
def test_criterion_10_determinism(criterion, tmp_path):
    specs = [experiments.ExperimentSpec(
        f"d{i}", DpTrainConfig(optimizer=opt, batch_size=32, epsilon=eps, clip_norm=1.0,
                               learning_rate=1e-3, epochs=2, seed=3, runs=2,
                               widths=(4, 8, 8, 8)), "convnet:4,8,8,8", "synthetic", 100)
        for i, (opt, eps) in enumerate([("adam", 5.0), ("sgd", 2.0)])]
    digests = []
    for name in ("a", "b"):
        csv_path = tmp_path / f"{name}.csv"
        result = experiments.run_grid(specs, csv_path)
        assert not result.failures
        svg_path = tmp_path / f"{name}.svg"
        charts.report(csv_path, svg_path, metadata_path=result.metadata_path)
        digests.append((hashlib.sha256(csv_path.read_bytes()).hexdigest(),
                        hashlib.sha256(svg_path.read_bytes()).hexdigest()))
    same_svg = charts.report(tmp_path / "a.csv") == charts.report(tmp_path / "a.csv")
    ok = digests[0] == digests[1] and same_svg
    criterion(10, ok, f"grid CSV sha256 {digests[0][0][:12]} vs {digests[1][0][:12]}, "
                      f"report SVG sha256 {digests[0][1][:12]} vs {digests[1][1][:12]}")
