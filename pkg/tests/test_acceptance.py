"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``python3 -m pytest tests/test_acceptance.py -v`` or
``python3 tests/test_acceptance.py``.
"""

import dataclasses
import math
import os
import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from dance.conformal import (
    DETERMINISTIC,
    DISJOINT,
    REUSE,
    ScoreConfig,
    choose_lambda,
    conformal_quantile,
    score_clr,
    score_knn,
    select_lambda,
)
from dance.data import EmbeddedDataset, partition, synth_gaussian_mixture
from dance.experiment import (
    ExperimentConfig,
    SyntheticSpec,
    branch_sets,
    concat,
    fit_pipeline,
    monte_carlo_coverage,
    subseed,
)
from dance.kernels import KernelParams, psd_sqrt
from dance.neighbors import build_index
from dance.rfm import KrrModel, RfmConfig, agop, krr_fit, krr_predict, predictor_gradient, rfm_train

TRIALS = 500
LAMBDA_GRID = tuple(round(0.1 * i, 1) for i in range(11))

# c=5, d=8; 2000 rows split 1001 / 499 / 500 into support / calibration / test
MIXTURE = SyntheticSpec(classes=5, dim=8, per_class=400, noise_sigma=0.5, seed=0)
MIXTURE_SPLIT = (0.5005, 0.2495, 0.25)

# anisotropic: 3 of 16 coordinates carry the class means
ANISOTROPIC = SyntheticSpec(classes=5, dim=16, per_class=400, noise_sigma=0.5, informative_dims=3, seed=0)


@pytest.fixture
def report(capsys):
    """Print one PASS/FAIL line past output capture, then assert."""

    def emit(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return emit


@pytest.fixture(scope="module")
def mixture():
    start = time.perf_counter()
    config = ExperimentConfig(synthetic=MIXTURE, alpha=0.1, lam=0.0, mode=DISJOINT,
                              split_ratios=MIXTURE_SPLIT, methods=("knn_only",), seed=0)
    fitted = fit_pipeline(config)
    assert (len(fitted.cal), len(fitted.test)) == (499, 500)
    return fitted, time.perf_counter() - start


def mc(fitted, trials=TRIALS, **changes):
    config = dataclasses.replace(fitted.config, **changes)
    return monte_carlo_coverage(config, trials, fitted)


# 1 ---------------------------------------------------------------------------

def test_criterion_01_rank_branch_coverage_sandwich(mixture, report):
    fitted, fit_seconds = mixture
    start = time.perf_counter()
    res = mc(fitted, methods=("knn_only",))["knn_only"]
    seconds = fit_seconds + time.perf_counter() - start
    se = res.std / math.sqrt(TRIALS)
    ok = 0.895 <= res.mean <= 0.907 and seconds < 180
    report(1, ok, f"mean coverage {res.mean:.4f} (MC s.e. {se:.4f}) in [0.895, 0.907]; "
                  f"{TRIALS} trials, {seconds:.1f}s including the fit")


# 2 ---------------------------------------------------------------------------

def test_criterion_02_dance_coverage_for_every_lambda(mixture, report):
    fitted, _ = mixture
    means = {lam: mc(fitted, methods=("dance",), lam=lam)["dance"].mean
             for lam in sorted(set(LAMBDA_GRID) | {0.25, 0.5, 0.75})}
    worst = min(means, key=means.get)
    ok = all(v >= 0.895 for v in means.values())
    report(2, ok, f"DANCE coverage at 0.25/0.5/0.75: {means[0.25]:.4f}/{means[0.5]:.4f}/{means[0.75]:.4f}; "
                  f"minimum over the 0.1 grid {means[worst]:.4f} at lambda={worst}")


# 3 ---------------------------------------------------------------------------

def test_criterion_03_intersection_bound(mixture, report):
    fitted, _ = mixture
    pool = concat(fitted.cal, fitted.test)
    points = violations = 0
    for mode in (DISJOINT, REUSE):
        f = dataclasses.replace(fitted, config=dataclasses.replace(fitted.config, mode=mode, methods=("dance",)))
        for t in range(3):
            order = np.random.default_rng(subseed(7, t)).permutation(len(pool))
            cal, test = pool.subset(np.sort(order[:499])), pool.subset(np.sort(order[499:]))
            for lam in LAMBDA_GRID:
                sets = branch_sets(f, cal, test, lam_override=lam)
                size = {k: v.sum(axis=1) for k, v in sets.items()}
                violations += int(np.sum(size["dance"] > np.minimum(size["knn"], size["clr"])))
                violations += int(np.sum(sets["dance"] & ~(sets["knn"] & sets["clr"])))
                points += len(test)
    report(3, violations == 0, f"{violations} violations over {points} test points "
                               f"(2 modes x 3 partitions x 11 lambdas)")


# 4 ---------------------------------------------------------------------------

def test_criterion_04_gradient_and_agop(report):
    rng = np.random.default_rng(4)
    n, d, c = 20, 5, 3
    a = rng.standard_normal((d, d))
    m = a @ a.T / d + 0.1 * np.eye(d)
    root = psd_sqrt(m)
    x = rng.standard_normal((n, d))
    model = KrrModel(x, rng.standard_normal((n, c)), KernelParams(m, 2.0, 1.3), 0.0)
    queries = []
    while len(queries) < 100:
        z = 1.5 * rng.standard_normal(d)
        if np.min(np.linalg.norm((x - z) @ root, axis=1)) >= 1e-3:
            queries.append(z)
    h = 1e-5
    worst = 0.0
    for z in queries:
        g = predictor_gradient(model, z)
        fd = np.empty_like(g)
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            fd[j] = (krr_predict(model, z + e)[0] - krr_predict(model, z - e)[0]) / (2 * h)
        worst = max(worst, np.max(np.abs(g - fd)) / np.max(np.abs(fd)))
    sample = np.array(queries[:30])
    naive = np.zeros((d, d))
    for z in sample:
        g = predictor_gradient(model, z)
        for k in range(c):
            naive += np.outer(g[:, k], g[:, k])
    naive /= len(sample)
    agop_err = np.max(np.abs(agop(model, sample) - naive))
    ok = worst < 1e-4 and agop_err <= 1e-10
    report(4, ok, f"gradient max relative error {worst:.2e} (< 1e-4) over 100 queries; "
                  f"AGOP vs loop max abs error {agop_err:.2e} (<= 1e-10)")


# 5 ---------------------------------------------------------------------------

def test_criterion_05_krr_interpolation(report):
    rng = np.random.default_rng(5)
    z = []
    while len(z) < 30:
        p = rng.uniform(-2, 2, 3)
        if all(np.linalg.norm(p - q) >= 0.1 for q in z):
            z.append(p)
    z = np.array(z)
    y = np.eye(4)[rng.integers(0, 4, 30)]
    model = krr_fit(z, y, KernelParams.identity(3, 1.0, 1.0), 1e-10)
    err = np.max(np.abs(krr_predict(model, z) - y))
    report(5, err < 1e-6, f"training max abs error {err:.2e} (< 1e-6), ridge 1e-10, 30 points")


# 6 ---------------------------------------------------------------------------

def test_criterion_06_rfm_feature_recovery(report):
    data = synth_gaussian_mixture(5, 20, 200, 0.2, informative_dims=2, seed=0)
    tr, va = partition(len(data), (0.8, 0.2), 0)
    train, val = data.subset(tr), data.subset(va)
    init = KernelParams.identity(20, 10.0, 1.0)
    model = rfm_train(train, val, init, RfmConfig(iterations=5), ridge=0.1)
    base = krr_fit(train.embeddings, train.one_hot(), init, 0.1)
    base_acc = float(np.mean(np.argmax(krr_predict(base, val.embeddings), axis=1) == val.labels))
    m = model.learned_feature_matrix
    share = np.trace(m[:2, :2]) / np.trace(m)
    ok = share > 0.8 and model.validation_accuracy >= base_acc
    report(6, ok, f"informative trace share {share:.3f} (> 0.8) at iteration {model.selected_iteration}; "
                  f"val accuracy {model.validation_accuracy:.3f} vs {base_acc:.3f} with M=I")


# 7 ---------------------------------------------------------------------------

def exact_sq(u, m):
    """Squared M-norm of an integer vector with an integer M, in exact arithmetic."""
    u = [int(v) for v in u]
    return sum(u[i] * int(m[i][j]) * u[j] for i in range(len(u)) for j in range(len(u)))


def brute_rank(ref2, labels, m, z2, y, m_knn):
    # coordinates are doubled so half-integer queries stay integral
    order = sorted(range(len(ref2)), key=lambda i: (exact_sq(z2 - ref2[i], m), i))
    for k in range(1, m_knn + 1):
        if y in {int(labels[i]) for i in order[:k]}:
            return float(k), order
    return math.inf, order


def brute_contrastive(ref2, labels, m, y, m_clr, bandwidth, shape, tau, order):
    support = order[:m_clr]
    anchor = ref2[support[0]]
    dist = []
    for i in support:
        r = math.sqrt(exact_sq(ref2[i] - anchor, m)) / 2.0
        dist.append(2.0 * (1.0 - math.exp(-((r / bandwidth) ** (1.0 / shape)))))
    top = max(-v / tau for v in dist)
    log_norm = top + math.log(sum(math.exp(-v / tau - top) for v in dist))
    losses = [log_norm + v / tau for v, i in zip(dist, support) if labels[i] == y]
    return min(losses) if losses else math.inf


def test_criterion_07_score_oracles(report):
    rng = np.random.default_rng(7)
    knn_bad = clr_bad = 0
    worst = 0.0
    for _ in range(200):
        n, d, c = int(rng.integers(2, 51)), int(rng.integers(1, 5)), int(rng.integers(2, 6))
        # integer grid points and an integer M: many exact distance ties
        ref2 = 2 * rng.integers(-3, 4, size=(n, d))
        z2 = 2 * rng.integers(-3, 4, size=d) + rng.integers(0, 2, size=d)
        labels = rng.integers(0, c, n)
        a = rng.integers(-2, 3, size=(d, d))
        m = a @ a.T + np.eye(d, dtype=np.int64)
        index = build_index(EmbeddedDataset(ref2 / 2.0, labels, c), m.astype(float))
        kernel = KernelParams(m.astype(float), float(rng.uniform(0.3, 5)), float(rng.uniform(0.5, 2)))
        cfg = ScoreConfig(int(rng.integers(1, n + 1)), int(rng.integers(1, n + 1)), float(rng.uniform(0.01, 1)),
                          0.1, DETERMINISTIC, 0)
        z = z2 / 2.0
        for y in range(c):
            want, order = brute_rank(ref2, labels, m, z2, y, cfg.m_knn)
            knn_bad += score_knn(z, y, index, cfg) != want
            want_c = brute_contrastive(ref2, labels, m, y, cfg.m_clr, kernel.bandwidth, kernel.shape,
                                       cfg.temperature, order)
            got_c = score_clr(z, y, index, kernel, cfg)
            if math.isinf(want_c) or math.isinf(got_c):
                clr_bad += want_c != got_c
            else:
                err = abs(got_c - want_c) / max(1.0, abs(want_c))
                worst = max(worst, err)
                clr_bad += err > 1e-10
    ok = knn_bad == 0 and clr_bad == 0
    report(7, ok, f"rank score mismatches {knn_bad}, contrastive mismatches {clr_bad} "
                  f"(worst relative error {worst:.1e}) over 200 instances")


# 8 ---------------------------------------------------------------------------

def test_criterion_08_quantile_rule(report):
    rng = np.random.default_rng(8)
    bad = 0
    for n in range(1, 101):
        scores = rng.integers(0, 12, n).astype(float)  # ties included
        for text in ("0.05", "0.1", "0.5"):
            j = math.ceil((1 - Fraction(text)) * (n + 1))  # exact rational arithmetic
            want = math.inf if j > n else sorted(scores)[j - 1]
            bad += conformal_quantile(scores, float(text)) != want
    overflow = conformal_quantile(np.arange(5.0), 0.05)
    ok = bad == 0 and overflow == math.inf
    report(8, ok, f"{bad} mismatches over n = 1..100 and alpha in {{0.05, 0.1, 0.5}}; n=5, alpha=0.05 gives {overflow}")


# 9 ---------------------------------------------------------------------------

def test_criterion_09_lambda_selection(report):
    example = choose_lambda([0.0, 1.0], [2, 4], [8, 6])
    rng = np.random.default_rng(9)
    members = True
    for _ in range(500):
        grid = sorted(rng.choice(LAMBDA_GRID, size=int(rng.integers(1, 12)), replace=False).tolist())
        sizes, ccvs = rng.integers(1, 4, len(grid)), rng.integers(0, 3, len(grid))
        members &= choose_lambda(grid, sizes, ccvs) in grid
    data = synth_gaussian_mixture(4, 3, 50, 0.8, seed=9)
    picked = select_lambda(data, KernelParams.identity(3), np.eye(3), 0.1, cfg=ScoreConfig(20, 10))
    ok = example == 0.0 and members and picked in LAMBDA_GRID
    report(9, ok, f"worked example picks {example}; 500 random grids all return members; data run picks {picked}")


# 10 --------------------------------------------------------------------------

def test_criterion_10_anisotropic_trend(report):
    config = ExperimentConfig(synthetic=ANISOTROPIC, alpha=0.05, lam="grid", mode=REUSE,
                              methods=("dance", "knn_only", "clr_only"), seed=0)
    res = monte_carlo_coverage(config, TRIALS)
    sizes = {m: r.mean_set_size for m, r in res.items()}
    covs = {m: r.mean for m, r in res.items()}
    ok = sizes["dance"] <= sizes["clr_only"] and all(v >= 0.944 for v in covs.values())
    report(10, ok, "MC mean size dance {dance:.3f} vs clr_only {clr_only:.3f}; ".format(**sizes)
                   + "coverage " + ", ".join(f"{m} {v:.4f}" for m, v in covs.items()))


# 11 --------------------------------------------------------------------------

def test_criterion_11_reuse_matches_disjoint(mixture, report):
    fitted, _ = mixture
    out = {}
    for mode in (REUSE, DISJOINT):
        res = mc(fitted, methods=("knn_only", "dance"), lam=0.5, mode=mode)
        out[mode] = {m: r.mean for m, r in res.items()}
    gaps = {m: abs(out[REUSE][m] - out[DISJOINT][m]) for m in ("knn_only", "dance")}
    ok = all(g < 0.02 for g in gaps.values()) and all(v >= 0.895 for o in out.values() for v in o.values())
    report(11, ok, "coverage reuse/disjoint: " + ", ".join(
        f"{m} {out[REUSE][m]:.4f}/{out[DISJOINT][m]:.4f}" for m in ("knn_only", "dance")))


# 12 --------------------------------------------------------------------------

def test_criterion_12_end_to_end_determinism(tmp_path, report):
    argv = [sys.executable, "-m", "dance", "evaluate", "--synthetic", "classes=4,dim=6,per_class=250,sigma=0.6",
            "--alpha", "0.1", "--lambda", "grid", "--seed", "7", "--budget", "4", "--iterations", "2",
            "--methods", "dance,knn_only,clr_only,deep_knn,aps,raps,ncp_raps"]
    outputs = []
    for run, threads in enumerate(("1", "8", "8", "1")):
        out = tmp_path / f"report{run}.json"
        env = {**os.environ, "DANCE_THREADS": threads}
        proc = subprocess.run(argv + ["--out", str(out)], env=env, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outputs.append(out.read_bytes())
    ok = len(set(outputs)) == 1
    report(12, ok, f"4 evaluate runs (DANCE_THREADS 1, 8, 8, 1) -> {len(set(outputs))} distinct report(s), "
                   f"{len(outputs[0])} bytes")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
