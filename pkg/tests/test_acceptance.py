"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``ACCEPTANCE <n> PASS|FAIL`` line straight to the
terminal (output capture is bypassed) before asserting.
"""

import itertools
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from causalshift.anm import AnmConfig, Verdict as DirVerdict, infer_direction
from causalshift.core import (
    Dataset,
    DiscreteDistribution,
    GridDensity,
    StochasticMatrix,
    convolve,
    gaussian_density,
    l1_distance,
    two_spike_density,
    uniform_density,
)
from causalshift.shift import prior_shift_correct
from causalshift.spectral import (
    LocalizeConfig,
    Verdict,
    deconvolve,
    gaussian_max_width_deconv,
    invert_stochastic_matrix,
    localize_change,
)
from causalshift.sslbench import (
    GaussianClassifier,
    NearestNeighbor,
    generate_anticausal,
    generate_causal,
    run_benchmark,
    self_train,
    wilcoxon_signed_rank,
)

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "tests" / "data"


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return emit


# -- 1. direction accuracy -------------------------------------------------------------


def test_1_anm_direction_accuracy(report):
    start = time.perf_counter()
    cubic = linear = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        x = r.uniform(-1, 1, 500)
        v = infer_direction(Dataset(x, x + x**3 + r.normal(0, 0.2, 500)), 0.05, AnmConfig(seed=seed))
        cubic += v.verdict is DirVerdict.CAUSE_TO_EFFECT
        r = np.random.default_rng(10_000 + seed)
        x = r.normal(size=500)
        v = infer_direction(Dataset(x, 0.8 * x + r.normal(0, 0.6, 500)), 0.05, AnmConfig(seed=seed))
        linear += v.verdict is DirVerdict.UNDECIDED
    elapsed = time.perf_counter() - start
    ok = cubic >= 90 and linear >= 80 and elapsed < 300
    assert report(1, ok, f"cubic CauseToEffect {cubic}/100 (>= 90), linear-Gaussian Undecided {linear}/100 (>= 80), {elapsed:.0f} s (< 300)")


# -- 2. deconvolution round trip ---------------------------------------------------------


def _smooth_density(rng, n, step):
    x = np.arange(n)
    vals = np.zeros(n)
    for _ in range(3):
        vals += rng.uniform(0.2, 1) * np.exp(-0.5 * ((x - rng.uniform(0.3, 0.7) * n) / (rng.uniform(0.04, 0.12) * n)) ** 2)
    return GridDensity(rng.uniform(-3, 3), step, vals)


def _gaussian_dominated(rng, step):
    # 85% one Gaussian, 15% a wider, slightly offset one; support 8 sigma of the main part
    s = rng.uniform(0.05, 0.3)
    k = np.arange(-int(np.ceil(8 * s / step)), int(np.ceil(8 * s / step)) + 1) * step
    mu = rng.uniform(-0.5, 0.5) * s
    v = 0.85 * np.exp(-0.5 * (k / s) ** 2) / s + 0.15 * np.exp(-0.5 * ((k - mu) / (1.5 * s)) ** 2) / (1.5 * s)
    return GridDensity(k[0], step, v)


def test_2_deconvolution_round_trip(report):
    rng = np.random.default_rng(2)
    worst_512 = 0.0
    for _ in range(50):
        b = _gaussian_dominated(rng, 0.02)
        a = _smooth_density(rng, 512 - len(b) + 1, 0.02)
        c = convolve(a, b)
        assert len(c) == 512
        worst_512 = max(worst_512, l1_distance(deconvolve(c, b), a))
    # exact constructions: closed-form Gaussian mixtures through a Gaussian, 1024 points
    worst_1024 = 0.0
    step = 4 / 1024
    for sigma in (0.05, 0.08):
        for centers in ([0.0], [-0.5, 0.4], [-0.6, 0.0, 0.5]):
            lo, hi = -2 + 8 * sigma, 2 - 8 * sigma
            x = np.arange(round(lo / step), round(hi / step) + 1) * step
            v = sum((i + 1) * np.exp(-0.5 * ((x - c) / 0.15) ** 2) for i, c in enumerate(centers))
            a = GridDensity(x[0], step, v)
            b = gaussian_density(sigma, step)
            c = convolve(a, b)
            assert 1020 <= len(c) <= 1030
            worst_1024 = max(worst_1024, l1_distance(deconvolve(c, b), a))
    ok = worst_512 < 1e-2 and worst_1024 < 1e-3
    assert report(2, ok, f"worst L1 {worst_512:.2e} over 50 pairs at 512 (< 1e-2), {worst_1024:.2e} exact at 1024 (< 1e-3)")


# -- 3. change localisation -----------------------------------------------------------------

STEP3 = 0.01


def _mixture(centers, widths, weights):
    lo = min(c - 6 * w for c, w in zip(centers, widths))
    hi = max(c + 6 * w for c, w in zip(centers, widths))
    x = np.arange(round(lo / STEP3), round(hi / STEP3) + 1) * STEP3
    return GridDensity(x[0], STEP3, sum(p * np.exp(-0.5 * ((x - c) / w) ** 2) / w for c, w, p in zip(centers, widths, weights)))


def _pair(family, r):
    """(before, after, cause signal or None, truth) built with the convolve oracle."""
    g = lambda s: gaussian_density(s, STEP3)  # noqa: E731
    if family == "noise, uniform cause":
        u = uniform_density(0, r.uniform(0.6, 1.5), STEP3)
        s1 = r.uniform(0.05, 0.12)
        return convolve(u, g(s1)), convolve(u, g(s1 * r.uniform(1.6, 2.5))), None, Verdict.NOISE_CHANGED
    if family == "noise, two-spike cause":
        ts = two_spike_density(0, r.uniform(0.8, 1.5), STEP3, r.uniform(0.2, 0.8))
        s1 = r.uniform(0.08, 0.2)
        return convolve(ts, g(s1)), convolve(ts, g(s1 * r.uniform(1.5, 2.2))), None, Verdict.NOISE_CHANGED
    if family == "noise, uniform noise widens":
        c1 = _mixture([0.0, r.uniform(0.4, 0.8)], [0.12, 0.12], [1, r.uniform(0.5, 1.5)])
        w1 = r.uniform(0.3, 0.5)
        w2 = w1 * r.uniform(1.3, 1.8)
        return (convolve(c1, uniform_density(-w1, w1, STEP3)), convolve(c1, uniform_density(-w2, w2, STEP3)), c1,
                Verdict.NOISE_CHANGED)
    if family == "cause shifted":
        ts = two_spike_density(0, r.uniform(0.8, 1.5), STEP3, r.uniform(0.2, 0.8))
        noise = g(r.uniform(0.1, 0.25))
        moved = ts.shifted(r.choice([-1, 1]) * r.uniform(0.2, 0.5))
        return convolve(ts, noise), convolve(moved, noise), None, Verdict.CAUSE_MARGINAL_CHANGED
    if family == "cause spread, same mean":
        d, e = r.uniform(0.8, 1.2), r.uniform(0.25, 0.5)
        noise = g(r.uniform(0.1, 0.2))
        a = two_spike_density(-d / 2, d / 2, STEP3, 0.5)
        b = two_spike_density(-d / 2 - e, d / 2 + e, STEP3, 0.5)
        return convolve(a, noise), convolve(b, noise), None, Verdict.CAUSE_MARGINAL_CHANGED
    # cause split in two under a uniform noise whose zeros persist
    noise = uniform_density(-r.uniform(0.3, 0.6), r.uniform(0.3, 0.6), STEP3)
    c1 = _mixture([0.0], [r.uniform(0.1, 0.2)], [1])
    s = r.uniform(0.25, 0.4)
    c2 = _mixture([-s, s], [0.1, 0.1], [1, 1])
    return convolve(c1, noise), convolve(c2, noise), c1, Verdict.CAUSE_MARGINAL_CHANGED


FAMILIES3 = [
    "noise, uniform cause",
    "noise, two-spike cause",
    "noise, uniform noise widens",
    "cause shifted",
    "cause spread, same mean",
    "cause split, uniform noise",
]


def test_3_change_localisation(report):
    r = np.random.default_rng(3)
    correct = wrong = ambiguous = 0
    for i in range(50):
        before, after, signal, truth = _pair(FAMILIES3[i % len(FAMILIES3)], r)
        verdict = localize_change(before, after, LocalizeConfig(cause_signal=signal)).verdict
        if verdict is truth:
            correct += 1
        elif verdict is Verdict.AMBIGUOUS:
            ambiguous += 1
        else:
            wrong += 1
    ok = correct >= 40 and wrong <= 5
    assert report(3, ok, f"correct {correct}/50 (>= 80%), wrong definite {wrong}/50 (<= 10%), ambiguous {ambiguous}")


# -- 4. maximal-width Gaussian --------------------------------------------------------------


def test_4_max_width_gaussian(report):
    step = 0.01
    ts = two_spike_density(0, 1, step, 0.3)
    errors, times = [], []
    for sigma in (0.1, 0.2, 0.3, 0.5):
        start = time.perf_counter()
        s_hat, _ = gaussian_max_width_deconv(convolve(ts, gaussian_density(sigma, step)))
        times.append(time.perf_counter() - start)
        errors.append(abs(s_hat - sigma) / sigma)
    ok = max(errors) < 0.1 and max(times) < 10
    assert report(4, ok, f"worst relative error {max(errors):.2%} (< 10%), slowest case {max(times):.2f} s (< 10 s)")


# -- 5. discrete inversion and prior shift ----------------------------------------------------


def test_5_inversion_and_prior_shift(report):
    rng = np.random.default_rng(5)
    worst, count = 0.0, 0
    for k in range(2, 6):
        while count < 100 * (k - 1):
            m = rng.dirichlet(np.ones(k), size=k).T
            s = np.linalg.svd(m, compute_uv=False)
            if s[-1] < 1e-6 * s[0]:
                continue  # not full rank to working precision
            p = rng.dirichlet(np.ones(k))
            sm = StochasticMatrix(m / m.sum(axis=0))
            res = invert_stochastic_matrix(sm, sm.apply(DiscreteDistribution(p)))
            worst = max(worst, float(np.max(np.abs(res.distribution.probs - p))))
            count += 1
    post = prior_shift_correct(StochasticMatrix.from_columns([[0.8, 0.2], [0.3, 0.7]]), DiscreteDistribution(np.array([0.9, 0.1])))
    bayes_err = abs(post[0].probs[0] - 0.72 / 0.75)
    ok = worst < 1e-10 and bayes_err < 1e-12
    assert report(5, ok, f"{count} full-rank matrices, worst error {worst:.1e} (< 1e-10); 0.96 table error {bayes_err:.1e} (< 1e-12)")


# -- 6. SSL hypothesis --------------------------------------------------------------------------


def test_6_ssl_hypothesis(report):
    start = time.perf_counter()
    anti = run_benchmark("anticausal", trials=100, n_labeled=10, n_unlabeled=500, seed=0)
    causal = run_benchmark("causal", trials=100, n_labeled=10, n_unlabeled=500, seed=0)
    elapsed = time.perf_counter() - start
    ok = (
        anti.wilcoxon_pvalue < 0.05
        and anti.mean_relative_decrease > 0.1
        and causal.wilcoxon_pvalue > 0.05
        and abs(causal.mean_relative_decrease) < 0.05
        and elapsed < 600
    )
    assert report(
        6,
        ok,
        f"anticausal p={anti.wilcoxon_pvalue:.2e} (< 0.05), decrease {anti.mean_relative_decrease:.3f} (> 0.1); "
        f"causal p={causal.wilcoxon_pvalue:.3f} (> 0.05), |decrease| {abs(causal.mean_relative_decrease):.3f} (< 0.05); "
        f"{elapsed:.0f} s (< 600)",
    )


# -- 7. Wilcoxon exactness ------------------------------------------------------------------------


def _enumerated(d, alternative):
    d = d[d != 0]
    r2 = np.round(2 * stats.rankdata(np.abs(d))).astype(int).tolist()
    w = sum(r for r, x in zip(r2, d) if x > 0)
    ge = le = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        s = sum(r for r, b in zip(r2, signs) if b)
        ge += s >= w
        le += s <= w
    n = 2 ** len(d)
    return ge / n if alternative == "greater" else min(1.0, 2 * min(ge, le) / n)


def test_7_wilcoxon_exactness(report):
    rng = np.random.default_rng(7)
    worst, cases = 0.0, 0
    for m in range(5, 13):
        for trial in range(6):
            # half the draws are coarse integers, so tied magnitudes are common
            d = rng.normal(0.3, 1, m) if trial % 2 else rng.integers(-4, 5, m).astype(float)
            if np.count_nonzero(d) < 5:
                continue
            for alt in ("greater", "two-sided"):
                worst = max(worst, abs(wilcoxon_signed_rank(d, alt) - _enumerated(d, alt)))
                cases += 1
    five = wilcoxon_signed_rank([1.0, 2.0, 3.0, 4.0, 5.0], "greater")
    ok = worst <= 1e-15 and five == 0.03125
    assert report(7, ok, f"{cases} cases with m <= 12, worst gap {worst:.1e} (<= 1e-15); five positives p = {five!r} (== 0.03125)")


# -- 8. self-training reduction law -----------------------------------------------------------------


def test_8_self_training_reduction(report):
    q = np.random.default_rng(8).normal(0, 3, (10_000, 1))
    mismatches = 0
    for gen in (generate_causal, generate_anticausal):
        for seed in range(5):
            data = gen(10, 0, seed)
            for base, cls in (("generative", GaussianClassifier), ("1nn", NearestNeighbor)):
                plain = cls.fit(*data.labeled).predict(q)
                mismatches += int(np.sum(self_train(data, base).predict(q) != plain))
    assert report(8, mismatches == 0, f"{mismatches} differing predictions on 20 x 10,000 queries (== 0)")


# -- 9. CLI determinism ---------------------------------------------------------------------------------

CLI_RUNS = [
    ["direction", "cubic.csv", "--seed", "11"],
    ["fit-anm", "cubic.csv", "--seed", "11"],
    ["localize", "train.csv", "new_noise.csv", "--seed", "11"],
    ["adapt", "train.csv", "new_noise.csv", "--seed", "11", "--permutations", "99"],
    ["transfer", "domain_a.csv", "domain_b.csv", "--seed", "11", "--permutations", "99"],
    ["ssl-bench", "--category", "anticausal", "--trials", "20", "--seed", "11"],
    ["invert", "invert.json", "--seed", "11"],
]


def _cli(args):
    return subprocess.run([sys.executable, "-m", "causalshift", *args], cwd=DATA, capture_output=True)


def test_9_cli_determinism(report):
    differing = []
    for args in CLI_RUNS:
        a, b = _cli(args), _cli(args)
        if a.returncode != 0 or a.stdout != b.stdout or not a.stdout:
            differing.append(args[0])
    bad = _cli(["direction", "malformed.csv"])
    crash_free = bad.returncode == 2 and b"Traceback" not in bad.stderr
    ok = not differing and crash_free
    assert report(
        9,
        ok,
        f"{len(CLI_RUNS) - len(differing)}/{len(CLI_RUNS)} subcommands byte-identical; malformed CSV exit {bad.returncode} (== 2), no traceback",
    )
