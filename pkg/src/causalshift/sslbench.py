"""Synthetic check of whether self-training helps, by causal direction of the features.

Causal problems draw the features first and the class from them, so the
feature marginal says nothing about the class boundary. Anticausal problems
draw the class first, and the feature marginal is a mixture whose clusters
line up with the classes.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy import special, stats

from .errors import InputError, NoLabeledData, TooFewNonzero

N_CLASSES = 2
TEST_SIZE = 1000
MIN_TRIALS = 20
EXACT_MAX = 20
MIN_NONZERO = 5

# anticausal generator: X | Y ~ N(mu_Y, 1), classes 3 standard deviations apart
ANTICAUSAL_SEPARATION = 3.0
ANTICAUSAL_PRIOR = 0.5
# causal generator: X ~ N(0, 1), Y = [phi(X) + N(0, CAUSAL_NOISE^2) > 0]
CAUSAL_NOISE = 0.6


class Category(str, enum.Enum):
    CAUSAL = "causal"
    ANTICAUSAL = "anticausal"


class Alternative(str, enum.Enum):
    TWO_SIDED = "two-sided"
    GREATER = "greater"


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,), also kept for unlabeled entries
    mask: np.ndarray  # True where the label is visible
    n_classes: int = N_CLASSES

    def __post_init__(self):
        f = np.asarray(self.features, float)
        if f.ndim == 1:
            f = f[:, None]
        lab = np.asarray(self.labels)
        mask = np.asarray(self.mask, bool)
        if f.ndim != 2 or not 1 <= f.shape[1] <= 3:
            raise InputError("features must be vectors of dimension 1 to 3")
        if not (f.shape[0] == lab.shape[0] == mask.shape[0]) or lab.ndim != 1:
            raise InputError("features, labels and mask must have the same length")
        if lab.size and (not np.all(lab == np.round(lab)) or lab.min() < 0 or lab.max() >= self.n_classes):
            raise InputError(f"labels must be class indices in 0..{self.n_classes - 1}")
        lab = lab.astype(int)
        for name, arr in (("features", f), ("labels", lab), ("mask", mask)):
            arr = np.array(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.labels.size

    @property
    def labeled(self):
        return self.features[self.mask], self.labels[self.mask]

    @property
    def unlabeled(self) -> np.ndarray:
        return self.features[~self.mask]


# -- generators --------------------------------------------------------------------


def causal_mechanism(x):
    """Fixed nonlinear score whose sign sets the class in the causal generator."""
    return np.tanh(2 * x) + 0.5 * np.sin(3 * x)


def draw_causal(n: int, rng):
    x = rng.standard_normal(n)
    y = (causal_mechanism(x) + CAUSAL_NOISE * rng.standard_normal(n) > 0).astype(int)
    return x[:, None], y


def draw_anticausal(n: int, rng):
    y = (rng.random(n) < ANTICAUSAL_PRIOR).astype(int)
    x = (y - 0.5) * ANTICAUSAL_SEPARATION + rng.standard_normal(n)
    return x[:, None], y


def anticausal_marginal_pdf(x, separation: float = ANTICAUSAL_SEPARATION, prior: float = ANTICAUSAL_PRIOR):
    """Analytic feature density of the anticausal generator (unit class variance)."""
    x = np.asarray(x, float)
    return (1 - prior) * stats.norm.pdf(x, -separation / 2) + prior * stats.norm.pdf(x, separation / 2)


def _generate(draw, n_labeled: int, n_unlabeled: int, seed) -> LabeledDataset:
    if n_labeled < 2 * N_CLASSES:
        raise InputError(f"need at least {2 * N_CLASSES} labeled points")
    if n_unlabeled < 0:
        raise InputError("n_unlabeled must be non-negative")
    rng = np.random.default_rng(seed)
    # redraw the labeled block until every class appears in it
    while True:
        xl, yl = draw(n_labeled, rng)
        if np.unique(yl).size == N_CLASSES:
            break
    xu, yu = draw(n_unlabeled, rng)
    mask = np.r_[np.ones(n_labeled, bool), np.zeros(n_unlabeled, bool)]
    return LabeledDataset(np.vstack([xl, xu]), np.r_[yl, yu], mask)


def generate_causal(n_labeled: int, n_unlabeled: int, seed) -> LabeledDataset:
    """``X ~ N(0, 1)`` first, then the class from the sign of a noisy nonlinear score."""
    return _generate(draw_causal, n_labeled, n_unlabeled, seed)


def generate_anticausal(n_labeled: int, n_unlabeled: int, seed) -> LabeledDataset:
    """Class first, then ``X | Y ~ N(mu_Y, 1)`` with the means 3 apart."""
    return _generate(draw_anticausal, n_labeled, n_unlabeled, seed)


GENERATORS = {Category.CAUSAL: generate_causal, Category.ANTICAUSAL: generate_anticausal}
DRAWS = {Category.CAUSAL: draw_causal, Category.ANTICAUSAL: draw_anticausal}


# -- base classifiers --------------------------------------------------------------


class Classifier(Protocol):
    def predict_proba(self, features) -> np.ndarray: ...

    def predict(self, features) -> np.ndarray: ...


def _as_matrix(features) -> np.ndarray:
    f = np.asarray(features, float)
    return f[:, None] if f.ndim == 1 else f


@dataclass(frozen=True)
class GaussianClassifier:
    """Per-class means, one shared covariance, class priors from the counts."""

    means: np.ndarray  # (K, d)
    precision: np.ndarray  # (d, d)
    log_priors: np.ndarray  # (K,)

    @classmethod
    def fit(cls, features, labels, n_classes: int = N_CLASSES) -> "GaussianClassifier":
        x = _as_matrix(features)
        y = np.asarray(labels, int)
        if y.size == 0:
            raise NoLabeledData("no labeled points to train on")
        d = x.shape[1]
        counts = np.bincount(y, minlength=n_classes).astype(float)
        means = np.zeros((n_classes, d))
        scatter = np.zeros((d, d))
        for k in range(n_classes):
            xk = x[y == k]
            if xk.size:
                means[k] = xk.mean(axis=0)
                c = xk - means[k]
                scatter += c.T @ c
        dof = max(y.size - int(np.sum(counts > 0)), 1)
        cov = scatter / dof
        # a ridge keeps the covariance invertible when a class has one point
        spread = float(np.trace(np.atleast_2d(np.cov(x.T)))) / d if y.size > 1 else 0.0
        cov += (1e-6 * spread + 1e-12) * np.eye(d)
        with np.errstate(divide="ignore"):
            log_priors = np.log(counts / counts.sum())
        return cls(means, np.linalg.inv(cov), log_priors)

    def log_scores(self, features) -> np.ndarray:
        x = _as_matrix(features)
        # linear discriminant: the quadratic term x' P x is shared by all classes
        lin = x @ self.precision @ self.means.T
        const = -0.5 * np.einsum("kd,de,ke->k", self.means, self.precision, self.means)
        return lin + const + self.log_priors

    def predict_proba(self, features) -> np.ndarray:
        s = self.log_scores(features)
        return np.exp(s - special.logsumexp(s, axis=1, keepdims=True))

    def predict(self, features) -> np.ndarray:
        return np.argmax(self.log_scores(features), axis=1)


@dataclass(frozen=True)
class NearestNeighbor:
    """1-nearest-neighbour; reports probability 1 for the neighbour's class."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    @classmethod
    def fit(cls, features, labels, n_classes: int = N_CLASSES) -> "NearestNeighbor":
        y = np.asarray(labels, int)
        if y.size == 0:
            raise NoLabeledData("no labeled points to train on")
        return cls(_as_matrix(features), y, n_classes)

    def predict(self, features) -> np.ndarray:
        q = _as_matrix(features)
        out = np.empty(q.shape[0], int)
        for s in range(0, q.shape[0], 1024):
            d = ((q[s:s + 1024, None, :] - self.features[None, :, :]) ** 2).sum(axis=2)
            out[s:s + 1024] = self.labels[np.argmin(d, axis=1)]
        return out

    def predict_proba(self, features) -> np.ndarray:
        return np.eye(self.n_classes)[self.predict(features)]


BASES = {"generative": GaussianClassifier, "1nn": NearestNeighbor}


def _base(base):
    if isinstance(base, str):
        try:
            return BASES[base]
        except KeyError:
            raise InputError(f"unknown base classifier {base!r}; choose from {sorted(BASES)}") from None
    if not hasattr(base, "fit"):
        raise InputError("base must be a classifier name or have a fit(features, labels, n_classes) method")
    return base


# -- self-training -----------------------------------------------------------------


@dataclass(frozen=True)
class SelfTrained:
    model: Classifier
    rounds: int
    pseudo_labeled: int

    def predict(self, features) -> np.ndarray:
        return self.model.predict(features)

    def predict_proba(self, features) -> np.ndarray:
        return self.model.predict_proba(features)


def self_train(data: LabeledDataset, base="generative", confidence_threshold: float = 0.8, max_rounds: int = 10) -> SelfTrained:
    """Train, pseudo-label the confident unlabeled points, retrain; repeat.

    Stops when no unlabeled point reaches ``confidence_threshold`` or after
    ``max_rounds`` retrainings. With no unlabeled data the result is the base
    classifier trained on the labeled points.
    """
    if not 0.5 < confidence_threshold <= 1.0:
        raise InputError("confidence_threshold must lie in (0.5, 1]")
    if max_rounds < 1:
        raise InputError("max_rounds must be positive")
    learner = _base(base)
    xl, yl = data.labeled
    if yl.size == 0:
        raise NoLabeledData("the dataset has no labeled points")
    pool_x, pool_y = xl, yl
    rest = data.unlabeled
    model = learner.fit(pool_x, pool_y, data.n_classes)
    rounds = added = 0
    while rounds < max_rounds and rest.shape[0]:
        proba = model.predict_proba(rest)
        confident = proba.max(axis=1) >= confidence_threshold
        if not confident.any():
            break
        pool_x = np.vstack([pool_x, rest[confident]])
        pool_y = np.r_[pool_y, np.argmax(proba[confident], axis=1)]
        added += int(confident.sum())
        rest = rest[~confident]
        model = learner.fit(pool_x, pool_y, data.n_classes)
        rounds += 1
    return SelfTrained(model, rounds, added)


# -- Wilcoxon signed-rank test -------------------------------------------------------


def _signed_rank_counts(doubled_ranks: np.ndarray) -> list[int]:
    """Number of sign patterns giving each value of twice the positive rank sum."""
    total = int(doubled_ranks.sum())
    counts = [0] * (total + 1)
    counts[0] = 1
    top = 0
    for r in doubled_ranks.astype(int):
        for s in range(top, -1, -1):
            if counts[s]:
                counts[s + r] += counts[s]
        top += r
    return counts


def wilcoxon_signed_rank(differences: Sequence[float], alternative: Alternative | str = Alternative.TWO_SIDED) -> float:
    """p-value of the signed-rank test that the differences are symmetric about 0.

    Exact zeros are dropped and tied magnitudes share their average rank. Up to
    20 nonzero differences the null distribution is enumerated exactly; beyond
    that a normal approximation with tie and continuity corrections is used.
    ``GREATER`` tests for a shift above 0.
    """
    alternative = Alternative(alternative)
    d = np.asarray(differences, float).ravel()
    if not np.all(np.isfinite(d)):
        raise InputError("differences must be finite")
    d = d[d != 0]
    m = d.size
    if m < MIN_NONZERO:
        raise TooFewNonzero(f"{m} nonzero differences; at least {MIN_NONZERO} needed")
    ranks = stats.rankdata(np.abs(d))
    doubled = np.round(2 * ranks).astype(int)
    w2 = int(doubled[d > 0].sum())  # twice the positive rank sum, an integer
    if m <= EXACT_MAX:
        counts = _signed_rank_counts(doubled)
        n_patterns = 2**m
        upper = sum(counts[w2:])
        if alternative is Alternative.GREATER:
            return upper / n_patterns
        lower = sum(counts[: w2 + 1])
        return min(1.0, 2 * min(upper, lower) / n_patterns)
    w = w2 / 2
    mean = m * (m + 1) / 4
    _, tie_sizes = np.unique(np.abs(d), return_counts=True)
    var = m * (m + 1) * (2 * m + 1) / 24 - float(np.sum(tie_sizes**3 - tie_sizes)) / 48
    sd = math.sqrt(var)
    if alternative is Alternative.GREATER:
        return float(stats.norm.sf((w - mean - 0.5) / sd))
    z = max(abs(w - mean) - 0.5, 0.0) / sd
    return float(min(1.0, 2 * stats.norm.sf(z)))


# -- benchmark -----------------------------------------------------------------------


@dataclass(frozen=True)
class TrialResult:
    trial: int
    base_error: float
    ssl_error: float
    # None when the base error is 0 (the ratio is undefined)
    relative_decrease: float | None


@dataclass(frozen=True)
class BenchReport:
    category: Category
    trials: tuple[TrialResult, ...]
    mean_relative_decrease: float
    wilcoxon_pvalue: float
    excluded: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "category": self.category.value,
            "config": dict(self.config),
            "mean_relative_decrease": self.mean_relative_decrease,
            "wilcoxon_pvalue": self.wilcoxon_pvalue,
            "excluded_zero_base_error": self.excluded,
            "trials": [
                {
                    "trial": t.trial,
                    "base_error": t.base_error,
                    "ssl_error": t.ssl_error,
                    "relative_decrease": t.relative_decrease,
                }
                for t in self.trials
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "base_error", "ssl_error", "relative_decrease"])
        for t in self.trials:
            w.writerow([t.trial, repr(t.base_error), repr(t.ssl_error), "" if t.relative_decrease is None else repr(t.relative_decrease)])
        return buf.getvalue()


def run_benchmark(
    category: Category | str,
    trials: int = 100,
    n_labeled: int = 10,
    n_unlabeled: int = 500,
    seed: int = 0,
    base="generative",
    confidence_threshold: float = 0.8,
    max_rounds: int = 10,
) -> BenchReport:
    """Base classifier against self-training on fresh synthetic problems.

    Trial ``i`` takes the ``i``-th stream spawned from ``seed``: one child for
    the training data, one for a fresh test sample of 1000 points. The test is
    Wilcoxon's on ``base_error - ssl_error``, alternative GREATER.
    """
    category = Category(category)
    if trials < MIN_TRIALS:
        raise InputError(f"need at least {MIN_TRIALS} trials")
    base_name = base if isinstance(base, str) else type(base).__name__
    _base(base)
    generate, draw = GENERATORS[category], DRAWS[category]
    rows = []
    for i, stream in enumerate(np.random.SeedSequence(seed).spawn(trials)):
        data_seed, test_seed = stream.spawn(2)
        data = generate(n_labeled, n_unlabeled, data_seed)
        x_test, y_test = draw(TEST_SIZE, np.random.default_rng(test_seed))
        xl, yl = data.labeled
        plain = _base(base).fit(xl, yl, data.n_classes)
        ssl = self_train(data, base, confidence_threshold, max_rounds)
        e_base = float(np.mean(plain.predict(x_test) != y_test))
        e_ssl = float(np.mean(ssl.predict(x_test) != y_test))
        rel = (e_base - e_ssl) / e_base if e_base > 0 else None
        rows.append(TrialResult(i, e_base, e_ssl, rel))
    config = {
        "trials": trials,
        "n_labeled": n_labeled,
        "n_unlabeled": n_unlabeled,
        "seed": seed,
        "base": base_name,
        "confidence_threshold": confidence_threshold,
        "max_rounds": max_rounds,
        "test_size": TEST_SIZE,
    }
    return make_report(category, rows, config)


def make_report(category: Category | str, rows: Sequence[TrialResult], config: dict | None = None) -> BenchReport:
    """Aggregate trial rows; rows with zero base error are left out of the mean and counted."""
    rel = [r.relative_decrease for r in rows if r.relative_decrease is not None]
    pvalue = wilcoxon_signed_rank([r.base_error - r.ssl_error for r in rows], Alternative.GREATER)
    return BenchReport(
        Category(category),
        tuple(rows),
        float(np.mean(rel)) if rel else float("nan"),
        pvalue,
        len(rows) - len(rel),
        dict(config or {}),
    )
