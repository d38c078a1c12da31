"""Additive noise models ``E = phi(C) + N`` with an HSIC residual check."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np
from scipy.spatial.distance import pdist

from .core import AUTO, Dataset, silverman_bandwidth
from .errors import DegenerateSample, InputError, InsufficientData

MIN_REGRESSION_SAMPLES = 10
MIN_ANM_SAMPLES = 20
# queries further than this many bandwidths from every training point are clamped
CLAMP_BANDWIDTHS = 5.0
# candidate bandwidths for cross-validation, as multiples of Silverman's rule
CV_FACTORS = np.geomspace(0.1, 3.0, 16)
# Gram eigenvalues below this fraction of the largest are dropped
_GRAM_RANK_TOL = 1e-12
# residual spread (relative to the effect's) treated as exactly zero
ZERO_RESIDUAL_TOL = 1e-9


class Direction(str, enum.Enum):
    X_TO_Y = "X_TO_Y"
    Y_TO_X = "Y_TO_X"


# -- regression ----------------------------------------------------------------


class KernelRegression:
    """Local-linear regression with a Gaussian kernel.

    At a query ``x0`` a weighted straight line is fitted to the training pairs
    (weights ``K((x_i - x0) / h)`` times optional sample weights) and its value
    at ``x0`` returned. Where the weighted design is singular (all weight on one
    distinct ``x``) the weighted mean is returned instead. Queries more than
    ``5 h`` from every training ``x`` are evaluated at the nearest training ``x``.
    """

    def __init__(self, xs, ys, bandwidth: float, weights=None):
        self.xs = np.asarray(xs, dtype=float)
        self.ys = np.asarray(ys, dtype=float)
        self.bandwidth = float(bandwidth)
        self.weights = None if weights is None else np.asarray(weights, dtype=float)
        order = np.argsort(self.xs, kind="stable")
        self._sorted_x = self.xs[order]

    def _clamp(self, q):
        pos = np.clip(np.searchsorted(self._sorted_x, q), 1, self._sorted_x.size - 1)
        left, right = self._sorted_x[pos - 1], self._sorted_x[pos]
        nearest = np.where(q - left <= right - q, left, right)
        if self._sorted_x.size == 1:
            nearest = np.full_like(q, self._sorted_x[0])
        nearest = np.where(q <= self._sorted_x[0], self._sorted_x[0], nearest)
        nearest = np.where(q >= self._sorted_x[-1], self._sorted_x[-1], nearest)
        far = np.abs(q - nearest) > CLAMP_BANDWIDTHS * self.bandwidth
        return np.where(far, nearest, q)

    def __call__(self, x):
        q = np.asarray(x, dtype=float)
        scalar = q.ndim == 0
        q = self._clamp(np.atleast_1d(q).ravel())
        out = np.empty(q.size)
        for start in range(0, q.size, 512):
            out[start:start + 512] = _local_linear(
                self.xs, self.ys, self.weights, q[start:start + 512], self.bandwidth
            )
        return float(out[0]) if scalar else out.reshape(np.shape(x))


def _kernel_weights(xs, q, h, sample_weights):
    z = (xs[None, :] - q[:, None]) / h
    logk = -0.5 * z * z
    # subtract the per-query maximum so that distant queries do not underflow
    logk -= logk.max(axis=1, keepdims=True)
    w = np.exp(logk)
    if sample_weights is not None:
        w = w * sample_weights[None, :]
    return w


def _solve_local_linear(w, d, y):
    s0 = w.sum(axis=1)
    s1 = (w * d).sum(axis=1)
    s2 = (w * d * d).sum(axis=1)
    t0 = (w * y).sum(axis=1)
    t1 = (w * d * y).sum(axis=1)
    det = s0 * s2 - s1 * s1
    ok = det > 1e-10 * s0 * s2
    with np.errstate(divide="ignore", invalid="ignore"):
        ll = (s2 * t0 - s1 * t1) / det
        nw = t0 / s0
    return np.where(ok, ll, nw)


def _local_linear(xs, ys, sample_weights, q, h):
    # centring on one response makes constant data come back exactly
    y0 = ys[0]
    w = _kernel_weights(xs, q, h, sample_weights)
    d = xs[None, :] - q[:, None]
    return y0 + _solve_local_linear(w, d, (ys - y0)[None, :])


def _loo_predictions(xs, ys, sample_weights, h):
    """Leave-one-out predictions at every training point."""
    y0 = ys[0]
    out = np.empty(xs.size)
    for start in range(0, xs.size, 512):
        q = xs[start:start + 512]
        z = (xs[None, :] - q[:, None]) / h
        w = np.exp(-0.5 * z * z)
        if sample_weights is not None:
            w = w * sample_weights[None, :]
        rows = np.arange(q.size)
        w[rows, start + rows] = 0.0
        d = xs[None, :] - q[:, None]
        out[start:start + 512] = y0 + _solve_local_linear(w, d, (ys - y0)[None, :])
    return out


def select_bandwidth(xs, ys, sample_weights=None, factors=CV_FACTORS) -> float:
    """Leave-one-out cross-validated bandwidth over multiples of Silverman's rule.

    With ``sample_weights`` the squared errors are weighted the same way
    (importance-weighted cross-validation). Near-ties go to the larger bandwidth.
    """
    xs = np.asarray(xs, float)
    ys = np.asarray(ys, float)
    base = silverman_bandwidth(xs)
    sw = None if sample_weights is None else np.asarray(sample_weights, float)
    cw = np.ones(xs.size) if sw is None else sw
    scores = []
    for f in factors:
        pred = _loo_predictions(xs, ys, sw, f * base)
        err = (ys - pred) ** 2
        scores.append(np.inf if not np.all(np.isfinite(err)) else float(np.sum(cw * err) / np.sum(cw)))
    scores = np.asarray(scores)
    best = scores.min()
    scale = float(np.var(ys)) + 1e-300
    tied = np.flatnonzero(scores <= best + 1e-9 * scale + 1e-6 * best)
    return float(factors[tied.max()] * base)


def fit_regression(data: Dataset, bandwidth=AUTO, *, weights=None) -> KernelRegression:
    """Kernel regression of ``data.ys`` on ``data.xs``.

    ``bandwidth="auto"`` picks the bandwidth by leave-one-out cross-validation.
    ``weights`` are optional non-negative sample weights.
    """
    n = len(data)
    if n < MIN_REGRESSION_SAMPLES:
        raise InsufficientData(f"regression needs at least {MIN_REGRESSION_SAMPLES} points, got {n}")
    if weights is not None:
        weights = np.asarray(weights, float)
        if weights.shape != (n,) or np.any(weights < 0) or not np.all(np.isfinite(weights)) or weights.sum() <= 0:
            raise InputError("weights must be finite, non-negative, not all zero, one per point")
    if bandwidth is None or bandwidth == AUTO:
        h = select_bandwidth(data.xs, data.ys, weights)
    else:
        h = float(bandwidth)
        if not h > 0:
            raise InputError("bandwidth must be positive")
    return KernelRegression(data.xs, data.ys, h, weights)


# -- HSIC ------------------------------------------------------------------------


class HsicResult(NamedTuple):
    hsic_value: float
    pvalue: float


def median_heuristic(u) -> float:
    d = pdist(np.asarray(u, float).reshape(-1, 1))
    med = float(np.median(d)) if d.size else 0.0
    if med > 0:
        return med
    nonzero = d[d > 0]
    if nonzero.size == 0:
        raise DegenerateSample("zero spread: median heuristic undefined")
    return float(np.median(nonzero))


def _centred_gram(u):
    u = np.asarray(u, float)
    s = median_heuristic(u)
    d = u[:, None] - u[None, :]
    k = np.exp(-0.5 * (d / s) ** 2)
    k -= k.mean(axis=0, keepdims=True)
    k -= k.mean(axis=1, keepdims=True)
    return k


def _factor(gram):
    vals, vecs = np.linalg.eigh(gram)
    keep = vals > _GRAM_RANK_TOL * vals.max()
    return vecs[:, keep] * np.sqrt(vals[keep])


def hsic_statistic(u, v) -> float:
    """Biased HSIC ``tr(K H L H) / n^2`` with median-heuristic Gaussian kernels."""
    kc, lc = _centred_gram(u), _centred_gram(v)
    return float(np.sum(kc * lc) / len(kc) ** 2)


def hsic_test(u, v, permutations: int = 499, seed: int = 0) -> HsicResult:
    """HSIC permutation test of independence between ``u`` and ``v``.

    Returns the biased statistic and ``(1 + #{permuted >= observed}) / (1 + P)``.
    Permutation ``i`` draws from its own stream spawned from ``seed``.
    """
    u = np.asarray(u, float).ravel()
    v = np.asarray(v, float).ravel()
    n = u.size
    if v.size != n:
        raise InputError("u and v must have equal length")
    if n < 10:
        raise InsufficientData(f"HSIC test needs at least 10 points, got {n}")
    if permutations < 99:
        raise InputError("permutations must be at least 99")
    for name, arr in (("u", u), ("v", v)):
        if np.ptp(arr) == 0:
            raise DegenerateSample(f"{name} has zero spread")
    kc, lc = _centred_gram(u), _centred_gram(v)
    value = float(np.sum(kc * lc) / n**2)

    # tr(Kc P' Lc P) = ||A' B[p]||_F^2 with Kc = A A', Lc = B B'; the observed
    # statistic is evaluated the same way so rounding cannot split ties
    a, b = _factor(kc), _factor(lc)
    observed = float(np.sum((a.T @ b) ** 2))
    streams = np.random.SeedSequence(seed).spawn(permutations)
    exceed = 0
    tol = 1e-12 * max(observed, 1e-300)
    for ss in streams:
        perm = np.random.default_rng(ss).permutation(n)
        if np.sum((a.T @ b[perm]) ** 2) >= observed - tol:
            exceed += 1
    return HsicResult(value, (1 + exceed) / (1 + permutations))


# -- additive noise models -------------------------------------------------------------


@dataclass(frozen=True)
class AnmConfig:
    bandwidth: object = AUTO
    alpha: float = 0.05
    permutations: int = 499
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise InputError("alpha must lie in (0, 1)")
        if self.permutations < 99:
            raise InputError("permutations must be at least 99")
        if self.bandwidth != AUTO and not float(self.bandwidth) > 0:
            raise InputError("bandwidth must be 'auto' or a positive number")

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "AnmConfig":
        """Build from flat key-value pairs (strings accepted, as from a CLI or file)."""
        unknown = set(values) - {"bandwidth", "alpha", "permutations", "seed"}
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        if "bandwidth" in values:
            bw = values["bandwidth"]
            kw["bandwidth"] = AUTO if str(bw).lower() == AUTO else float(bw)
        if "alpha" in values:
            kw["alpha"] = float(values["alpha"])
        if "permutations" in values:
            kw["permutations"] = int(values["permutations"])
        if "seed" in values:
            kw["seed"] = int(values["seed"])
        return cls(**kw)


class Mechanism:
    """Regression estimate plus a constant offset: ``x -> regression(x) + offset``."""

    def __init__(self, regression: KernelRegression, offset: float = 0.0):
        self.regression = regression
        self.offset = float(offset)

    def __call__(self, x):
        return self.regression(x) + self.offset

    def sample(self, grid) -> dict:
        g = np.asarray(grid, float)
        return {"x": g.tolist(), "phi": np.asarray(self(g), float).tolist()}


@dataclass(frozen=True)
class AnmFit:
    phi: Mechanism
    residuals: np.ndarray
    independence_pvalue: float
    hsic_value: float
    direction: Direction
    cause: np.ndarray
    effect: np.ndarray

    def to_dict(self, grid_points: int = 101) -> dict:
        grid = np.linspace(self.cause.min(), self.cause.max(), grid_points)
        return {
            "direction": self.direction.value,
            "independence_pvalue": self.independence_pvalue,
            "hsic_value": self.hsic_value,
            "bandwidth": self.phi.regression.bandwidth,
            "residual_std": float(np.std(self.residuals)),
            "mechanism": self.phi.sample(grid),
        }


def canonical_order(cause, effect) -> Dataset:
    """Pairs sorted by (cause, effect): the fit then cannot depend on input order."""
    order = np.lexsort((effect, cause))
    return Dataset(np.asarray(cause)[order], np.asarray(effect)[order])


def cause_effect(data: Dataset, direction: Direction):
    direction = Direction(direction)
    return (data.xs, data.ys) if direction is Direction.X_TO_Y else (data.ys, data.xs)


def residuals_are_zero(residuals, effect) -> bool:
    scale = max(float(np.ptp(effect)), 1.0)
    return float(np.ptp(residuals)) <= ZERO_RESIDUAL_TOL * scale


def residual_independence(cause, residuals, effect, config: AnmConfig) -> HsicResult:
    """HSIC test of cause against residuals; exact-zero residuals are independent of anything."""
    if residuals_are_zero(residuals, effect):
        return HsicResult(0.0, 1.0)
    return hsic_test(cause, residuals, config.permutations, config.seed)


def fit_anm(data: Dataset, direction=Direction.X_TO_Y, config: AnmConfig | None = None) -> AnmFit:
    """Regress effect on cause, centre the residuals and test them against the cause.

    The residual mean is absorbed into the mechanism. Residuals that vanish to
    rounding (deterministic data) are reported as zero with p-value 1.
    """
    cfg = config or AnmConfig()
    n = len(data)
    if n < MIN_ANM_SAMPLES:
        raise InsufficientData(f"ANM fit needs at least {MIN_ANM_SAMPLES} points, got {n}")
    direction = Direction(direction)
    cause, effect = cause_effect(data, direction)
    reg = fit_regression(canonical_order(cause, effect), cfg.bandwidth)
    raw = effect - reg(cause)
    offset = float(np.mean(raw))
    res = raw - offset
    if residuals_are_zero(res, effect):
        res = np.zeros_like(res)
    test = residual_independence(cause, res, effect, cfg)
    res.setflags(write=False)
    return AnmFit(Mechanism(reg, offset), res, test.pvalue, test.hsic_value, direction, cause, effect)


class Verdict(str, enum.Enum):
    CAUSE_TO_EFFECT = "CauseToEffect"
    EFFECT_TO_CAUSE = "EffectToCause"
    UNDECIDED = "Undecided"
    BOTH_REJECTED = "BothRejected"


@dataclass(frozen=True)
class DirectionVerdict:
    """Outcome of fitting both directions. ``forward`` is X -> Y (X the cause)."""

    verdict: Verdict
    forward_pvalue: float
    backward_pvalue: float
    alpha: float

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "forward_pvalue": self.forward_pvalue,
            "backward_pvalue": self.backward_pvalue,
        }


def decide(forward_pvalue: float, backward_pvalue: float, alpha: float) -> Verdict:
    fwd, bwd = forward_pvalue >= alpha, backward_pvalue >= alpha
    if fwd and bwd:
        return Verdict.UNDECIDED
    if fwd:
        return Verdict.CAUSE_TO_EFFECT
    if bwd:
        return Verdict.EFFECT_TO_CAUSE
    return Verdict.BOTH_REJECTED


def infer_direction(data: Dataset, alpha: float | None = None, config: AnmConfig | None = None) -> DirectionVerdict:
    """Fit an ANM both ways; the direction whose residuals pass the HSIC test alone wins.

    Both directions use the same permutation seed, so swapping the columns of
    ``data`` exchanges the two p-values exactly.
    """
    cfg = config or AnmConfig()
    a = cfg.alpha if alpha is None else float(alpha)
    if not 0 < a < 1:
        raise InputError("alpha must lie in (0, 1)")
    if len(data) < MIN_ANM_SAMPLES:
        raise InsufficientData(f"direction inference needs at least {MIN_ANM_SAMPLES} points")
    fwd = fit_anm(data, Direction.X_TO_Y, cfg)
    bwd = fit_anm(data, Direction.Y_TO_X, cfg)
    return DirectionVerdict(
        decide(fwd.independence_pvalue, bwd.independence_pvalue, a),
        fwd.independence_pvalue,
        bwd.independence_pvalue,
        a,
    )


__all__ = [
    "AnmConfig",
    "AnmFit",
    "Direction",
    "DirectionVerdict",
    "HsicResult",
    "KernelRegression",
    "Mechanism",
    "Verdict",
    "canonical_order",
    "decide",
    "fit_anm",
    "fit_regression",
    "hsic_statistic",
    "hsic_test",
    "infer_direction",
    "median_heuristic",
    "select_bandwidth",
]
