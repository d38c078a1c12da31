"""Adaptation recipes: which factor of ``P(C) P(E|C)`` changed, and how to re-estimate.

``Dataset`` columns follow the prediction task: ``xs`` is the input and ``ys``
the output. In the causal direction the input is the cause; in the anticausal
direction the output is the cause and the model is used through Bayes' rule.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .anm import AnmConfig, Direction, fit_anm, fit_regression
from .conditional_anm import residual_density
from .core import (
    AUTO,
    STEP_TOL,
    Dataset,
    DiscreteDistribution,
    GridDensity,
    StochasticMatrix,
    estimate_density,
    l1_distance,
    silverman_bandwidth,
)
from .errors import (
    DeconvolutionIllConditioned,
    GridMismatch,
    InputError,
    InsufficientData,
    WeightDegenerate,
    ZeroEvidence,
)
from .spectral import (
    LocalizeConfig,
    ShiftDiagnosis,
    Verdict,
    deconvolve,
    estimate_new_noise,
    invert_stochastic_matrix,
    localize_change,
)

MIN_SAMPLES = 20
MIN_EFFECTIVE_SAMPLES = 10.0
EVIDENCE_FLOOR = 1e-300
# integer-valued columns with at most this many states are treated as discrete
MAX_DISCRETE_STATES = 50
# mixed into the seed for the calibration stream, so it never coincides with a
# permutation stream of the independence test (those are children of the bare seed)
_CALIBRATION_TAG = 0x5A1F


class ModelKind(str, enum.Enum):
    CAUSAL = "causal"
    ANTICAUSAL = "anticausal"


class Status(str, enum.Enum):
    RESOLVED = "resolved"
    UNRESOLVED = "unresolved"


def identity(x):
    return x


@dataclass(frozen=True)
class ConditionalModel:
    """A conditional of effect given cause, plus what is needed to invert it.

    Continuous models hold ``mechanism`` and ``noise``: the effect given ``C = c``
    has density ``noise`` shifted by ``mechanism(c)``. Discrete models hold
    ``likelihood`` with entry ``[effect state, cause state]``. Anticausal models
    also carry the cause marginal (``cause_marginal`` or ``prior``) for Bayes'
    rule.
    """

    kind: ModelKind
    mechanism: Callable | None = None
    noise: GridDensity | None = None
    cause_marginal: GridDensity | None = None
    likelihood: StochasticMatrix | None = None
    prior: DiscreteDistribution | None = None
    cause_states: np.ndarray | None = None
    effect_states: np.ndarray | None = None
    cause_range: tuple[float, float] | None = None
    status: Status = Status.RESOLVED
    diagnosis: ShiftDiagnosis | None = None
    candidates: tuple["ConditionalModel", ...] = ()
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        kind = ModelKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.likelihood is None:
            if self.mechanism is None or self.noise is None:
                raise InputError("a continuous model needs a mechanism and a noise density")
            if kind is ModelKind.ANTICAUSAL and self.cause_marginal is None:
                raise InputError("an anticausal model needs the cause marginal")
        else:
            if kind is ModelKind.ANTICAUSAL and self.prior is None:
                raise InputError("an anticausal model needs the cause prior")
            if self.prior is not None and len(self.prior) != self.likelihood.cols:
                raise InputError("prior and likelihood disagree on the number of cause states")

    @property
    def discrete(self) -> bool:
        return self.likelihood is not None

    def conditional(self, c: float) -> GridDensity:
        """Density of the effect given ``C = c`` (continuous models)."""
        if self.discrete:
            raise InputError("conditional() is for continuous models; use likelihood")
        return self.noise.shifted(float(self.mechanism(float(c))))

    def to_dict(self, grid_points: int = 101) -> dict:
        out = {"kind": self.kind.value, "status": self.status.value}
        if self.discrete:
            out["likelihood"] = self.likelihood.entries.tolist()
            out["prior"] = None if self.prior is None else self.prior.probs.tolist()
            out["cause_states"] = None if self.cause_states is None else self.cause_states.tolist()
            out["effect_states"] = None if self.effect_states is None else self.effect_states.tolist()
        else:
            lo, hi = self.cause_range or _default_range(self)
            grid = np.linspace(lo, hi, grid_points)
            out["mechanism"] = {"x": grid.tolist(), "phi": np.asarray(self.mechanism(grid), float).tolist()}
            out["noise"] = self.noise.to_dict()
            out["cause_marginal"] = None if self.cause_marginal is None else self.cause_marginal.to_dict()
        out["diagnosis"] = None if self.diagnosis is None else self.diagnosis.to_dict()
        out["candidates"] = [c.to_dict(grid_points) for c in self.candidates]
        out["diagnostics"] = dict(self.diagnostics)
        return out


def _default_range(model: ConditionalModel):
    if model.cause_marginal is not None:
        return model.cause_marginal.origin, model.cause_marginal.end
    return -1.0, 1.0


# -- covariate shift ---------------------------------------------------------


@dataclass(frozen=True)
class CovariateShiftConfig:
    bandwidth: object = AUTO
    w_max: float = 10.0

    def __post_init__(self):
        if not self.w_max > 0:
            raise InputError("w_max must be positive")


@dataclass(frozen=True)
class CovariateShiftFit:
    """Importance-weighted regression; callable like the regression itself."""

    regression: object
    weights: np.ndarray
    effective_sample_size: float
    w_max: float
    clipped: int

    def __call__(self, x):
        return self.regression(x)

    def to_dict(self) -> dict:
        return {
            "bandwidth": self.regression.bandwidth,
            "effective_sample_size": self.effective_sample_size,
            "w_max": self.w_max,
            "clipped": self.clipped,
        }


def importance_weights(xs, new_density: GridDensity, old_density: GridDensity, w_max: float = 10.0):
    """``P'(x) / P(x)`` at the sample points, clipped to ``[0, w_max]``.

    Returns ``(weights, number clipped)``. Points the old density does not cover
    get ``w_max`` if the new density covers them, else 0.
    """
    if abs(new_density.step - old_density.step) > STEP_TOL:
        raise GridMismatch(f"input densities have different steps: {new_density.step!r} vs {old_density.step!r}")
    xs = np.asarray(xs, float)
    p_new = new_density.pdf(xs)
    p_old = old_density.pdf(xs)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(p_old > 0, p_new / np.where(p_old > 0, p_old, 1.0), np.where(p_new > 0, np.inf, 0.0))
    clipped = int(np.sum(raw > w_max))
    return np.clip(raw, 0.0, w_max), clipped


def covariate_shift_refit(
    data: Dataset,
    new_input_density: GridDensity,
    old_input_density: GridDensity,
    config: CovariateShiftConfig | None = None,
) -> CovariateShiftFit:
    """Refit ``E[Y | X]`` with each training point weighted by ``P'(x_i) / P(x_i)``.

    The conditional itself is assumed unchanged. Reweighting only moves the
    finite-sample fit (and the cross-validated bandwidth) towards where the new
    inputs lie.
    """
    cfg = config or CovariateShiftConfig()
    if len(data) < MIN_SAMPLES:
        raise InsufficientData(f"need at least {MIN_SAMPLES} points, got {len(data)}")
    w, clipped = importance_weights(data.xs, new_input_density, old_input_density, cfg.w_max)
    total = float(w.sum())
    ess = total**2 / float(np.sum(w * w)) if total > 0 else 0.0
    if ess < MIN_EFFECTIVE_SAMPLES:
        raise WeightDegenerate(f"effective sample size {ess:.3g} is below {MIN_EFFECTIVE_SAMPLES:g}")
    reg = fit_regression(data, cfg.bandwidth, weights=w)
    w.setflags(write=False)
    return CovariateShiftFit(reg, w, ess, cfg.w_max, clipped)


# -- Bayes' rule ---------------------------------------------------------------


def _state_index(states, value) -> int | None:
    if states is None:
        i = int(value)
        return i if i == value else None
    hits = np.flatnonzero(states == value)
    return int(hits[0]) if hits.size else None


def bayes_posterior(model: ConditionalModel, x, prior=None):
    """Posterior over the cause given the observed effect ``x``.

    Continuous: density proportional to ``noise(x - mechanism(y)) * prior(y)`` on
    the prior's grid. Discrete: ``likelihood[x, :] * prior``. ``prior`` defaults
    to the marginal the model carries.
    """
    if model.kind is not ModelKind.ANTICAUSAL:
        raise InputError("Bayes inversion needs an anticausal model")
    if model.discrete:
        prior = model.prior if prior is None else prior
        if not isinstance(prior, DiscreteDistribution) or len(prior) != model.likelihood.cols:
            raise InputError("prior must be a discrete distribution over the cause states")
        i = _state_index(model.effect_states, x)
        if i is None or not 0 <= i < model.likelihood.rows:
            raise ZeroEvidence(f"effect state {x!r} never occurs under the model")
        joint = model.likelihood.entries[i] * prior.probs
        z = float(joint.sum())
        if z < EVIDENCE_FLOOR:
            raise ZeroEvidence(f"effect state {x!r} has zero probability under the model")
        return DiscreteDistribution(joint / z)

    prior = model.cause_marginal if prior is None else prior
    if not isinstance(prior, GridDensity):
        raise InputError("prior must be a grid density for a continuous model")
    if abs(prior.step - model.cause_marginal.step) > STEP_TOL:
        raise GridMismatch("prior must share the grid of the cause marginal")
    grid = prior.grid
    lik = model.noise.pdf(float(x) - np.asarray(model.mechanism(grid), float))
    joint = lik * prior.values
    z = float(joint.sum() * prior.step)
    if not z >= EVIDENCE_FLOOR:
        raise ZeroEvidence(f"observation {x!r} is unexplainable under the model")
    return GridDensity(prior.origin, prior.step, joint)


@dataclass(frozen=True)
class PosteriorMap:
    """``P'(y | x)`` for every effect state ``x``; rows with zero evidence are NaN."""

    table: np.ndarray  # [x, y]
    evidence: np.ndarray  # P'(x)

    def __len__(self):
        return self.table.shape[0]

    def __getitem__(self, x) -> DiscreteDistribution:
        if not self.evidence[x] >= EVIDENCE_FLOOR:
            raise ZeroEvidence(f"effect state {x} has zero probability under the new prior")
        return DiscreteDistribution(self.table[x])

    def to_dict(self) -> dict:
        return {
            "posterior": [None if not e >= EVIDENCE_FLOOR else row.tolist() for row, e in zip(self.table, self.evidence)],
            "evidence": self.evidence.tolist(),
        }


def prior_shift_correct(likelihood: StochasticMatrix, new_prior: DiscreteDistribution) -> PosteriorMap:
    """Posterior table under a new cause prior, the likelihood ``P(x | y)`` held fixed.

    ``likelihood`` has entry ``[x, y]`` (columns are the cause states ``y``).
    """
    if len(new_prior) != likelihood.cols:
        raise InputError(f"prior has {len(new_prior)} states, likelihood has {likelihood.cols} columns")
    joint = likelihood.entries * new_prior.probs[None, :]
    evidence = joint.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        table = np.where(evidence[:, None] >= EVIDENCE_FLOOR, joint / evidence[:, None], np.nan)
    table.setflags(write=False)
    evidence.setflags(write=False)
    return PosteriorMap(table, evidence)


# -- concept drift ---------------------------------------------------------------


def concept_drift_update(new_data: Dataset, old_noise: GridDensity, config: AnmConfig | None = None) -> ConditionalModel:
    """Refit the mechanism on new data and keep the old noise.

    ``diagnostics["noise_l1"]`` is the L1 distance between ``old_noise`` and the
    density of the new residuals. A large value means the noise changed too, so
    the fixed-noise assumption does not hold.
    """
    cfg = config or AnmConfig()
    fit = fit_anm(new_data, Direction.X_TO_Y, cfg)
    new_noise = residual_density(fit.residuals)
    diagnostics = {
        "noise_l1": l1_distance(old_noise, new_noise),
        "independence_pvalue": fit.independence_pvalue,
    }
    return ConditionalModel(
        ModelKind.CAUSAL,
        fit.phi,
        old_noise,
        cause_range=(float(fit.cause.min()), float(fit.cause.max())),
        diagnostics=diagnostics,
    )


# -- output change -----------------------------------------------------------------


@dataclass(frozen=True)
class AdaptConfig:
    anm: AnmConfig = field(default_factory=AnmConfig)
    grid_size: int = 1024
    # KDE bandwidth for localisation, as a fraction of Silverman's rule: the
    # spectral checks regularise on their own and need the fine structure
    smoothing: float = 0.25
    # random splits used to calibrate the sampling tolerance of L1 distances
    calibration_draws: int = 49
    # multiple of the sampling noise level used by every sample-aware threshold
    z: float = 3.0
    # None: detect integer-valued columns with few states
    discrete: bool | None = None

    def __post_init__(self):
        if self.grid_size < 64:
            raise InputError("grid_size must be at least 64")
        if not self.smoothing > 0 or not self.z > 0:
            raise InputError("smoothing and z must be positive")
        if self.calibration_draws < 19:
            raise InputError("calibration_draws must be at least 19")


def _looks_discrete(*columns) -> bool:
    for c in columns:
        c = np.asarray(c, float)
        if not np.all(c == np.round(c)) or np.unique(c).size > MAX_DISCRETE_STATES:
            return False
    return True


def _plain_model(fit, kind: ModelKind, grid_size: int, cause_marginal=None) -> ConditionalModel:
    return ConditionalModel(
        kind,
        fit.phi,
        residual_density(fit.residuals, grid_size),
        cause_marginal=cause_marginal,
        cause_range=(float(fit.cause.min()), float(fit.cause.max())),
        diagnostics={"independence_pvalue": fit.independence_pvalue},
    )


class _Lattice:
    """Shared KDE lattice for the old and new output samples."""

    def __init__(self, pooled, grid_size: int, smoothing: float):
        sil = silverman_bandwidth(pooled)
        self.h_localize = smoothing * sil
        self.h_deconvolve = sil
        span = float(np.ptp(pooled)) + 16 * sil
        self.step = span / (grid_size - 1)

    def density(self, samples, h: float) -> GridDensity:
        return estimate_density(samples, bandwidth=h, step=self.step, tails=8, binned=True)


def sample_localize_config(old, new, lattice: _Lattice, cfg: AdaptConfig, rng, cause_signal=None) -> LocalizeConfig:
    """Thresholds of :func:`localize_change` scaled to the sampling noise of two samples.

    * L1 tolerances: the upper 5% point of the L1 distance between KDEs of random
      splits of the pooled sample (the distance expected with no change at all).
    * Mean shift: ``z`` standard errors of a difference of means.
    * Spectral thresholds: ``z / sqrt(n)``, the noise level of an empirical
      characteristic function.
    """
    n1, n2 = len(old), len(new)
    pooled = np.concatenate([old, new])
    h = lattice.h_localize
    nulls = []
    for _ in range(cfg.calibration_draws):
        p = rng.permutation(pooled)
        nulls.append(l1_distance(lattice.density(p[:n1], h), lattice.density(p[n1:], h)))
    tol = float(np.quantile(nulls, 0.95))
    noise = cfg.z / math.sqrt(min(n1, n2))
    return LocalizeConfig(
        tol_nochange=tol,
        tol_remainder=tol,
        mean_tol=cfg.z * math.sqrt(1 / n1 + 1 / n2),
        rel_threshold=min(0.1, noise),
        noise_floor=noise,
        search_eps=min(noise, 0.5),
        cause_signal=cause_signal,
    )


def adapt_output_change(
    train: Dataset,
    new_output_samples: Sequence[float],
    direction: ModelKind | str = ModelKind.CAUSAL,
    config: AdaptConfig | None = None,
) -> ConditionalModel:
    """Update the model of ``P(output | input)`` after the output marginal moved.

    Causal direction: decide from the two output marginals whether the cause
    marginal or the noise changed. A cause change leaves the conditional as it
    was. A noise change is answered by deconvolving the new output marginal by
    ``P(phi(C))``. An undecided diagnosis returns the unchanged model tagged
    UNRESOLVED, with both candidates attached.

    Anticausal direction: the output is the cause, so the likelihood is kept
    and the prior is replaced by the distribution of the new samples.
    """
    cfg = config or AdaptConfig()
    kind = ModelKind(direction)
    new = np.asarray(new_output_samples, float).ravel()
    if not np.all(np.isfinite(new)):
        raise InputError("new output samples must be finite")
    if len(train) < MIN_SAMPLES or new.size < MIN_SAMPLES:
        raise InsufficientData(f"need at least {MIN_SAMPLES} training pairs and {MIN_SAMPLES} new samples")
    if kind is ModelKind.ANTICAUSAL:
        discrete = cfg.discrete
        if discrete is None:
            discrete = _looks_discrete(train.xs, train.ys, new)
        if discrete:
            return _anticausal_discrete(train, new)
        return _anticausal_continuous(train, new, cfg)
    return _causal(train, new, cfg)


def _anticausal_discrete(train: Dataset, new) -> ConditionalModel:
    cause_states = np.unique(train.ys)
    effect_states = np.unique(train.xs)
    if not np.all(np.isin(new, cause_states)):
        raise InputError("new output samples contain states absent from the training data")
    yi = np.searchsorted(cause_states, train.ys)
    xi = np.searchsorted(effect_states, train.xs)
    counts = np.zeros((effect_states.size, cause_states.size))
    np.add.at(counts, (xi, yi), 1.0)
    likelihood = StochasticMatrix(counts / counts.sum(axis=0, keepdims=True))
    prior = DiscreteDistribution.from_counts(np.array([np.sum(new == s) for s in cause_states], float))
    old_prior = DiscreteDistribution.from_counts(counts.sum(axis=0))
    return ConditionalModel(
        ModelKind.ANTICAUSAL,
        likelihood=likelihood,
        prior=prior,
        cause_states=cause_states,
        effect_states=effect_states,
        diagnostics={"old_prior": old_prior.probs.tolist()},
    )


def _anticausal_continuous(train: Dataset, new, cfg: AdaptConfig) -> ConditionalModel:
    fit = fit_anm(train, Direction.Y_TO_X, cfg.anm)
    prior = estimate_density(new, cfg.grid_size)
    return _plain_model(fit, ModelKind.ANTICAUSAL, cfg.grid_size, cause_marginal=prior)


def localize_samples(old_outputs, new_outputs, config: AdaptConfig | None = None, cause_signal_samples=None) -> ShiftDiagnosis:
    """:func:`localize_change` on two output samples, with sample-aware thresholds.

    ``cause_signal_samples`` (``phi`` applied to the training causes) lets the
    spectral check attribute zeros of the output marginal to the cause side.
    """
    cfg = config or AdaptConfig()
    old = np.asarray(old_outputs, float).ravel()
    new = np.asarray(new_outputs, float).ravel()
    if old.size < MIN_SAMPLES or new.size < MIN_SAMPLES:
        raise InsufficientData(f"need at least {MIN_SAMPLES} samples on each side")
    if not (np.all(np.isfinite(old)) and np.all(np.isfinite(new))):
        raise InputError("samples must be finite")
    lattice = _Lattice(np.concatenate([old, new]), cfg.grid_size, cfg.smoothing)
    h = lattice.h_localize
    signal = None if cause_signal_samples is None else lattice.density(np.asarray(cause_signal_samples, float), h)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.anm.seed, _CALIBRATION_TAG]))
    lcfg = sample_localize_config(old, new, lattice, cfg, rng, cause_signal=signal)
    return localize_change(lattice.density(old, h), lattice.density(new, h), lcfg)


def _causal(train: Dataset, new, cfg: AdaptConfig) -> ConditionalModel:
    fit = fit_anm(train, Direction.X_TO_Y, cfg.anm)
    base = _plain_model(fit, ModelKind.CAUSAL, cfg.grid_size)
    old = np.asarray(train.ys, float)
    phi_c = np.asarray(fit.phi(fit.cause), float)
    diagnosis = localize_samples(old, new, cfg, cause_signal_samples=phi_c)
    verdict = diagnosis.verdict
    lattice = _Lattice(np.concatenate([old, new]), cfg.grid_size, cfg.smoothing)

    if verdict in (Verdict.NO_CHANGE, Verdict.CAUSE_MARGINAL_CHANGED):
        return _replace(base, diagnosis=diagnosis)

    eps = min(0.5, max(cfg.z / math.sqrt(len(old)), 1e-4))
    hd = lattice.h_deconvolve
    try:
        noise = estimate_new_noise(
            lattice.density(phi_c, hd), lattice.density(new, hd), eps, positive_part="shift"
        )
    except DeconvolutionIllConditioned as exc:
        if verdict is Verdict.NOISE_CHANGED:
            raise
        return _replace(base, status=Status.UNRESOLVED, diagnosis=diagnosis, candidates=(base,),
                        diagnostics={**base.diagnostics, "noise_candidate": str(exc)})
    updated = _replace(base, noise=noise, diagnostics={**base.diagnostics, "noise_std": noise.std()})
    if verdict is Verdict.NOISE_CHANGED:
        return _replace(updated, diagnosis=diagnosis)
    return _replace(base, status=Status.UNRESOLVED, diagnosis=diagnosis, candidates=(base, updated))


def _replace(model: ConditionalModel, **changes) -> ConditionalModel:
    from dataclasses import replace

    return replace(model, **changes)


# -- input change, anticausal ---------------------------------------------------


def adapt_input_change(model: ConditionalModel, new_effect_marginal) -> ConditionalModel:
    """Recover the new cause marginal from a new effect marginal, the conditional held fixed.

    Discrete models invert the likelihood matrix (it must be injective).
    Continuous models are handled when the mechanism is the identity, by
    deconvolving the noise out of the new effect marginal. Any other continuous
    mechanism is returned UNRESOLVED.
    """
    if model.kind is not ModelKind.ANTICAUSAL:
        raise InputError("input-change adaptation needs an anticausal model")
    if model.discrete:
        if not isinstance(new_effect_marginal, DiscreteDistribution):
            raise InputError("a discrete model needs a discrete effect marginal")
        inv = invert_stochastic_matrix(model.likelihood, new_effect_marginal)
        return _replace(model, prior=inv.distribution, diagnostics={**model.diagnostics, "residual": inv.residual})
    if not isinstance(new_effect_marginal, GridDensity):
        raise InputError("a continuous model needs a grid density for the effect marginal")
    if not _is_identity(model):
        return _replace(model, status=Status.UNRESOLVED,
                        diagnostics={**model.diagnostics, "reason": "mechanism is not the identity"})
    noise = model.noise
    if abs(noise.step - new_effect_marginal.step) > STEP_TOL:
        raise GridMismatch("noise and effect marginal must share a step")
    cause = deconvolve(new_effect_marginal, noise)
    return _replace(model, cause_marginal=cause)


def _is_identity(model: ConditionalModel) -> bool:
    if model.mechanism is identity:
        return True
    lo, hi = _default_range(model)
    g = np.linspace(lo, hi, 257)
    scale = max(abs(lo), abs(hi), 1.0)
    return bool(np.max(np.abs(np.asarray(model.mechanism(g), float) - g)) <= 1e-9 * scale)
