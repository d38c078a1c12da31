"""Density-level tools: deconvolution, spectral zeros, change localisation.

All transforms use the discrete Fourier transform of the grid values scaled by
the grid step, so the transform of every density equals 1 at frequency zero and
frequencies are reported in cycles per unit of the grid coordinate.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import (
    DiscreteDistribution,
    GridDensity,
    StochasticMatrix,
    _check_steps,
    convolve,
    gaussian_density,
    l1_distance,
    point_mass,
)
from .errors import (
    DeconvolutionIllConditioned,
    InfeasibleMarginal,
    InputError,
    NotInjective,
)

DEFAULT_EPS = 1e-4
DEFAULT_REL_THRESHOLD = 1e-2
DEFAULT_NEG_TOL = 1e-3
ILL_CONDITIONED_FRACTION = 0.2
# zero padding factor for spectra; fine frequency sampling locates zeros to a
# small fraction of the natural resolution 1 / (len * step)
_PAD = 32
# frequencies where a Gaussian factor's transform is below this (relative) level
# are dropped by the width search; the observed spectrum is accurate to ~1e-16
_SEARCH_EPS = 1e-12


class Verdict(str, enum.Enum):
    CAUSE_MARGINAL_CHANGED = "CauseMarginalChanged"
    NOISE_CHANGED = "NoiseChanged"
    NO_CHANGE = "NoChange"
    AMBIGUOUS = "Ambiguous"


class _RawDeconvolution(NamedTuple):
    origin: float
    step: float
    values: np.ndarray  # before clipping; integrates to ~1
    clamped_fraction: float

    @property
    def negative_mass(self) -> float:
        return float(-np.sum(np.minimum(self.values, 0.0)) * self.step)


def _deconvolve_raw(observed: GridDensity, known: GridDensity, eps: float) -> _RawDeconvolution:
    _check_steps(observed, known)
    step = observed.step
    n = max(len(observed), len(known))
    obs_hat = np.fft.rfft(observed.values, n) * step
    ker_hat = np.fft.rfft(known.values, n) * step
    mag = np.abs(ker_hat)
    floor = eps * mag.max()
    clamped = mag < floor
    divisor = ker_hat.copy()
    if np.any(clamped):
        phase = np.where(mag[clamped] > 0, ker_hat[clamped] / np.where(mag[clamped] > 0, mag[clamped], 1.0), 1.0)
        divisor[clamped] = floor * phase
    res_hat = obs_hat / divisor

    # Parseval weights for a one-sided spectrum
    w = np.full(res_hat.size, 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    energy = w * np.abs(res_hat) ** 2
    total = energy.sum()
    frac = float(energy[clamped].sum() / total) if total > 0 else 1.0

    raw = np.fft.irfft(res_hat, n) / step
    # put the kernel's negative-coordinate part back where it belongs so the
    # result lives on the observed grid whenever the kernel is centred
    shift = min(max(int(round(-known.origin / step)), 0), n - 1)
    raw = np.roll(raw, shift)
    origin = observed.origin - known.origin - shift * step
    return _RawDeconvolution(origin, step, raw, frac)


def deconvolve(
    observed: GridDensity, known_factor: GridDensity, eps: float = DEFAULT_EPS, *, positive_part: str = "clip"
) -> GridDensity:
    """Solve ``observed = result * known_factor`` by regularised spectral division.

    Spectral magnitudes of ``known_factor`` below ``eps * max`` are raised to that
    floor, keeping their phase. If more than 20% of the spectral energy of the
    result sits on such clamped frequencies, the answer is dominated by the
    regulariser and :class:`DeconvolutionIllConditioned` is raised.

    ``positive_part="clip"`` sets negative values to zero and renormalises.
    ``"shift"`` instead subtracts the constant ``c`` for which ``max(f - c, 0)``
    integrates to one. That removes low-level ripple on both sides of zero,
    which clipping would turn into spurious spread when ``observed`` is estimated
    from samples.
    """
    if not 0 < eps < 1:
        raise InputError("eps must lie in (0, 1)")
    if positive_part not in ("clip", "shift"):
        raise InputError("positive_part must be 'clip' or 'shift'")
    raw = _deconvolve_raw(observed, known_factor, eps)
    if raw.clamped_fraction > ILL_CONDITIONED_FRACTION:
        raise DeconvolutionIllConditioned(
            f"{raw.clamped_fraction:.1%} of the result's spectral energy needed clamping",
            clamped_fraction=raw.clamped_fraction,
        )
    values = np.clip(raw.values, 0.0, None)
    if not values.sum() > 0:
        raise DeconvolutionIllConditioned("deconvolution left no positive mass", 1.0)
    if positive_part == "shift" and values.sum() * raw.step > 1.0:
        values = np.clip(raw.values - _mass_preserving_level(raw.values, raw.step), 0.0, None)
    return GridDensity(raw.origin, raw.step, values)


def _mass_preserving_level(values: np.ndarray, step: float) -> float:
    """The ``c >= 0`` with ``step * sum(max(values - c, 0)) == 1`` (positive mass above one)."""
    v = np.sort(values)[::-1]
    v = v[v > 0]
    # with the k largest values above c: step * (sum_k - k c) = 1
    csum = np.cumsum(v)
    k = np.arange(1, v.size + 1)
    levels = (csum - 1.0 / step) / k
    nxt = np.append(v[1:], 0.0)
    ok = (levels >= nxt) & (levels <= v)
    return float(levels[np.argmax(ok)]) if ok.any() else 0.0


# -- spectral zeros ----------------------------------------------------------


def _fft_size(*densities: GridDensity) -> int:
    m = max(len(d) for d in densities)
    return 1 << int(math.ceil(math.log2(m * _PAD)))


def spectrum(d: GridDensity, n_fft: int | None = None):
    """Return ``(frequencies, |transform|)`` on the zero-padded FFT grid."""
    n = n_fft or _fft_size(d)
    mag = np.abs(np.fft.rfft(d.values, n)) * d.step
    freqs = np.fft.rfftfreq(n, d.step)
    return freqs, mag


def _local_envelope(mag: np.ndarray, half: int) -> np.ndarray:
    from scipy.ndimage import maximum_filter1d

    return maximum_filter1d(mag, size=2 * half + 1, mode="nearest")


def _dtft_magnitude(d: GridDensity, f: float) -> float:
    k = np.arange(len(d))
    return float(abs(np.dot(d.values, np.exp(-2j * np.pi * f * d.step * k))) * d.step)


class _Zeros(NamedTuple):
    frequencies: np.ndarray
    magnitudes: np.ndarray
    freqs: np.ndarray  # padded FFT grid
    mag: np.ndarray
    env: np.ndarray


def _find_zeros(d, rel_threshold, noise_floor, n_fft) -> _Zeros:
    from scipy.optimize import minimize_scalar

    n = n_fft or _fft_size(d)
    freqs, mag = spectrum(d, n)
    env = _local_envelope(mag, max(2 * n // len(d), 2))
    dc = mag[0]
    nyq_guard = 0.9 * freqs[-1]
    inner = np.arange(1, mag.size - 1)
    is_min = (mag[inner] <= mag[inner - 1]) & (mag[inner] < mag[inner + 1])
    idx = inner[is_min]
    # an exact zero can sit half an FFT bin away from the nearest sample, where a
    # sinc-like spectrum is still ~5% of its envelope; refine on the exact transform
    idx = idx[(freqs[idx] < nyq_guard) & (mag[idx] < 0.2 * env[idx]) & (env[idx] > noise_floor * dc)]
    found, mags = [], []
    for i in idx:
        res = minimize_scalar(
            lambda f: _dtft_magnitude(d, f),
            bounds=(freqs[i - 1], freqs[i + 1]),
            method="bounded",
            options={"xatol": 1e-4 * freqs[1]},
        )
        m = min(float(res.fun), float(mag[i]))
        f = float(res.x) if res.fun <= mag[i] else float(freqs[i])
        if m < rel_threshold * dc and m < rel_threshold * env[i]:
            found.append(f)
            mags.append(m)
    return _Zeros(np.asarray(found), np.asarray(mags), freqs, mag, env)


def spectrum_zeros(
    d: GridDensity,
    rel_threshold: float = DEFAULT_REL_THRESHOLD,
    *,
    noise_floor: float = 1e-8,
    n_fft: int | None = None,
) -> list[float]:
    """Frequencies (cycles per unit) where the transform of ``d`` vanishes.

    A zero is a local minimum of ``|d_hat|`` that is below ``rel_threshold``
    times both ``|d_hat(0)|`` and the local spectral envelope, in a region where
    that envelope is above ``noise_floor * |d_hat(0)|`` (below it the spectrum is
    rounding noise). The top 10% of the band is excluded.
    """
    if not 0 < rel_threshold <= 0.1:
        raise InputError("rel_threshold must lie in (0, 0.1]")
    return [float(f) for f in _find_zeros(d, rel_threshold, noise_floor, n_fft).frequencies]


# -- maximal-width Gaussian deconvolution --------------------------------------


def _gaussian_kernel(sigma: float, step: float) -> GridDensity:
    if sigma <= 0:
        return point_mass(0.0, step)
    return gaussian_density(sigma, step, width=7.0)


def _windowed_deconvolution(d: GridDensity, kernel: GridDensity, eps: float) -> _RawDeconvolution:
    """Spectral division restricted to frequencies where ``kernel`` is resolvable.

    The quotient is tapered by a triangular window ending where ``|kernel_hat|``
    drops below ``eps * max``. The window is the spectrum of a Fejér kernel,
    which is non-negative, so the result is non-negative whenever the exact
    quotient is. A hard cutoff instead rings below zero and makes
    feasible widths look infeasible.
    """
    step = d.step
    n = len(d) + len(kernel)
    obs_hat = np.fft.rfft(d.values, n) * step
    ker_hat = np.fft.rfft(kernel.values, n) * step
    mag = np.abs(ker_hat)
    resolvable = mag >= eps * mag.max()
    if resolvable.all():
        # nothing to taper: plain division is exact
        window = np.ones(obs_hat.size)
    else:
        window = np.clip(1.0 - np.arange(obs_hat.size) / int(np.argmin(resolvable)), 0.0, None)
    live = window > 0
    res_hat = np.zeros_like(obs_hat)
    res_hat[live] = obs_hat[live] / ker_hat[live] * window[live]
    raw = np.fft.irfft(res_hat, n) / step
    shift = min(max(int(round(-kernel.origin / step)), 0), n - 1)
    raw = np.roll(raw, shift)
    return _RawDeconvolution(d.origin - kernel.origin - shift * step, step, raw, 0.0)


def negative_mass_after_gaussian(d: GridDensity, sigma: float, eps: float = _SEARCH_EPS) -> float:
    """Negative mass of ``d`` deconvolved by a centred Gaussian, before clipping."""
    return _windowed_deconvolution(d, _gaussian_kernel(sigma, d.step), eps).negative_mass


def _remainder(d: GridDensity, sigma: float, eps: float) -> GridDensity:
    if sigma <= 0:
        return d
    raw = _windowed_deconvolution(d, _gaussian_kernel(sigma, d.step), eps)
    return GridDensity(raw.origin, raw.step, np.clip(raw.values, 0.0, None))


def gaussian_max_width_deconv(d: GridDensity, neg_tol: float = DEFAULT_NEG_TOL, *, eps: float = _SEARCH_EPS):
    """Widest centred Gaussian factor of ``d`` that leaves a valid density.

    Binary search over ``sigma`` in ``[0, span / 2]`` for the largest value whose
    deconvolution has negative mass below ``neg_tol``; the search stops at a
    resolution of ``step / 100``. Returns ``(sigma, remainder)``.
    """
    if not 0 < neg_tol <= 0.05:
        raise InputError("neg_tol must lie in (0, 0.05]")
    step = d.step
    lo, hi = 0.0, (d.end - d.origin) / 2
    if negative_mass_after_gaussian(d, step / 100, eps) >= neg_tol:
        return 0.0, d
    lo = step / 100
    if negative_mass_after_gaussian(d, hi, eps) < neg_tol:
        lo = hi
    while hi - lo > step / 100:
        mid = 0.5 * (lo + hi)
        if negative_mass_after_gaussian(d, mid, eps) < neg_tol:
            lo = mid
        else:
            hi = mid
    return lo, _remainder(d, lo, eps)


def resolution_limited(density: GridDensity, sigma: float, eps: float = _SEARCH_EPS) -> GridDensity:
    """``density`` as the width search would see it after removing a Gaussian of width ``sigma``.

    Blurring by the Gaussian and undoing it through the same spectral window
    leaves ``density`` smoothed by the window's (Fejér) kernel. Remainders of
    :func:`gaussian_max_width_deconv` are compared against references passed
    through this function, since grid spikes are not recoverable exactly.
    """
    if sigma <= 0:
        return density
    kernel = _gaussian_kernel(sigma, density.step)
    raw = _windowed_deconvolution(convolve(density, kernel), kernel, eps)
    return GridDensity(raw.origin, raw.step, np.clip(raw.values, 0.0, None))


def _central_mass(d: GridDensity, radius: float) -> float:
    cdf = np.cumsum(d.values) * d.step
    median = d.grid[min(int(np.searchsorted(cdf, 0.5)), len(d) - 1)]
    return float(np.sum(d.values[np.abs(d.grid - median) <= radius]) * d.step)


def _is_near_spike(remainder: GridDensity, sigma: float, rel: float = 0.8) -> bool:
    """True if the remainder is as concentrated as a single spike seen at the search resolution."""
    spike = resolution_limited(point_mass(0.0, remainder.step), sigma)
    radius = sigma / 2
    return _central_mass(remainder, radius) >= rel * _central_mass(spike, radius)


class NoiseDecomposition(NamedTuple):
    noise: GridDensity
    signal: GridDensity
    sigma: float
    non_unique: bool


def extract_noise_from_output_marginal(effect_marginal: GridDensity, neg_tol: float = DEFAULT_NEG_TOL) -> NoiseDecomposition:
    """Split an output marginal into Gaussian noise and an indecomposable signal.

    ``non_unique`` flags the case where almost everything was absorbed by the
    Gaussian factor (the signal is close to a spike): a Gaussian marginal has no
    unique split, so the attribution to noise is arbitrary.
    """
    sigma, remainder = gaussian_max_width_deconv(effect_marginal, neg_tol)
    noise = _gaussian_kernel(sigma, effect_marginal.step)
    non_unique = sigma > 0 and _is_near_spike(remainder, sigma)
    return NoiseDecomposition(noise, remainder, sigma, non_unique)


def estimate_new_noise(
    phi_of_cause: GridDensity, effect_after: GridDensity, eps: float = DEFAULT_EPS, *, positive_part: str = "clip"
) -> GridDensity:
    """Noise density after a noise-only change: ``effect_after`` deconvolved by ``P(phi(C))``.

    The conditional of the effect given ``C = c`` is this density shifted by
    ``phi(c)``.
    """
    return deconvolve(effect_after, phi_of_cause, eps, positive_part=positive_part)


# -- change localisation -----------------------------------------------------


@dataclass(frozen=True)
class LocalizeConfig:
    tol_nochange: float = 0.02
    tol_sigma: float = 0.10
    tol_remainder: float = 0.05
    rel_threshold: float = DEFAULT_REL_THRESHOLD
    noise_floor: float = 1e-8
    neg_tol: float = DEFAULT_NEG_TOL
    # zero matching tolerance: max(zero_tol_bins FFT bins, zero_tol_rel * frequency)
    zero_tol_bins: float = 2.0
    zero_tol_rel: float = 0.01
    # mean shift (in units of the before-standard deviation) treated as a location change
    mean_tol: float = 0.02
    # optional P(phi(C)); when given, zeros it owns are told apart from noise zeros
    cause_signal: GridDensity | None = None
    # spectral window of the width search: frequencies where the Gaussian's
    # transform is below this are left out. Estimated densities need it near
    # their sampling-noise level; exact ones can use the default
    search_eps: float = _SEARCH_EPS


@dataclass(frozen=True)
class ZeroRecord:
    frequency: float
    magnitude_before: float
    magnitude_after: float
    owner: str  # "cause" or "noise"
    persisted: bool

    def to_dict(self):
        return {
            "frequency": self.frequency,
            "magnitude_before": self.magnitude_before,
            "magnitude_after": self.magnitude_after,
            "owner": self.owner,
            "persisted": self.persisted,
        }


@dataclass(frozen=True)
class ShiftDiagnosis:
    verdict: Verdict
    method: str
    l1: float
    zeros: tuple[ZeroRecord, ...] = ()
    sigma_before: float | None = None
    sigma_after: float | None = None
    remainder_l1: float | None = None
    notes: tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self):
        return {
            "verdict": self.verdict.value,
            "method": self.method,
            "l1": self.l1,
            "zeros": [z.to_dict() for z in self.zeros],
            "sigma_before": self.sigma_before,
            "sigma_after": self.sigma_after,
            "remainder_l1": self.remainder_l1,
            "notes": list(self.notes),
        }


def _near(f, candidates, tol):
    return bool(candidates.size) and bool(np.min(np.abs(candidates - f)) <= tol)


def _zero_persistence(before, after, cfg: LocalizeConfig):
    extra = [cfg.cause_signal] if cfg.cause_signal is not None else []
    n_fft = _fft_size(before, after, *extra)
    zb = _find_zeros(before, cfg.rel_threshold, cfg.noise_floor, n_fft)
    za = _find_zeros(after, cfg.rel_threshold, cfg.noise_floor, n_fft)
    zc = _find_zeros(cfg.cause_signal, cfg.rel_threshold, cfg.noise_floor, n_fft).frequencies if extra else None
    df = zb.freqs[1]

    records = []
    for f, m in zip(zb.frequencies, zb.magnitudes):
        # only zeros the after-spectrum can resolve are informative
        if np.interp(f, za.freqs, za.env) <= cfg.noise_floor * za.mag[0]:
            continue
        tol = max(cfg.zero_tol_bins * df, cfg.zero_tol_rel * f)
        owner = "cause" if zc is None or _near(f, zc, tol) else "noise"
        records.append(ZeroRecord(float(f), float(m), _dtft_magnitude(after, f), owner, _near(f, za.frequencies, tol)))
    return tuple(records)


def _state(flags):
    if not flags:
        return "absent"
    if all(flags):
        return "all"
    return "none" if not any(flags) else "mixed"


def _method1(records):
    """Verdict from zero persistence, or None when the zeros do not settle it.

    Zeros of an unchanged factor survive in the new marginal; zeros of a changed
    factor generically move or vanish.
    """
    cause = _state([r.persisted for r in records if r.owner == "cause"])
    noise = _state([r.persisted for r in records if r.owner == "noise"])
    if cause == "all" and noise != "all":
        return Verdict.NOISE_CHANGED
    if cause == "none" and noise != "none":
        return Verdict.CAUSE_MARGINAL_CHANGED
    if cause == "absent" and noise == "all":
        return Verdict.CAUSE_MARGINAL_CHANGED
    if cause == "absent" and noise == "none":
        return Verdict.NOISE_CHANGED
    return None


def _method2(before, after, cfg: LocalizeConfig):
    sb, _ = gaussian_max_width_deconv(before, cfg.neg_tol, eps=cfg.search_eps)
    sa, _ = gaussian_max_width_deconv(after, cfg.neg_tol, eps=cfg.search_eps)
    big = max(sa, sb)
    if big < 2 * before.step:
        return None, sb, sa, None
    # remainders are compared at the resolution of the data: the marginal with
    # the narrower factor is blurred by the Gaussian separating the two widths;
    # equal remainders then make it coincide with the other marginal
    narrow, wide = (before, after) if sb <= sa else (after, before)
    gap = math.sqrt(max(big**2 - min(sa, sb) ** 2, 0.0))
    rem = l1_distance(convolve(narrow, _gaussian_kernel(gap, before.step)), wide)
    sig_diff = abs(sa - sb) / big
    if sig_diff > cfg.tol_sigma and rem < cfg.tol_remainder:
        return Verdict.NOISE_CHANGED, sb, sa, rem
    if sig_diff <= cfg.tol_sigma and rem >= cfg.tol_remainder:
        return Verdict.CAUSE_MARGINAL_CHANGED, sb, sa, rem
    return None, sb, sa, rem


def localize_change(effect_before: GridDensity, effect_after: GridDensity, config: LocalizeConfig | None = None) -> ShiftDiagnosis:
    """Decide whether the cause marginal or the additive noise of ``E = phi(C) + N`` changed.

    Checks, in order: identical marginals (NoChange); a shift of the mean, which
    zero-mean noise cannot produce (CauseMarginalChanged); persistence of
    spectral zeros; and finally comparison of the widest Gaussian factors of both
    marginals. Whatever no check can settle is reported Ambiguous.
    """
    cfg = config or LocalizeConfig()
    _check_steps(effect_before, effect_after)
    l1 = l1_distance(effect_before, effect_after)
    if l1 < cfg.tol_nochange:
        return ShiftDiagnosis(Verdict.NO_CHANGE, "l1", l1)

    notes = []
    shift = abs(effect_after.mean() - effect_before.mean())
    if shift > cfg.mean_tol * effect_before.std():
        notes.append(f"mean moved by {shift:.4g}; zero-mean noise cannot move it")
        return ShiftDiagnosis(Verdict.CAUSE_MARGINAL_CHANGED, "location", l1, notes=tuple(notes))

    records = _zero_persistence(effect_before, effect_after, cfg)
    verdict = _method1(records)
    if verdict is not None:
        return ShiftDiagnosis(verdict, "spectral_zeros", l1, records, notes=tuple(notes))
    if records:
        notes.append("zero persistence inconclusive")

    verdict, sb, sa, rem = _method2(effect_before, effect_after, cfg)
    if verdict is not None:
        return ShiftDiagnosis(verdict, "gaussian_deconvolution", l1, records, sb, sa, rem, tuple(notes))
    notes.append("maximal Gaussian factors inconclusive")
    return ShiftDiagnosis(Verdict.AMBIGUOUS, "none", l1, records, sb, sa, rem, tuple(notes))


# -- discrete conditionals ---------------------------------------------------


class InversionResult(NamedTuple):
    distribution: DiscreteDistribution
    residual: float


def invert_stochastic_matrix(M: StochasticMatrix, q: DiscreteDistribution) -> InversionResult:
    """Recover the input distribution ``p`` with ``M @ p = q``.

    Requires ``M`` to be injective, i.e. of full column rank. The exact solve is
    used when it lands on the simplex; otherwise the least-squares problem is
    solved under the simplex constraint.
    """
    A = M.entries
    if len(q) != M.rows:
        raise InputError(f"marginal has {len(q)} states, matrix has {M.rows} rows")
    if M.cols > M.rows:
        raise NotInjective(f"{M.cols} input states cannot be recovered from {M.rows} output states")
    s = np.linalg.svd(A, compute_uv=False)
    rank = int(np.sum(s > 1e-10 * s[0]))
    if rank < M.cols:
        raise NotInjective(f"matrix has numerical rank {rank} < {M.cols}")

    b = q.probs
    if M.rows == M.cols:
        p = np.linalg.solve(A, b)
    else:
        p = np.linalg.lstsq(A, b, rcond=None)[0]
    if np.any(p < -1e-12) or abs(p.sum() - 1) > 1e-9:
        from scipy.optimize import nnls

        weight = 1e3
        aug = np.vstack([A, weight * np.ones((1, M.cols))])
        p = nnls(aug, np.append(b, weight))[0]
    p = np.clip(p, 0.0, None)
    p = p / p.sum()
    residual = float(np.max(np.abs(A @ p - b)))
    if residual > 1e-6:
        raise InfeasibleMarginal(f"no input distribution produces this marginal (residual {residual:.3g})")
    return InversionResult(DiscreteDistribution(p), residual)
