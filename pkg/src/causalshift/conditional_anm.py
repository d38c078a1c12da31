"""One mechanism shared by several datasets whose noise distributions differ.

Each dataset ``i`` follows ``E = phi(C) + N_i``. The mechanism is fitted on the
pooled pairs; every dataset keeps its own residuals, centred by a per-dataset
offset, and its own independence test.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .anm import (
    MIN_ANM_SAMPLES,
    AnmConfig,
    Direction,
    Mechanism,
    canonical_order,
    cause_effect,
    fit_regression,
    residual_independence,
    residuals_are_zero,
)
from .core import AUTO, Dataset, GridDensity, estimate_density, point_mass
from .errors import EmptyInput, IndexOutOfRange, InsufficientData


@dataclass(frozen=True)
class DatasetResiduals:
    residuals: np.ndarray
    independence_pvalue: float
    hsic_value: float
    # added to the shared mechanism to predict this dataset's effect
    offset: float
    cause: np.ndarray

    def to_dict(self) -> dict:
        return {
            "n": int(self.residuals.size),
            "independence_pvalue": self.independence_pvalue,
            "hsic_value": self.hsic_value,
            "offset": self.offset,
            "residual_std": float(np.std(self.residuals)),
        }


@dataclass(frozen=True)
class SharedAnmFit:
    phi: Mechanism
    per_dataset: tuple[DatasetResiduals, ...]
    direction: Direction

    def to_dict(self, grid_points: int = 101) -> dict:
        lo = min(float(d.cause.min()) for d in self.per_dataset)
        hi = max(float(d.cause.max()) for d in self.per_dataset)
        return {
            "direction": self.direction.value,
            "bandwidth": self.phi.regression.bandwidth,
            "mechanism": self.phi.sample(np.linspace(lo, hi, grid_points)),
            "per_dataset": [d.to_dict() for d in self.per_dataset],
        }


def fit_shared_anm(datasets: Sequence, config: AnmConfig | None = None, direction=Direction.X_TO_Y) -> SharedAnmFit:
    """Fit one mechanism on the pooled data and test each dataset's residuals separately.

    With several datasets the pooled regression is refitted with each point
    weighted by the inverse residual variance of its dataset.

    Every dataset is tested with the same permutation seed. Its p-value then
    does not depend on its position in the list, and a single dataset
    reproduces :func:`fit_anm` exactly.
    """
    cfg = config or AnmConfig()
    datasets = list(datasets)
    if not datasets:
        raise EmptyInput("no datasets given")
    direction = Direction(direction)
    pairs = [cause_effect(d, direction) for d in datasets]
    for i, (c, _) in enumerate(pairs):
        if c.size < MIN_ANM_SAMPLES:
            raise InsufficientData(f"dataset {i} has {c.size} points; at least {MIN_ANM_SAMPLES} needed")

    cause_all = np.concatenate([c for c, _ in pairs])
    effect_all = np.concatenate([e for _, e in pairs])
    pooled = canonical_order(cause_all, effect_all)
    reg = fit_regression(pooled, cfg.bandwidth)
    if len(pairs) > 1:
        # second pass weights each dataset by its residual precision, so a noisy
        # dataset does not dictate the fit (or the bandwidth) where a quiet one lives
        var = np.array([np.var(e - reg(c)) for c, e in pairs])
        if np.all(var > 0):
            w_all = np.concatenate([np.full(c.size, var.min() / v) for (c, _), v in zip(pairs, var)])
            order = np.lexsort((w_all, effect_all, cause_all))
            pooled = Dataset(cause_all[order], effect_all[order])
            reg = fit_regression(pooled, cfg.bandwidth, weights=w_all[order])
    pooled_offset = float(np.mean(pooled.ys - reg(pooled.xs)))

    entries = []
    for cause, effect in pairs:
        raw = effect - reg(cause)
        offset = float(np.mean(raw))
        res = raw - offset
        if residuals_are_zero(res, effect):
            res = np.zeros_like(res)
        test = residual_independence(cause, res, effect, cfg)
        res.setflags(write=False)
        # a single dataset is its own pool; the two means differ only in summation order
        rel = offset - pooled_offset if len(pairs) > 1 else 0.0
        entries.append(DatasetResiduals(res, test.pvalue, test.hsic_value, rel, cause))
    return SharedAnmFit(Mechanism(reg, pooled_offset), tuple(entries), direction)


def residual_density(residuals, grid_size: int = 512, bandwidth=AUTO) -> GridDensity:
    """Density estimate of residuals; all-zero residuals give a point mass at 0."""
    r = np.asarray(residuals, float)
    if np.ptp(r) == 0:
        return point_mass(0.0, 1e-6)
    return estimate_density(r, grid_size, bandwidth)


def transfer_predict(shared: SharedAnmFit, target_index: int, x: float, grid_size: int = 512):
    """Predictive conditional in a target domain: ``(phi(x) + offset, noise density)``.

    The effect given ``C = x`` in the target domain is the returned noise density
    shifted by the returned mean.
    """
    n = len(shared.per_dataset)
    if not isinstance(target_index, (int, np.integer)) or not 0 <= target_index < n:
        raise IndexOutOfRange(f"target_index {target_index!r} outside 0..{n - 1}")
    entry = shared.per_dataset[target_index]
    mean = float(shared.phi(float(x))) + entry.offset
    return mean, residual_density(entry.residuals, grid_size)
