"""Competing estimators the simulator compares against.

LOC fits the target site alone; MA averages all site models equally;
EWMA softmax-weights models by their squared disagreement with a local
reference fit; STACK regresses the reference on model predictions. The
"-oracle" variants swap the fitted reference for the true effect
function, sharing the same code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .causal_local import (CausalTreeOptions, LocalCateModel, OracleCateModel,
                           PropensityModel, SiteDataset, fit_causal_tree)
from .errors import LengthMismatch
from .rng import Seed

SIMPLEX_SCHEMES = ("MA", "EWMA", "EWMA_oracle")


@dataclass
class AveragingWeights:
    """A fixed weight vector over the K site models.

    MA/EWMA weights live on the simplex; stacking coefficients are
    unconstrained regression coefficients.
    """

    scheme: str
    values: np.ndarray
    constrained_simplex: bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("weights must be finite")


def loc_fit(target: SiteDataset, prop: PropensityModel | None = None,
            opts: CausalTreeOptions = CausalTreeOptions(),
            seed: Seed = 0) -> LocalCateModel:
    """The local-only benchmark: a causal tree on the full target sample,
    training and estimation halves combined."""
    full = SiteDataset(target.site_id, target.x, target.z, target.y)
    return fit_causal_tree(full, prop, opts, seed)


def ma_weights(k_sites: int) -> AveragingWeights:
    """Equal weights: assumes all site models are interchangeable."""
    return AveragingWeights("MA", np.full(k_sites, 1.0 / k_sites), True)


def _prediction_matrix(models: list, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = np.empty((x.shape[0], len(models)))
    for k, m in enumerate(models):
        out[:, k] = m.predict(x)
    return out


def ewma_weights(models: list, reference: np.ndarray, aug_x: np.ndarray,
                 scheme: str = "EWMA") -> AveragingWeights:
    """Softmax over negative prediction SSE against the reference.

    Computed in log space with max subtraction, so a model whose SSE is
    far larger than the best underflows to an exact zero weight instead
    of producing NaNs.
    """
    reference = np.asarray(reference, dtype=np.float64)
    preds = _prediction_matrix(models, aug_x)
    sse = ((preds - reference[:, None]) ** 2).sum(axis=0)
    log_w = -sse
    log_w -= log_w.max()
    w = np.exp(log_w)
    return AveragingWeights(scheme, w / w.sum(), True)


def stack_fit(models: list, reference: np.ndarray, aug_x: np.ndarray,
              scheme: str = "STACK") -> AveragingWeights:
    """No-intercept least squares of the reference on model predictions.

    Rank-deficient designs (common when site models nearly coincide) get
    the minimum-norm solution.
    """
    reference = np.asarray(reference, dtype=np.float64)
    preds = _prediction_matrix(models, aug_x)
    coef, *_ = np.linalg.lstsq(preds, reference, rcond=None)
    return AveragingWeights(scheme, coef, False)


def averaged_predict(weights: AveragingWeights, models: list,
                     x: np.ndarray) -> np.ndarray:
    """Weighted combination of the site models' predictions."""
    if weights.values.shape[0] != len(models):
        raise LengthMismatch(
            f"{weights.values.shape[0]} weights for {len(models)} models")
    return _prediction_matrix(models, x) @ weights.values


def oracle_models(truth_fns: list) -> list[OracleCateModel]:
    """Wrap the true per-site effect functions so oracle variants run
    through the same pipelines as fitted models."""
    return [OracleCateModel(k, fn) for k, fn in enumerate(truth_fns, start=1)]
