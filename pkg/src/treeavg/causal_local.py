"""Per-site CATE estimation.

Each site fits its own model on private subject-level data and exports
only the fitted function. The default learner is an honest causal tree:
the tree structure is placed on an inverse-propensity-transformed outcome
using one half of the data, and leaf effects are re-estimated on the
other half as IPW differences of arm means. A small honest causal forest
is available as a variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tree_core as tc
from .errors import PositivityViolation, WidthMismatch
from .rng import Seed, child_seed, generator

PROPENSITY_CLIP = (0.01, 0.99)
_IRLS_TOL = 1e-8
_IRLS_MAX_ITER = 50
_SEPARATION_BOUND = 20.0


@dataclass(frozen=True)
class SubjectRecord:
    """One subject: features, binary treatment, outcome."""

    x: np.ndarray
    z: int
    y: float


@dataclass
class TargetSplit:
    """Index partition of the target site into training and estimation sets."""

    train_idx: np.ndarray
    estimate_idx: np.ndarray


@dataclass
class SiteDataset:
    """A site's private sample, stored columnar."""

    site_id: int
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    split: TargetSplit | None = None

    def __post_init__(self):
        self.x = np.ascontiguousarray(np.atleast_2d(self.x), dtype=np.float64)
        self.z = np.asarray(self.z, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.float64)
        n = self.x.shape[0]
        if self.z.shape[0] != n or self.y.shape[0] != n:
            raise ValueError("x, z, y must have equal row counts")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("features and outcomes must be finite")
        if not np.all((self.z == 0) | (self.z == 1)):
            raise ValueError("treatment indicator must be 0/1")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def records(self) -> list[SubjectRecord]:
        return [SubjectRecord(self.x[i], int(self.z[i]), float(self.y[i]))
                for i in range(self.n)]

    @classmethod
    def from_records(cls, site_id: int, records: list[SubjectRecord],
                     split: TargetSplit | None = None) -> "SiteDataset":
        return cls(site_id,
                   np.array([r.x for r in records], dtype=np.float64),
                   np.array([r.z for r in records]),
                   np.array([r.y for r in records]),
                   split)

    def subset(self, idx: np.ndarray) -> "SiteDataset":
        return SiteDataset(self.site_id, self.x[idx], self.z[idx], self.y[idx])


def expit(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class PropensityModel:
    """Logistic treatment model: intercept plus slopes on a column subset.

    `fallback` marks a separation fallback to a constant (clipped
    empirical treated fraction) propensity.
    """

    coefficients: np.ndarray
    feature_idx: tuple[int, ...]
    clip: tuple[float, float] = PROPENSITY_CLIP
    fallback: bool = False

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("propensity coefficients must be finite")
        lo, hi = self.clip
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError("clip bounds must satisfy 0 < lo <= hi < 1")

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        eta = np.full(x.shape[0], self.coefficients[0])
        if self.feature_idx:
            eta = eta + x[:, list(self.feature_idx)] @ self.coefficients[1:]
        return np.clip(expit(eta), self.clip[0], self.clip[1])


def constant_propensity(p: float) -> PropensityModel:
    """A known, feature-free propensity (e.g. 0.5 in a randomized design)."""
    p = min(max(p, PROPENSITY_CLIP[0]), PROPENSITY_CLIP[1])
    return PropensityModel(np.array([np.log(p / (1 - p))]), ())


def true_logistic_propensity(slope_by_column: dict[int, float]) -> PropensityModel:
    """The data-generating logistic propensity, expressed as a model."""
    cols = tuple(sorted(slope_by_column))
    coef = np.array([0.0] + [slope_by_column[c] for c in cols])
    return PropensityModel(coef, cols)


def fit_propensity(data: SiteDataset,
                   feature_subset: tuple[int, ...] = ()) -> PropensityModel:
    """Logistic regression of z on the given columns via IRLS.

    Falls back to a constant propensity (flagged) if the solver separates
    or the normal equations become singular.
    """
    if data.z.sum() == 0 or data.z.sum() == data.n:
        raise PositivityViolation(f"site {data.site_id}: one arm is empty")
    cols = tuple(feature_subset)
    design = np.column_stack([np.ones(data.n)] +
                             [data.x[:, c] for c in cols])
    z = data.z.astype(np.float64)
    beta = np.zeros(design.shape[1])
    for _ in range(_IRLS_MAX_ITER):
        p = expit(design @ beta)
        p = np.clip(p, 1e-10, 1 - 1e-10)
        wdiag = p * (1 - p)
        hess = design.T @ (design * wdiag[:, None])
        grad = design.T @ (z - p)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return _propensity_fallback(data)
        beta = beta + step
        if np.max(np.abs(beta)) > _SEPARATION_BOUND:
            return _propensity_fallback(data)
        if np.max(np.abs(step)) < _IRLS_TOL:
            break
    return PropensityModel(beta, cols)


def _propensity_fallback(data: SiteDataset) -> PropensityModel:
    p = float(np.clip(data.z.mean(), PROPENSITY_CLIP[0], PROPENSITY_CLIP[1]))
    return PropensityModel(np.array([np.log(p / (1 - p))]), (),
                           fallback=True)


@dataclass
class HonestySplit:
    """Which rows placed splits and which estimated leaf effects."""

    structure_idx: np.ndarray | None
    estimate_idx: np.ndarray | None
    structure_count: int
    estimate_count: int


@dataclass
class LocalCateModel:
    """A site's fitted CATE function; exportable without any subject rows."""

    site_id: int
    kind: str  # "causal_tree" | "causal_forest"
    trees: list[tc.FittedTree]
    honesty: HonestySplit | None = None
    propensity_fallback: bool = False

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.zeros(x.shape[0])
        for t in self.trees:
            out += tc.predict_tree_batch(t, x)
        return out / len(self.trees)

    @property
    def n_features(self) -> int:
        return self.trees[0].n_features


@dataclass
class OracleCateModel:
    """An analytic CATE function wrapped with the LocalCateModel surface."""

    site_id: int
    fn: object  # callable(matrix) -> vector
    kind: str = "oracle"

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.asarray(self.fn(x), dtype=np.float64)


def predict_tau(model, x_row: np.ndarray) -> float:
    """Point CATE prediction from any site model."""
    x_row = np.asarray(x_row, dtype=np.float64).reshape(1, -1)
    if hasattr(model, "n_features") and x_row.shape[1] != model.n_features:
        raise WidthMismatch(
            f"row width {x_row.shape[1]} != model width {model.n_features}")
    return float(model.predict(x_row)[0])


@dataclass
class CausalTreeOptions:
    min_leaf: int = 5
    max_depth: int | None = None
    mtry: int | None = None
    prune: bool = True
    cv_folds: int = 5
    # Center outcomes with a baseline fit before the IPW transform when
    # placing splits. Leaves E[y* | x] = tau(x) untouched but strips the
    # mean surface's contribution to the transform's variance; without it
    # the split signal drowns at realistic sample sizes.
    center_baseline: bool = True


@dataclass
class CausalForestOptions:
    n_trees: int = 200
    subsample_fraction: float = 0.5
    min_leaf: int = 5
    max_depth: int | None = None
    mtry: int | None = None  # default ceil(sqrt(p))
    prune: bool = False


def ipw_transform(data: SiteDataset, prop: PropensityModel | None,
                  baseline: np.ndarray | None = None) -> np.ndarray:
    """Transformed outcome whose conditional mean is the CATE:
    y* = y z / e(x) - y (1 - z) / (1 - e(x)); with e = 0.5 this is
    2 y (2z - 1).

    An optional baseline b(x) is subtracted from y first. Because
    E[z/e - (1-z)/(1-e) | x] = 0, any fixed baseline leaves E[y* | x]
    equal to the CATE while removing the baseline's variance.
    """
    e = np.full(data.n, 0.5) if prop is None else prop.predict(data.x)
    z = data.z.astype(np.float64)
    y = data.y if baseline is None else data.y - baseline
    return y * z / e - y * (1 - z) / (1 - e)


def _ipw_leaf_estimates(tree: tc.FittedTree, data: SiteDataset,
                        prop: PropensityModel | None) -> tc.FittedTree:
    """Honest re-population of leaf effects as Hajek IPW differences of
    arm means; leaves with an empty arm inherit the parent estimate."""
    e = np.full(data.n, 0.5) if prop is None else prop.predict(data.x)
    z = data.z.astype(np.float64)
    w1 = z / e
    w0 = (1 - z) / (1 - e)
    a = tree.arrays()
    n_nodes = len(tree.nodes)
    leaves = tc.route_to_leaves(tree, data.x)
    sw1 = np.zeros(n_nodes)
    sw0 = np.zeros(n_nodes)
    sy1 = np.zeros(n_nodes)
    sy0 = np.zeros(n_nodes)
    cnt = np.zeros(n_nodes, dtype=np.int64)
    np.add.at(sw1, leaves, w1)
    np.add.at(sw0, leaves, w0)
    np.add.at(sy1, leaves, w1 * data.y)
    np.add.at(sy0, leaves, w0 * data.y)
    np.add.at(cnt, leaves, 1)
    for v in range(n_nodes - 1, -1, -1):
        if a.feature[v] >= 0:
            l, r = a.left[v], a.right[v]
            sw1[v] += sw1[l] + sw1[r]
            sw0[v] += sw0[l] + sw0[r]
            sy1[v] += sy1[l] + sy1[r]
            sy0[v] += sy0[l] + sy0[r]
            cnt[v] += cnt[l] + cnt[r]
    if sw1[0] <= 0 or sw0[0] <= 0:
        raise PositivityViolation(
            f"site {data.site_id}: estimation half lacks a treatment arm")
    new_nodes = []
    for nd in tree.nodes:
        v = nd.node_id
        u = v
        while sw1[u] <= 0 or sw0[u] <= 0:
            u = a.parent[u]
        value = sy1[u] / sw1[u] - sy0[u] / sw0[u]
        new_nodes.append(replace(nd, leaf_value=float(value),
                                 n_node=int(cnt[v])))
    return tc.FittedTree(new_nodes, tree.n_features, tree.column_kinds,
                         complexity_alpha=tree.complexity_alpha)


def _check_positivity(data: SiteDataset):
    n1 = int(data.z.sum())
    if n1 == 0 or n1 == data.n:
        raise PositivityViolation(f"site {data.site_id}: one arm is empty")


def _fit_honest_causal_tree(data: SiteDataset, prop: PropensityModel | None,
                            opts: CausalTreeOptions,
                            rng: np.random.Generator) -> tuple[tc.FittedTree,
                                                               HonestySplit]:
    perm = rng.permutation(data.n)
    structure_idx = np.sort(perm[:data.n // 2])
    estimate_idx = np.sort(perm[data.n // 2:])
    structure = data.subset(structure_idx)
    estimate = data.subset(estimate_idx)
    fm = tc.all_numeric(structure.x)
    baseline = None
    if opts.center_baseline and structure.n >= 2 * opts.min_leaf:
        # outcome surface fit on the structure half only, so the estimate
        # half still never influences split placement
        base_tree = tc.cv_select_alpha(
            fm, structure.y, tc.TreeOptions(min_leaf=opts.min_leaf),
            folds=opts.cv_folds, rng=rng).tree
        baseline = tc.predict_tree_batch(base_tree, structure.x)
    y_star = ipw_transform(structure, prop, baseline)
    topts = tc.TreeOptions(opts.min_leaf, opts.max_depth, opts.mtry)
    if opts.prune:
        tree = tc.cv_select_alpha(fm, y_star, topts, opts.cv_folds, rng).tree
    else:
        tree = tc.fit_regression_tree(fm, y_star, topts, rng)
    tree = _ipw_leaf_estimates(tree, estimate, prop)
    honesty = HonestySplit(structure_idx, estimate_idx,
                           len(structure_idx), len(estimate_idx))
    return tree, honesty


def fit_causal_tree(data: SiteDataset, prop: PropensityModel | None = None,
                    opts: CausalTreeOptions = CausalTreeOptions(),
                    seed: Seed = 0) -> LocalCateModel:
    """Honest causal tree on one site's data.

    Half the rows place splits on the IPW-transformed outcome (with CV
    pruning by default); the other half re-estimates each leaf's effect.
    """
    _check_positivity(data)
    rng = generator(seed)
    tree, honesty = _fit_honest_causal_tree(data, prop, opts, rng)
    return LocalCateModel(data.site_id, "causal_tree", [tree], honesty,
                          propensity_fallback=bool(prop and prop.fallback))


def fit_causal_forest(data: SiteDataset, prop: PropensityModel | None = None,
                      opts: CausalForestOptions = CausalForestOptions(),
                      seed: Seed = 0) -> LocalCateModel:
    """Average of honest causal trees on without-replacement subsamples."""
    _check_positivity(data)
    p = data.x.shape[1]
    mtry = opts.mtry if opts.mtry is not None else int(np.ceil(np.sqrt(p)))
    tree_opts = CausalTreeOptions(opts.min_leaf, opts.max_depth,
                                  mtry if mtry < p else None,
                                  prune=opts.prune)
    m = min(int(np.floor(opts.subsample_fraction * data.n)), data.n)
    trees = []
    for b in range(opts.n_trees):
        rng = generator(child_seed(seed, b))
        if m < data.n:
            rows = np.sort(rng.choice(data.n, size=m, replace=False))
            sub = data.subset(rows)
        else:
            sub = data
        tree, _ = _fit_honest_causal_tree(sub, prop, tree_opts, rng)
        trees.append(tree)
    honesty = HonestySplit(None, None, m // 2, m - m // 2)
    return LocalCateModel(data.site_id, "causal_forest", trees, honesty,
                          propensity_fallback=bool(prop and prop.fallback))
