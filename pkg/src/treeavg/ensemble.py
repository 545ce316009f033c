"""Ensemble tree / forest over the augmented target-site data.

The target site pairs every subject in its estimation set with each
site's predicted effect, yielding rows (x_i, k, tau_hat_k(x_i)). A
regression tree (ET) or a subsampled honest forest (EF) fit on those rows
with the site index as a categorical predictor induces, through its leaf
kernel, simplex weights over the site models at any query point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tree_core as tc
from .errors import (EmptyInput, MissingModel, ModelDataMismatch,
                     SubsampleTooSmall, WidthMismatch)
from .rng import Seed, child_seed, generator

TARGET_SITE = 1


@dataclass(frozen=True)
class AugmentedRow:
    """One (subject, site-model) pairing of the augmented data."""

    x: np.ndarray
    subject_idx: int
    site_idx: int  # 1-based
    tau_hat: float
    row_weight: float = 1.0


@dataclass
class AugmentedDataset:
    """All n_subjects x K augmented rows, stored columnar.

    Rows are subject-major: the row for (subject i, site k) sits at
    i * n_sites + (k - 1).
    """

    x: np.ndarray            # (n_subjects, p) estimation-set features
    site_idx: np.ndarray     # (N,) 1-based site of each row
    tau_hat: np.ndarray      # (N,)
    row_weight: np.ndarray   # (N,)
    n_sites: int
    _design: tc.FeatureMatrix | None = field(default=None, compare=False,
                                             repr=False)

    def __post_init__(self):
        self.x = np.ascontiguousarray(np.atleast_2d(self.x), dtype=np.float64)
        self.site_idx = np.asarray(self.site_idx, dtype=np.int64)
        self.tau_hat = np.asarray(self.tau_hat, dtype=np.float64)
        self.row_weight = np.asarray(self.row_weight, dtype=np.float64)
        n_rows = self.n_subjects * self.n_sites
        if not (self.site_idx.shape[0] == self.tau_hat.shape[0]
                == self.row_weight.shape[0] == n_rows):
            raise ValueError("augmented arrays must hold n_subjects * K rows")
        if not np.all(np.isfinite(self.tau_hat)):
            raise ValueError("tau_hat must be finite")
        if np.any(self.row_weight <= 0):
            raise ValueError("row weights must be positive")

    @property
    def n_subjects(self) -> int:
        return self.x.shape[0]

    @property
    def subject_idx(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_subjects), self.n_sites)

    @property
    def rows(self) -> list[AugmentedRow]:
        subj = self.subject_idx
        return [AugmentedRow(self.x[subj[r]], int(subj[r]),
                             int(self.site_idx[r]), float(self.tau_hat[r]),
                             float(self.row_weight[r]))
                for r in range(self.site_idx.shape[0])]

    def design(self) -> tc.FeatureMatrix:
        """Predictor matrix (x columns, then the site level column)."""
        if self._design is None:
            feats = np.repeat(self.x, self.n_sites, axis=0)
            site_col = (self.site_idx - 1).astype(np.float64)
            values = np.column_stack([feats, site_col])
            kinds = tuple(tc.numeric() for _ in range(self.x.shape[1])) + (
                tc.categorical(self.n_sites),)
            self._design = tc.FeatureMatrix(values, kinds)
        return self._design


def site_size_weights(n_per_site: np.ndarray) -> np.ndarray:
    """Row weight K n_k / sum_j n_j for each site."""
    n_per_site = np.asarray(n_per_site, dtype=np.float64)
    return n_per_site.shape[0] * n_per_site / n_per_site.sum()


def build_augmented(estimation_x: np.ndarray, models: list,
                    site_size_n: np.ndarray | None = None) -> AugmentedDataset:
    """Pair every estimation-set subject with every site model's prediction.

    `models` holds one fitted (or oracle) model per site, ordered by site
    index 1..K; the target's own entry must be fit on its training half
    only. When `site_size_n` is given, rows carry the site-size weights.
    """
    estimation_x = np.ascontiguousarray(np.atleast_2d(estimation_x),
                                        dtype=np.float64)
    k_sites = len(models)
    for k, m in enumerate(models, start=1):
        if m is None:
            raise MissingModel(f"no model for site {k}")
    n = estimation_x.shape[0]
    tau = np.empty((n, k_sites))
    for k, m in enumerate(models):
        tau[:, k] = m.predict(estimation_x)
    site_idx = np.tile(np.arange(1, k_sites + 1), n)
    if site_size_n is not None:
        eta = site_size_weights(site_size_n)
        weight = np.tile(eta, n)
    else:
        weight = np.ones(n * k_sites)
    return AugmentedDataset(estimation_x, site_idx, tau.ravel(), weight,
                            k_sites)


@dataclass
class EnsembleTreeRecord:
    """Per-tree audit record: which subjects and sites each tree saw."""

    subjects: np.ndarray        # drawn subject indices
    sites: np.ndarray           # 1-based site drawn per subject
    structure_mask: np.ndarray  # True where the row placed splits


@dataclass
class EnsembleModel:
    """Fitted ensemble tree (kind 'ET') or forest (kind 'EF')."""

    kind: str
    trees: list[tc.FittedTree]
    b: int
    n_subjects: int
    n_sites: int
    n_features: int  # x columns, excluding the site column
    tree_records: list[EnsembleTreeRecord] | None = None

    def predict_at_site(self, x: np.ndarray, site: int) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.n_features:
            raise WidthMismatch(
                f"row width {x.shape[1]} != model width {self.n_features}")
        design = np.column_stack([x, np.full(x.shape[0], float(site - 1))])
        out = np.zeros(x.shape[0])
        for t in self.trees:
            out += tc.predict_tree_batch(t, design)
        return out / len(self.trees)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """The model averaging estimate: evaluate at the target site."""
        return self.predict_at_site(x, TARGET_SITE)


@dataclass
class WeightProfile:
    """Simplex weights over site models at one query point."""

    query_x: np.ndarray
    weights: np.ndarray  # (K,), weights[k-1] is site k's weight
    target_site: int = TARGET_SITE


@dataclass
class EnsembleForestOptions:
    b: int = 2000
    subject_fraction: float = 0.5
    min_leaf: int = 5
    max_depth: int | None = None
    mtry: int | None = None  # default ceil(sqrt(p + 1)), site column included
    compat_full_grid: bool = False  # ET-equivalence mode: no subsampling,
    #                                 no honesty, CV pruning


def fit_ensemble_tree(aug: AugmentedDataset, seed: Seed = 0,
                      min_leaf: int = 5, cv_folds: int = 5) -> EnsembleModel:
    """One CV-pruned regression tree on the full augmented data.

    CV folds are grouped by subject: one subject's K rows share features,
    so scattering them across folds would validate splits that only
    memorize subjects.
    """
    if aug.n_subjects == 0:
        raise EmptyInput("augmented data has no subjects")
    rng = generator(seed)
    sel = tc.cv_select_alpha(aug.design(), aug.tau_hat,
                             tc.TreeOptions(min_leaf=min_leaf),
                             folds=cv_folds, rng=rng,
                             sample_weight=aug.row_weight,
                             groups=aug.subject_idx)
    grid = EnsembleTreeRecord(np.arange(aug.n_subjects),
                              np.zeros(0, dtype=np.int64),
                              np.ones(aug.n_subjects * aug.n_sites, dtype=bool))
    return EnsembleModel("ET", [sel.tree], 1, aug.n_subjects, aug.n_sites,
                         aug.x.shape[1], [grid])


def fit_ensemble_forest(aug: AugmentedDataset,
                        opts: EnsembleForestOptions = EnsembleForestOptions(),
                        seed: Seed = 0) -> EnsembleModel:
    """Aggregate B honest trees, each on an independent-row subsample.

    Each tree draws m = floor(subject_fraction * n) distinct subjects and
    one uniformly random site per drawn subject, so no two rows of a
    tree's sample share a subject. Half of the m rows place splits; the
    other half re-estimates leaf values.
    """
    if aug.n_subjects == 0:
        raise EmptyInput("augmented data has no subjects")
    if opts.b < 1:
        raise ValueError("forest needs at least one tree")
    if opts.compat_full_grid:
        et = fit_ensemble_tree(aug, seed, min_leaf=opts.min_leaf)
        return EnsembleModel("EF", et.trees, 1, aug.n_subjects, aug.n_sites,
                             aug.x.shape[1], et.tree_records)

    n = aug.n_subjects
    k_sites = aug.n_sites
    p_design = aug.x.shape[1] + 1
    mtry = opts.mtry if opts.mtry is not None else int(np.ceil(np.sqrt(p_design)))
    m = int(np.floor(opts.subject_fraction * n))
    if m >= n and n > 1:
        m = n - 1  # per-tree subsamples must stay strictly below n
    if m < 2 * opts.min_leaf:
        raise SubsampleTooSmall(
            f"subsample of {m} subjects cannot honor min_leaf={opts.min_leaf}")
    kinds = tuple(tc.numeric() for _ in range(aug.x.shape[1])) + (
        tc.categorical(k_sites),)
    topts = tc.TreeOptions(min_leaf=opts.min_leaf, max_depth=opts.max_depth,
                           mtry=mtry if mtry < p_design else None)

    trees = []
    records = []
    for b in range(opts.b):
        rng = generator(child_seed(seed, b))
        subjects = rng.choice(n, size=m, replace=False)
        sites = rng.integers(1, k_sites + 1, size=m)
        rows = subjects * k_sites + (sites - 1)
        design = tc.FeatureMatrix(
            np.column_stack([aug.x[subjects], (sites - 1).astype(np.float64)]),
            kinds)
        tau = aug.tau_hat[rows]
        w = aug.row_weight[rows]
        perm = rng.permutation(m)
        struct = perm[:m // 2]
        est = perm[m // 2:]
        struct_fm = tc.FeatureMatrix(design.values[struct], kinds)
        tree = tc.fit_regression_tree(struct_fm, tau[struct], topts, rng,
                                      w[struct])
        est_fm = tc.FeatureMatrix(design.values[est], kinds)
        tree = tc.reestimate_leaves(tree, est_fm, tau[est], w[est])
        trees.append(tree)
        mask = np.zeros(m, dtype=bool)
        mask[struct] = True
        records.append(EnsembleTreeRecord(subjects, sites, mask))
    return EnsembleModel("EF", trees, opts.b, n, k_sites, aug.x.shape[1],
                         records)


def predict_tau_star(model: EnsembleModel, x_row: np.ndarray) -> float:
    """The model averaging estimate at one query point (site fixed at 1)."""
    x_row = np.asarray(x_row, dtype=np.float64).reshape(1, -1)
    return float(model.predict(x_row)[0])


def _check_match(model: EnsembleModel, aug: AugmentedDataset):
    if (model.n_subjects != aug.n_subjects or model.n_sites != aug.n_sites
            or model.n_features != aug.x.shape[1]):
        raise ModelDataMismatch(
            "augmented data does not match what the model was fit on")
    if model.tree_records is None:
        raise ModelDataMismatch(
            "model carries no per-tree records (imported models support "
            "prediction only)")


def _kernel_sums(model: EnsembleModel, aug: AugmentedDataset,
                 x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-site kernel mass and kernel-weighted tau sums at query points.

    For each tree, rows that share a query's leaf contribute weight
    w_r / sum(leaf w); empty honest leaves fall back to the nearest
    ancestor that estimated a value, mirroring leaf re-estimation.
    Returns (omega, tau_mass), each (n_queries, K).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.n_features:
        raise WidthMismatch(
            f"row width {x.shape[1]} != model width {model.n_features}")
    probes = np.column_stack([x, np.full(x.shape[0], float(TARGET_SITE - 1))])
    k_sites = model.n_sites
    omega = np.zeros((x.shape[0], k_sites))
    tau_mass = np.zeros((x.shape[0], k_sites))

    for tree, rec in zip(model.trees, model.tree_records):
        if model.kind == "ET" or rec.sites.shape[0] == 0:
            # full augmented grid; kernel over all training rows
            member_rows = np.arange(aug.n_subjects * aug.n_sites)
            member_x = aug.design().values
        else:
            est = ~rec.structure_mask
            subjects = rec.subjects[est]
            sites = rec.sites[est]
            member_rows = subjects * k_sites + (sites - 1)
            member_x = np.column_stack([aug.x[subjects],
                                        (sites - 1).astype(np.float64)])
        w = aug.row_weight[member_rows]
        tau = aug.tau_hat[member_rows]
        site0 = aug.site_idx[member_rows] - 1

        a = tree.arrays()
        n_nodes = len(tree.nodes)
        leaf_of = tc.route_to_leaves(tree, member_x)
        sw = np.zeros(n_nodes)
        s_site = np.zeros((n_nodes, k_sites))
        s_tau = np.zeros((n_nodes, k_sites))
        np.add.at(sw, leaf_of, w)
        np.add.at(s_site, (leaf_of, site0), w)
        np.add.at(s_tau, (leaf_of, site0), w * tau)
        for v in range(n_nodes - 1, -1, -1):
            if a.feature[v] >= 0:
                l, r = a.left[v], a.right[v]
                sw[v] += sw[l] + sw[r]
                s_site[v] += s_site[l] + s_site[r]
                s_tau[v] += s_tau[l] + s_tau[r]
        if sw[0] <= 0:
            raise ModelDataMismatch("no augmented rows reach the model's tree")
        leaves = tc.route_to_leaves(tree, probes)
        for q in range(leaves.shape[0]):
            v = leaves[q]
            while sw[v] <= 0:
                v = a.parent[v]
            omega[q] += s_site[v] / sw[v]
            tau_mass[q] += s_tau[v] / sw[v]
    return omega / len(model.trees), tau_mass / len(model.trees)


def extract_weights(model: EnsembleModel, aug: AugmentedDataset,
                    x_row: np.ndarray) -> WeightProfile:
    """Site weights induced by the ensemble's leaf kernel at a query point.

    ET: share of the query leaf's (weighted) membership per site. EF: the
    per-tree kernels averaged over trees and summed over subjects. Weights
    are nonnegative and sum to one.
    """
    _check_match(model, aug)
    omega, _ = _kernel_sums(model, aug, x_row)
    return WeightProfile(np.asarray(x_row, dtype=np.float64).copy(), omega[0])


def extract_weights_grid(model: EnsembleModel, aug: AugmentedDataset,
                         x: np.ndarray) -> np.ndarray:
    """Site weights for many query points at once, (n_queries, K)."""
    _check_match(model, aug)
    omega, _ = _kernel_sums(model, aug, x)
    return omega


def reconstruct_tau_star(model: EnsembleModel, aug: AugmentedDataset,
                         x_row: np.ndarray) -> float:
    """Rebuild the prediction from the kernel: sum_k omega_k times the
    kernel-weighted mean of site k's tau_hat. Equals predict_tau_star up
    to float roundoff; used to audit the weight extraction."""
    _check_match(model, aug)
    _, tau_mass = _kernel_sums(model, aug, x_row)
    return float(tau_mass[0].sum())
