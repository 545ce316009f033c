"""Distributed-data-network simulator.

Generates synthetic multi-site worlds with controllable cross-site
heterogeneity, runs the full pipeline (local fits, model exchange,
ensemble, baselines), and evaluates every estimator against the target
site's true effect function. Replicates are independent jobs whose random
streams derive from (base_seed, replicate, site, role), so results are
bit-reproducible at any worker count.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass

import numpy as np

from . import baselines as bl
from . import causal_local as cl
from . import ensemble as en
from . import envelope as env
from . import rng as _rng
from .errors import (EmptyInput, InvalidConfig, LengthMismatch,
                     NoConsistentSubjects)

ESTIMATORS = ("LOC", "MA", "EWMA", "EWMA-oracle", "STACK", "STACK-oracle",
              "ET", "ET-oracle", "EF", "EF-oracle")
GROUPINGS = ("discrete", "continuous", "nonlinear_power")
DESIGNS = ("experimental", "observational")
PROPENSITY_SPECS = ("oracle_half", "logistic_correct", "logistic_misspecified")
LOCAL_KINDS = ("causal_tree", "causal_forest")


@dataclass
class SimConfig:
    """Full description of one Monte Carlo scenario."""

    K: int = 20
    n_per_site: int | list[int] = 500
    D: int = 5
    grouping: str = "discrete"
    c: float = 0.0
    power_c: float | None = None
    design: str = "experimental"
    propensity_spec: str = "oracle_half"
    n_test: int = 2000
    replications: int = 100
    base_seed: int = 20260810
    local_kind: str = "causal_tree"
    weighted_by_site_size: bool = False
    ef_trees: int = 2000
    ef_subject_fraction: float = 0.8
    ef_mtry: int | None = None  # None: all columns (features plus site)
    cf_trees: int = 200
    min_leaf: int = 5
    cv_folds: int = 5
    local_prune: bool = False
    local_max_depth: int | None = 3
    local_min_leaf: int | None = None  # None: use min_leaf
    decision_metrics: bool = False

    def validate(self):
        if self.K < 2:
            raise InvalidConfig("K: need at least 2 sites")
        sizes = self.site_sizes()
        if np.any(sizes < 2):
            raise InvalidConfig("n_per_site: every site needs at least 2 rows")
        if isinstance(self.n_per_site, (list, tuple)) and \
                len(self.n_per_site) != self.K:
            raise InvalidConfig("n_per_site: list length must equal K")
        if self.D < 1:
            raise InvalidConfig("D: need at least one feature")
        if self.grouping not in GROUPINGS:
            raise InvalidConfig(f"grouping: unknown value {self.grouping!r}")
        if self.c < 0:
            raise InvalidConfig("c: heterogeneity scale must be >= 0")
        if self.grouping == "nonlinear_power" and self.power_c is None:
            raise InvalidConfig("power_c: required for nonlinear_power grouping")
        if self.design not in DESIGNS:
            raise InvalidConfig(f"design: unknown value {self.design!r}")
        if self.propensity_spec not in PROPENSITY_SPECS:
            raise InvalidConfig(
                f"propensity_spec: unknown value {self.propensity_spec!r}")
        if self.design == "observational" and self.propensity_spec == "oracle_half":
            raise InvalidConfig(
                "propensity_spec: oracle_half assumes the experimental design")
        if self.n_test < 1:
            raise InvalidConfig("n_test: need at least one test row")
        if self.replications < 1:
            raise InvalidConfig("replications: need at least one replicate")
        if self.local_kind not in LOCAL_KINDS:
            raise InvalidConfig(f"local_kind: unknown value {self.local_kind!r}")
        if not 0 < self.ef_subject_fraction <= 1:
            raise InvalidConfig("ef_subject_fraction: must be in (0, 1]")
        if self.ef_trees < 1 or self.cf_trees < 1:
            raise InvalidConfig("ef_trees / cf_trees: must be positive")

    def site_sizes(self) -> np.ndarray:
        if isinstance(self.n_per_site, (list, tuple)):
            return np.asarray(self.n_per_site, dtype=np.int64)
        return np.full(self.K, int(self.n_per_site), dtype=np.int64)


@dataclass
class TruthModel:
    """The data-generating effect and outcome surfaces."""

    u: np.ndarray
    c: float
    grouping: str
    power_c: float | None
    design: str

    def _het_coeff(self, k: int) -> float:
        if self.grouping == "nonlinear_power":
            return float(self.u[k - 1] ** self.power_c)
        return float(self.c * self.u[k - 1])

    def tau(self, x: np.ndarray, k: int) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        x1 = x[:, 0]
        return np.where(x1 > 0, x1, 0.0) + (x1 - 3) * self._het_coeff(k)

    def mean_outcome(self, x: np.ndarray, k: int) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        x1 = x[:, 0]
        prognostic = x[:, 1:min(4, x.shape[1])].sum(axis=1)
        return 0.5 * x1 + prognostic + (x1 - 3) * self._het_coeff(k)

    def propensity(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.design == "experimental":
            return np.full(x.shape[0], 0.5)
        return cl.expit(0.6 * x[:, 0])

    def propensity_model(self) -> cl.PropensityModel:
        if self.design == "experimental":
            return cl.constant_propensity(0.5)
        return cl.true_logistic_propensity({0: 0.6})

    def tau_fn(self, k: int):
        return lambda x, k=k: self.tau(x, k)


@dataclass
class SiteWorld:
    u: np.ndarray
    datasets: list[cl.SiteDataset]
    truth: TruthModel


@dataclass
class ReplicateResult:
    """Per-estimator test MSEs of one Monte Carlo replicate."""

    replicate_idx: int
    mse: dict[str, float]
    mse_ratio: dict[str, float]
    decision_value: dict[str, float] | None = None
    weights: np.ndarray | None = None


def generate_world(cfg: SimConfig, replicate_idx: int) -> SiteWorld:
    """Draw all K site datasets of one replicate.

    Outcomes follow y = m(x, k) + (z - e(x)) tau(x, k) + eps with unit
    Gaussian noise and standard normal features.
    """
    cfg.validate()
    seed = cfg.base_seed
    if cfg.grouping == "discrete":
        u = np.array([0.0 if k % 2 == 1 else 1.0 for k in range(1, cfg.K + 1)])
    else:
        hi = 3.0 if cfg.grouping == "nonlinear_power" else 1.0
        u = _rng.generator(seed, replicate_idx,
                           _rng.ROLE_GROUPING).uniform(0.0, hi, cfg.K)
    truth = TruthModel(u, cfg.c, cfg.grouping, cfg.power_c, cfg.design)

    sizes = cfg.site_sizes()
    datasets = []
    for k in range(1, cfg.K + 1):
        g = _rng.generator(seed, replicate_idx, _rng.ROLE_SITE_DATA, k)
        n_k = int(sizes[k - 1])
        x = g.standard_normal((n_k, cfg.D))
        e = truth.propensity(x)
        z = (g.random(n_k) < e).astype(np.int64)
        eps = g.standard_normal(n_k)
        y = truth.mean_outcome(x, k) + (z - e) * truth.tau(x, k) + eps
        datasets.append(cl.SiteDataset(k, x, z, y))

    g = _rng.generator(seed, replicate_idx, _rng.ROLE_TARGET_SPLIT)
    n1 = datasets[0].n
    perm = g.permutation(n1)
    datasets[0].split = cl.TargetSplit(np.sort(perm[:n1 // 2]),
                                       np.sort(perm[n1 // 2:]))
    return SiteWorld(u, datasets, truth)


def mse(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean squared error between two equal-length vectors."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise LengthMismatch(f"{pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise EmptyInput("mse of zero points")
    d = pred - truth
    return float(np.mean(d * d))


def ipw_value(test: cl.SiteDataset, rule_treat: np.ndarray,
              prop: cl.PropensityModel) -> float:
    """Inverse-propensity (Hajek) value of a treatment rule: weighted mean
    outcome among subjects whose observed treatment matches the rule."""
    rule_treat = np.asarray(rule_treat).astype(bool)
    if rule_treat.shape[0] != test.n:
        raise LengthMismatch("rule length must match the test sample")
    e = prop.predict(test.x)
    pi = np.where(test.z == 1, e, 1.0 - e)
    consistent = (test.z == 1) == rule_treat
    if not consistent.any():
        raise NoConsistentSubjects("the rule matches no observed treatment")
    w = 1.0 / pi[consistent]
    return float(np.sum(test.y[consistent] * w) / np.sum(w))


def _annotate(exc: Exception, context: str):
    raise type(exc)(f"{context}: {exc}") from exc


def _fit_site_propensity(cfg: SimConfig, data: cl.SiteDataset):
    if cfg.design == "experimental" and cfg.propensity_spec == "oracle_half":
        return None  # e = 0.5 known by design
    subset = (0,) if cfg.propensity_spec == "logistic_correct" \
        else tuple(range(data.x.shape[1]))
    return cl.fit_propensity(data, subset)


def _local_tree_options(cfg: SimConfig) -> cl.CausalTreeOptions:
    min_leaf = cfg.local_min_leaf if cfg.local_min_leaf is not None \
        else cfg.min_leaf
    return cl.CausalTreeOptions(min_leaf=min_leaf,
                                max_depth=cfg.local_max_depth,
                                prune=cfg.local_prune, cv_folds=cfg.cv_folds)


def _fit_local(cfg: SimConfig, data: cl.SiteDataset, seed) -> cl.LocalCateModel:
    prop = _fit_site_propensity(cfg, data)
    if cfg.local_kind == "causal_forest":
        opts = cl.CausalForestOptions(n_trees=cfg.cf_trees,
                                      min_leaf=cfg.min_leaf)
        return cl.fit_causal_forest(data, prop, opts, seed)
    return cl.fit_causal_tree(data, prop, _local_tree_options(cfg), seed)


def run_replicate(cfg: SimConfig, replicate_idx: int,
                  estimators: tuple[str, ...] = ("LOC", "ET", "EF")
                  ) -> ReplicateResult:
    """One end-to-end replicate.

    Fits every site model, pushes each through the model-exchange format
    (the simulated network boundary), builds the augmented data, fits the
    requested estimators, and scores them on a fresh test draw from the
    target site's covariate distribution. LOC is always computed: it is
    the ratio denominator.
    """
    wanted = tuple(dict.fromkeys(estimators))
    if not wanted:
        raise InvalidConfig("estimators: empty selection")
    for name in wanted:
        if name not in ESTIMATORS:
            raise InvalidConfig(f"estimators: unknown estimator {name!r}")
    world = generate_world(cfg, replicate_idx)
    truth = world.truth
    target = world.datasets[0]
    seed = cfg.base_seed

    needs_locals = any(e in wanted for e in
                       ("MA", "EWMA", "EWMA-oracle", "STACK", "STACK-oracle",
                        "ET", "EF"))
    models = None
    if needs_locals:
        models = []
        for k, data in enumerate(world.datasets, start=1):
            fit_data = data.subset(data.split.train_idx) if k == 1 else data
            try:
                m = _fit_local(cfg, fit_data,
                               _rng.child_seed(seed, replicate_idx,
                                               _rng.ROLE_LOCAL_FIT, k))
                # the only object that crosses the site boundary
                m = env.import_model_bytes(env.export_model_bytes(m))
            except Exception as exc:  # noqa: BLE001
                _annotate(exc, f"replicate {replicate_idx}, local model, site {k}")
            models.append(m)

    try:
        loc = bl.loc_fit(target, _fit_site_propensity(cfg, target),
                         _local_tree_options(cfg),
                         _rng.child_seed(seed, replicate_idx, _rng.ROLE_LOC_FIT))
    except Exception as exc:  # noqa: BLE001
        _annotate(exc, f"replicate {replicate_idx}, estimator LOC")

    x_est = target.x[target.split.estimate_idx]
    size_arg = cfg.site_sizes() if cfg.weighted_by_site_size else None

    reference = None
    if any(e in wanted for e in ("EWMA", "STACK")):
        est_data = target.subset(target.split.estimate_idx)
        try:
            ref_model = cl.fit_causal_tree(
                est_data, _fit_site_propensity(cfg, est_data),
                _local_tree_options(cfg),
                _rng.child_seed(seed, replicate_idx, _rng.ROLE_REFERENCE_FIT))
        except Exception as exc:  # noqa: BLE001
            _annotate(exc, f"replicate {replicate_idx}, reference model")
        reference = ref_model.predict(x_est)
    oracle_reference = truth.tau(x_est, 1) \
        if any(e in wanted for e in ("EWMA-oracle", "STACK-oracle")) else None

    aug = None
    if any(e in wanted for e in ("ET", "EF")):
        aug = en.build_augmented(x_est, models, size_arg)
    aug_oracle = None
    if any(e in wanted for e in ("ET-oracle", "EF-oracle")):
        oracle = bl.oracle_models([truth.tau_fn(k)
                                   for k in range(1, cfg.K + 1)])
        aug_oracle = en.build_augmented(x_est, oracle, size_arg)

    fitted: dict[str, object] = {}
    for name in wanted:
        try:
            if name == "ET":
                fitted[name] = en.fit_ensemble_tree(
                    aug, _rng.child_seed(seed, replicate_idx, _rng.ROLE_ET_FIT),
                    min_leaf=cfg.min_leaf, cv_folds=cfg.cv_folds)
            elif name == "ET-oracle":
                fitted[name] = en.fit_ensemble_tree(
                    aug_oracle,
                    _rng.child_seed(seed, replicate_idx, _rng.ROLE_ET_ORACLE_FIT),
                    min_leaf=cfg.min_leaf, cv_folds=cfg.cv_folds)
            elif name in ("EF", "EF-oracle"):
                opts = en.EnsembleForestOptions(
                    b=cfg.ef_trees, subject_fraction=cfg.ef_subject_fraction,
                    min_leaf=cfg.min_leaf,
                    mtry=cfg.ef_mtry if cfg.ef_mtry is not None else cfg.D + 1)
                role = _rng.ROLE_EF_FIT if name == "EF" else _rng.ROLE_EF_ORACLE_FIT
                fitted[name] = en.fit_ensemble_forest(
                    aug if name == "EF" else aug_oracle, opts,
                    _rng.child_seed(seed, replicate_idx, role))
            elif name == "EWMA":
                fitted[name] = bl.ewma_weights(models, reference, x_est)
            elif name == "EWMA-oracle":
                fitted[name] = bl.ewma_weights(models, oracle_reference, x_est,
                                               scheme="EWMA_oracle")
            elif name == "STACK":
                fitted[name] = bl.stack_fit(models, reference, x_est)
            elif name == "STACK-oracle":
                fitted[name] = bl.stack_fit(models, oracle_reference, x_est,
                                            scheme="STACK_oracle")
            elif name == "MA":
                fitted[name] = bl.ma_weights(cfg.K)
        except Exception as exc:  # noqa: BLE001
            _annotate(exc, f"replicate {replicate_idx}, estimator {name}")

    g_test = _rng.generator(seed, replicate_idx, _rng.ROLE_TEST_DRAW)
    x_test = g_test.standard_normal((cfg.n_test, cfg.D))
    tau_true = truth.tau(x_test, 1)

    def predictions(name: str, x: np.ndarray) -> np.ndarray:
        if name == "LOC":
            return loc.predict(x)
        obj = fitted[name]
        if isinstance(obj, bl.AveragingWeights):
            return bl.averaged_predict(obj, models, x)
        return obj.predict(x)

    out_mse = {"LOC": mse(loc.predict(x_test), tau_true)}
    for name in wanted:
        if name != "LOC":
            out_mse[name] = mse(predictions(name, x_test), tau_true)
    ratios = {name: (1.0 if name == "LOC" else out_mse[name] / out_mse["LOC"])
              for name in out_mse}

    decision = None
    if cfg.decision_metrics:
        g = _rng.generator(seed, replicate_idx, _rng.ROLE_DECISION_DRAW)
        xd = g.standard_normal((cfg.n_test, cfg.D))
        e = truth.propensity(xd)
        zd = (g.random(cfg.n_test) < e).astype(np.int64)
        yd = truth.mean_outcome(xd, 1) + (zd - e) * truth.tau(xd, 1) \
            + g.standard_normal(cfg.n_test)
        dec_data = cl.SiteDataset(1, xd, zd, yd)
        prop = truth.propensity_model()
        decision = {"baseline": ipw_value(dec_data, dec_data.z == 1, prop)}
        for name in ("LOC",) + tuple(n for n in wanted if n != "LOC"):
            rule = predictions(name, xd) > 0
            try:
                decision[name] = ipw_value(dec_data, rule, prop)
            except NoConsistentSubjects:
                decision[name] = float("nan")

    return ReplicateResult(replicate_idx, out_mse, ratios, decision)


def _replicate_job(args):
    cfg, idx, estimators = args
    return run_replicate(cfg, idx, estimators)


def run_many(cfg: SimConfig, estimators: tuple[str, ...] = ("LOC", "ET", "EF"),
             threads: int = 1) -> list[ReplicateResult]:
    """All replicates of a scenario, optionally across worker processes.

    Results are identical for any worker count because each replicate's
    streams derive from (base_seed, replicate index) alone.
    """
    cfg.validate()
    jobs = [(cfg, i, tuple(estimators)) for i in range(cfg.replications)]
    if threads <= 1 or cfg.replications == 1:
        results = [_replicate_job(j) for j in jobs]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_replicate_job, jobs, chunksize=1))
    return sorted(results, key=lambda r: r.replicate_idx)


@dataclass
class EstimatorSummary:
    """One summary row: mean/SD MSE ratios and per-replicate quantiles."""

    estimator: str
    mean_ratio: float
    sd_ratio: float
    q25: float
    q50: float
    q75: float


def summarize(results: list[ReplicateResult]) -> list[EstimatorSummary]:
    """Ratio of mean MSEs and ratio of MSE standard deviations against
    LOC, plus quantiles of the per-replicate ratio distribution."""
    if not results:
        raise EmptyInput("no replicates to summarize")
    names = [n for n in ESTIMATORS if n in results[0].mse]
    loc = np.array([r.mse["LOC"] for r in results])
    rows = []
    for name in names:
        vals = np.array([r.mse[name] for r in results])
        ratios = np.array([r.mse_ratio[name] for r in results])
        if name == "LOC":
            mean_ratio, sd_ratio = 1.0, 1.0
        else:
            mean_ratio = float(vals.mean() / loc.mean())
            sd_ratio = float(vals.std(ddof=1) / loc.std(ddof=1)) \
                if len(results) > 1 else float("nan")
        q25, q50, q75 = (float(q) for q in
                         np.percentile(ratios, [25, 50, 75]))
        rows.append(EstimatorSummary(name, mean_ratio, sd_ratio, q25, q50, q75))
    return rows
