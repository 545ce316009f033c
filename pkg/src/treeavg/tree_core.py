"""Piecewise-constant regression trees: fit, predict, prune, cross-validate.

The same engine backs the site-local causal learners and the ensemble
tree/forest. Trees are grown by greedy binary splitting on weighted SSE,
support numeric and categorical columns, and are immutable once built.

Conventions fixed here for reproducibility:
  - numeric rows route left iff value <= threshold (thresholds are
    midpoints between consecutive distinct training values);
  - categorical rows route left iff the level is in the stored left set;
    levels unseen at the node route right;
  - split ties prefer the lowest column index, then the smallest
    threshold / shortest level prefix.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _split
from .errors import EmptyInput, WidthMismatch

_IMPROVE_TOL = 1e-12


@dataclass(frozen=True)
class ColumnKind:
    kind: str  # "numeric" | "categorical"
    levels: int | None = None

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise ValueError(f"unknown column kind {self.kind!r}")
        if self.kind == "categorical" and (self.levels is None or self.levels < 1):
            raise ValueError("categorical column needs a positive level count")


def numeric() -> ColumnKind:
    return ColumnKind("numeric")


def categorical(levels: int) -> ColumnKind:
    return ColumnKind("categorical", levels)


@dataclass
class FeatureMatrix:
    """A validated (rows x columns) block of covariates.

    Categorical columns hold integer level codes in [0, levels) stored as
    floats alongside the numeric columns.
    """

    values: np.ndarray
    column_kinds: tuple[ColumnKind, ...]

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("feature matrix must be 2-D")
        self.column_kinds = tuple(self.column_kinds)
        if len(self.column_kinds) != self.values.shape[1]:
            raise ValueError("column_kinds length must match matrix width")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")
        for j, ck in enumerate(self.column_kinds):
            if ck.kind == "categorical":
                col = self.values[:, j]
                if col.size and (np.any(col != np.floor(col)) or col.min() < 0
                                 or col.max() >= ck.levels):
                    raise ValueError(
                        f"column {j}: categorical values must be integers in "
                        f"[0, {ck.levels})")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def columns(self) -> int:
        return self.values.shape[1]


def all_numeric(values: np.ndarray) -> FeatureMatrix:
    """Wrap a plain real matrix as all-numeric features."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    return FeatureMatrix(values, tuple(numeric() for _ in range(values.shape[1])))


@dataclass(frozen=True)
class TreeNode:
    """One node of an array-encoded tree.

    `leaf_value` carries the node's (weighted) mean response for every
    node, not just leaves; internal means are what a collapsed node
    predicts after pruning and what empty honest leaves inherit.
    """

    node_id: int
    kind: str  # "internal" | "leaf"
    feature: int | None
    threshold: float | None
    left_levels: tuple[int, ...] | None
    left: int | None
    right: int | None
    leaf_value: float
    n_node: int
    sse_node: float


class _Arrays:
    """Flat numpy view of a tree, built once per FittedTree for routing."""

    def __init__(self, tree: "FittedTree"):
        nodes = tree.nodes
        n = len(nodes)
        self.feature = np.full(n, -1, dtype=np.int64)
        self.threshold = np.full(n, np.nan)
        self.left = np.full(n, -1, dtype=np.int64)
        self.right = np.full(n, -1, dtype=np.int64)
        self.value = np.zeros(n)
        self.n_node = np.zeros(n, dtype=np.int64)
        self.sse = np.zeros(n)
        self.is_cat = np.zeros(n, dtype=bool)
        self.parent = np.full(n, -1, dtype=np.int64)
        max_levels = 1
        for ck in tree.column_kinds:
            if ck.kind == "categorical":
                max_levels = max(max_levels, ck.levels)
        self.lut = np.zeros((n, max_levels), dtype=bool)
        self.col_levels = np.array(
            [ck.levels if ck.kind == "categorical" else 0
             for ck in tree.column_kinds], dtype=np.int64)
        for nd in nodes:
            i = nd.node_id
            self.value[i] = nd.leaf_value
            self.n_node[i] = nd.n_node
            self.sse[i] = nd.sse_node if nd.sse_node is not None else np.nan
            if nd.kind == "internal":
                self.feature[i] = nd.feature
                self.left[i] = nd.left
                self.right[i] = nd.right
                self.parent[nd.left] = i
                self.parent[nd.right] = i
                if nd.left_levels is not None:
                    self.is_cat[i] = True
                    self.lut[i, list(nd.left_levels)] = True
                else:
                    self.threshold[i] = nd.threshold
        # preorder ids: the subtree of i spans ids [i, subtree_end[i])
        self.subtree_end = np.arange(1, n + 1, dtype=np.int64)
        for i in range(n - 1, -1, -1):
            if self.feature[i] >= 0:
                self.subtree_end[i] = self.subtree_end[self.right[i]]


@dataclass
class FittedTree:
    """An immutable fitted regression tree."""

    nodes: list[TreeNode]
    n_features: int
    column_kinds: tuple[ColumnKind, ...]
    complexity_alpha: float = 0.0
    _arrays: _Arrays | None = field(default=None, compare=False, repr=False)

    def arrays(self) -> _Arrays:
        if self._arrays is None:
            object.__setattr__(self, "_arrays", _Arrays(self))
        return self._arrays

    @property
    def n_leaves(self) -> int:
        return sum(1 for nd in self.nodes if nd.kind == "leaf")


@dataclass
class TreeOptions:
    min_leaf: int = 5
    max_depth: int | None = None
    mtry: int | None = None


def fit_regression_tree(x: FeatureMatrix, y: np.ndarray,
                        opts: TreeOptions = TreeOptions(),
                        rng: np.random.Generator | None = None,
                        sample_weight: np.ndarray | None = None) -> FittedTree:
    """Grow a greedy SSE-minimizing binary tree.

    Recursion stops when no split strictly reduces SSE, a child would fall
    below `min_leaf` rows, or `max_depth` is reached. When `opts.mtry` is
    set below the column count, each split considers a uniform random
    subset of columns drawn from `rng`.
    """
    y = np.asarray(y, dtype=np.float64)
    if x.rows == 0:
        raise EmptyInput("cannot fit a tree on zero rows")
    if x.rows != y.shape[0]:
        raise ValueError("x and y row counts differ")
    if not np.all(np.isfinite(y)):
        raise ValueError("response must be finite")
    if sample_weight is None:
        w = np.ones(x.rows)
    else:
        w = np.ascontiguousarray(sample_weight, dtype=np.float64)
        if w.shape[0] != x.rows or np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("sample weights must be positive and finite")

    p = x.columns
    cols = [np.ascontiguousarray(x.values[:, j]) for j in range(p)]
    codes = [c.astype(np.int64) if ck.kind == "categorical" else None
             for c, ck in zip(cols, x.column_kinds)]
    kinds = x.column_kinds
    use_mtry = opts.mtry is not None and opts.mtry < p
    if use_mtry and rng is None:
        raise ValueError("mtry requires an rng")

    nodes: list[TreeNode] = []
    # stack of (row indices, depth, parent id, is_left); preorder ids
    stack = [(np.arange(x.rows, dtype=np.int64), 0, -1, False)]
    links: list[tuple[int, int, bool]] = []  # (parent, child, is_left)

    while stack:
        idx, depth, parent, is_left = stack.pop()
        node_id = len(nodes)
        if parent >= 0:
            links.append((parent, node_id, is_left))
        yn = np.ascontiguousarray(y[idx])
        wn = np.ascontiguousarray(w[idx])
        sw, mean, sse = _split.node_stats(yn, wn)
        n_here = idx.shape[0]

        split = None
        can_split = (n_here >= 2 * opts.min_leaf
                     and (opts.max_depth is None or depth < opts.max_depth))
        if can_split:
            if use_mtry:
                cand = np.sort(rng.choice(p, size=opts.mtry, replace=False))
            else:
                cand = range(p)
            best_sse = np.inf
            for j in cand:
                if kinds[j].kind == "numeric":
                    s, thr = _split.scan_numeric(
                        np.ascontiguousarray(cols[j][idx]), yn, wn, opts.min_leaf)
                    if s < best_sse:
                        best_sse = s
                        split = (j, thr, None)
                else:
                    s, cut, order = _split.scan_categorical(
                        np.ascontiguousarray(codes[j][idx]), yn, wn,
                        kinds[j].levels, opts.min_leaf)
                    if s < best_sse:
                        best_sse = s
                        split = (j, None, tuple(sorted(int(c) for c in order[:cut])))
            if split is not None and best_sse >= sse - _IMPROVE_TOL * max(1.0, sse):
                split = None

        if split is None:
            nodes.append(TreeNode(node_id, "leaf", None, None, None, None, None,
                                  float(mean), int(n_here), float(sse)))
            continue

        j, thr, left_levels = split
        if left_levels is None:
            mask = cols[j][idx] <= thr
        else:
            lut = np.zeros(kinds[j].levels, dtype=bool)
            lut[list(left_levels)] = True
            mask = lut[codes[j][idx]]
        nodes.append(TreeNode(node_id, "internal", int(j),
                              None if thr is None else float(thr),
                              left_levels, None, None,
                              float(mean), int(n_here), float(sse)))
        # push right first so the left child is processed next (preorder)
        stack.append((idx[~mask], depth + 1, node_id, False))
        stack.append((idx[mask], depth + 1, node_id, True))

    # patch child pointers now that every id is known
    child_of: dict[tuple[int, bool], int] = {(p_, l_): c for p_, c, l_ in links}
    final = []
    for nd in nodes:
        if nd.kind == "internal":
            final.append(replace(nd, left=child_of[(nd.node_id, True)],
                                 right=child_of[(nd.node_id, False)]))
        else:
            final.append(nd)
    return FittedTree(final, p, kinds)


def route_to_leaves(tree: FittedTree, x_values: np.ndarray) -> np.ndarray:
    """Node id of the leaf each row reaches."""
    x_values = np.atleast_2d(np.asarray(x_values, dtype=np.float64))
    if x_values.shape[1] != tree.n_features:
        raise WidthMismatch(
            f"row width {x_values.shape[1]} != model width {tree.n_features}")
    a = tree.arrays()
    cur = np.zeros(x_values.shape[0], dtype=np.int64)
    while True:
        f = a.feature[cur]
        active = f >= 0
        if not active.any():
            return cur
        rows = np.nonzero(active)[0]
        c = cur[rows]
        v = x_values[rows, f[rows]]
        go_left = np.empty(rows.shape[0], dtype=bool)
        is_cat = a.is_cat[c]
        nm = ~is_cat
        go_left[nm] = v[nm] <= a.threshold[c[nm]]
        if is_cat.any():
            vi = v[is_cat].astype(np.int64)
            lv = a.col_levels[a.feature[c[is_cat]]]
            in_range = (vi >= 0) & (vi < lv)
            vi = np.clip(vi, 0, a.lut.shape[1] - 1)
            go_left[is_cat] = a.lut[c[is_cat], vi] & in_range
        cur[rows] = np.where(go_left, a.left[c], a.right[c])


def predict_tree_batch(tree: FittedTree, x_values: np.ndarray) -> np.ndarray:
    """Leaf values for a matrix of rows."""
    leaves = route_to_leaves(tree, x_values)
    return tree.arrays().value[leaves]


def predict_tree(tree: FittedTree, x_row: np.ndarray) -> float:
    """Leaf value for one feature row."""
    x_row = np.asarray(x_row, dtype=np.float64).reshape(1, -1)
    return float(predict_tree_batch(tree, x_row)[0])


@dataclass
class CcpPath:
    """Weakest-link cost-complexity pruning path.

    `critical_alphas[v]` is the penalty at which internal node v collapses;
    the subtree optimal at penalty a keeps exactly the internal nodes with
    critical alpha > a. Subtrees are materialized on demand because full
    paths of large trees are long.
    """

    alphas: list[float]
    tree: FittedTree
    critical_alphas: np.ndarray
    cv_errors: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.alphas)

    def subtree(self, index: int) -> FittedTree:
        return prune_at_alpha(self.tree, self.critical_alphas, self.alphas[index])

    @property
    def subtrees(self) -> list[FittedTree]:
        return [self.subtree(i) for i in range(len(self.alphas))]


def prune_ccp(tree: FittedTree) -> CcpPath:
    """Compute the weakest-link pruning sequence of a fitted tree."""
    a = tree.arrays()
    n = len(tree.nodes)
    internal = a.feature >= 0
    crit = np.full(n, np.inf)
    if not internal.any():
        return CcpPath([0.0], tree, crit)

    leaves_below = np.ones(n, dtype=np.int64)
    sse_below = a.sse.copy()
    for v in range(n - 1, -1, -1):
        if internal[v]:
            leaves_below[v] = leaves_below[a.left[v]] + leaves_below[a.right[v]]
            sse_below[v] = sse_below[a.left[v]] + sse_below[a.right[v]]

    g = np.full(n, np.inf)
    alive = internal.copy()
    live_ids = np.nonzero(alive)[0]
    g[live_ids] = (a.sse[live_ids] - sse_below[live_ids]) / (leaves_below[live_ids] - 1)

    alphas = [0.0]
    while alive[0]:
        live = np.nonzero(alive)[0]
        m = float(g[live].min())
        tie = live[g[live] <= m * (1 + 1e-12) + 1e-300]
        # keep only maximal nodes; descendants collapse with them
        maximal = []
        covered_to = -1
        for v in tie:  # preorder ids ascend, so ancestors come first
            if v >= covered_to:
                maximal.append(v)
                covered_to = a.subtree_end[v]
            # descendants inside a collapsed subtree share the event
        alpha = m
        if alpha <= alphas[-1] * (1 + 1e-12):
            alpha = alphas[-1]
        else:
            alphas.append(alpha)
        for v in maximal:
            span = np.arange(v, a.subtree_end[v])
            dead = span[alive[span]]
            crit[dead] = alpha
            alive[span] = False
            d_leaves = 1 - leaves_below[v]
            d_sse = a.sse[v] - sse_below[v]
            u = a.parent[v]
            while u >= 0:
                leaves_below[u] += d_leaves
                sse_below[u] += d_sse
                if alive[u]:
                    g[u] = (a.sse[u] - sse_below[u]) / (leaves_below[u] - 1)
                u = a.parent[u]
    return CcpPath(alphas, tree, crit)


def prune_at_alpha(tree: FittedTree, critical_alphas: np.ndarray,
                   alpha: float) -> FittedTree:
    """Materialize the cost-complexity-optimal subtree at penalty alpha."""
    a = tree.arrays()
    old = tree.nodes
    new_nodes: list[TreeNode] = []
    stack = [(0, -1, False)]
    links: list[tuple[int, int, bool]] = []
    while stack:
        v, parent, is_left = stack.pop()
        nid = len(new_nodes)
        if parent >= 0:
            links.append((parent, nid, is_left))
        nd = old[v]
        keep_internal = nd.kind == "internal" and critical_alphas[v] > alpha
        if keep_internal:
            new_nodes.append(replace(nd, node_id=nid, left=None, right=None))
            stack.append((a.right[v], nid, False))
            stack.append((a.left[v], nid, True))
        else:
            new_nodes.append(TreeNode(nid, "leaf", None, None, None, None, None,
                                      nd.leaf_value, nd.n_node, nd.sse_node))
    child_of = {(p_, l_): c for p_, c, l_ in links}
    final = []
    for nd in new_nodes:
        if nd.kind == "internal":
            final.append(replace(nd, left=child_of[(nd.node_id, True)],
                                 right=child_of[(nd.node_id, False)]))
        else:
            final.append(nd)
    return FittedTree(final, tree.n_features, tree.column_kinds,
                      complexity_alpha=float(alpha))


def _alpha_predictions(a: _Arrays, crit: np.ndarray, x_values: np.ndarray,
                       alphas: np.ndarray) -> np.ndarray:
    """Predictions of every alpha-pruned subtree, (rows x alphas).

    Walks each row once, recording the strictly-decreasing envelope of
    critical alphas along its root-to-leaf path; the prediction at penalty
    a is the value of the shallowest node whose critical alpha is <= a.
    """
    out = np.empty((x_values.shape[0], alphas.shape[0]))
    for r in range(x_values.shape[0]):
        v = 0
        env_c: list[float] = []
        env_v: list[float] = []
        low = np.inf
        while a.feature[v] >= 0:
            cv = crit[v]
            if cv < low:
                env_c.append(cv)
                env_v.append(a.value[v])
                low = cv
            f = a.feature[v]
            xv = x_values[r, f]
            if a.is_cat[v]:
                xi = int(xv)
                lv = a.col_levels[f]
                left = 0 <= xi < lv and a.lut[v, min(xi, a.lut.shape[1] - 1)]
            else:
                left = xv <= a.threshold[v]
            v = a.left[v] if left else a.right[v]
        vals = np.array(env_v + [a.value[v]])
        rev = np.array(env_c[::-1])
        # count of envelope entries with crit > alpha, per alpha
        idx = len(env_c) - np.searchsorted(rev, alphas, side="right")
        out[r] = vals[idx]
    return out


@dataclass
class CvSelection:
    alpha: float
    tree: FittedTree
    path: CcpPath


def cv_select_alpha(x: FeatureMatrix, y: np.ndarray,
                    opts: TreeOptions = TreeOptions(),
                    folds: int = 5,
                    rng: np.random.Generator | None = None,
                    sample_weight: np.ndarray | None = None,
                    groups: np.ndarray | None = None) -> CvSelection:
    """Pick the pruning penalty by k-fold cross-validated squared error.

    Candidate penalties are the full-data pruning path's alphas; the
    minimizer of mean CV error wins (no one-standard-error rule). When
    `groups` is given, all rows sharing a group id land in the same fold
    (rows of one group are not independent, so splitting them across
    folds would leak).
    """
    y = np.asarray(y, dtype=np.float64)
    if x.rows == 0:
        raise EmptyInput("cannot cross-validate on zero rows")
    if folds < 2:
        raise ValueError("folds must be at least 2")
    if x.rows < folds:
        raise EmptyInput(f"{x.rows} rows cannot fill {folds} folds")
    if rng is None:
        rng = np.random.default_rng()
    w = np.ones(x.rows) if sample_weight is None else np.asarray(sample_weight,
                                                                 dtype=np.float64)

    full = fit_regression_tree(x, y, opts, rng, sample_weight)
    path = prune_ccp(full)
    alphas = np.array(path.alphas)
    if len(alphas) == 1:
        path.cv_errors = np.zeros(1)
        return CvSelection(0.0, full, path)

    if groups is None:
        perm = rng.permutation(x.rows)
        fold_id = np.empty(x.rows, dtype=np.int64)
        fold_id[perm] = np.arange(x.rows) % folds
    else:
        groups = np.asarray(groups, dtype=np.int64)
        if groups.shape[0] != x.rows:
            raise ValueError("groups must label every row")
        uniq = np.unique(groups)
        if uniq.shape[0] < folds:
            raise EmptyInput(f"{uniq.shape[0]} groups cannot fill {folds} folds")
        gperm = rng.permutation(uniq.shape[0])
        gfold = np.empty(uniq.shape[0], dtype=np.int64)
        gfold[gperm] = np.arange(uniq.shape[0]) % folds
        fold_id = gfold[np.searchsorted(uniq, groups)]

    err = np.zeros(alphas.shape[0])
    wsum = 0.0
    for f in range(folds):
        test = fold_id == f
        train = ~test
        sub = FeatureMatrix(x.values[train], x.column_kinds)
        t = fit_regression_tree(sub, y[train], opts, rng, w[train])
        p = prune_ccp(t)
        preds = _alpha_predictions(t.arrays(), p.critical_alphas,
                                   x.values[test], alphas)
        resid = preds - y[test][:, None]
        err += (w[test][:, None] * resid * resid).sum(axis=0)
        wsum += w[test].sum()
    err /= wsum
    best = int(np.argmin(err))
    path.cv_errors = err
    pruned = prune_at_alpha(full, path.critical_alphas, float(alphas[best]))
    return CvSelection(float(alphas[best]), pruned, path)


def reestimate_leaves(tree: FittedTree, x: FeatureMatrix, y: np.ndarray,
                      sample_weight: np.ndarray | None = None) -> FittedTree:
    """Honest leaf re-population: replace node values with the weighted
    mean response of `x, y` routed there. Leaves no row reaches inherit
    the nearest ancestor's estimate."""
    y = np.asarray(y, dtype=np.float64)
    if x.rows == 0:
        raise EmptyInput("no rows to re-estimate from")
    w = np.ones(x.rows) if sample_weight is None else np.asarray(sample_weight,
                                                                 dtype=np.float64)
    a = tree.arrays()
    n = len(tree.nodes)
    leaves = route_to_leaves(tree, x.values)
    sw = np.zeros(n)
    swy = np.zeros(n)
    swyy = np.zeros(n)
    cnt = np.zeros(n, dtype=np.int64)
    np.add.at(sw, leaves, w)
    np.add.at(swy, leaves, w * y)
    np.add.at(swyy, leaves, w * y * y)
    np.add.at(cnt, leaves, 1)
    for v in range(n - 1, -1, -1):
        if a.feature[v] >= 0:
            l, r = a.left[v], a.right[v]
            sw[v] += sw[l] + sw[r]
            swy[v] += swy[l] + swy[r]
            swyy[v] += swyy[l] + swyy[r]
            cnt[v] += cnt[l] + cnt[r]

    new_nodes = []
    for nd in tree.nodes:
        v = nd.node_id
        u = v
        while sw[u] <= 0 and a.parent[u] >= 0:
            u = a.parent[u]
        if sw[u] <= 0:
            raise EmptyInput("no rows reached the tree at all")
        value = swy[u] / sw[u]
        sse = max(swyy[u] - swy[u] * value, 0.0)
        new_nodes.append(replace(nd, leaf_value=float(value),
                                 n_node=int(cnt[v]), sse_node=float(sse)))
    return FittedTree(new_nodes, tree.n_features, tree.column_kinds,
                      complexity_alpha=tree.complexity_alpha)
