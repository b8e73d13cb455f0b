"""Rework policies learned from AIPW scores and their evaluation.

Two policy classes are supported: threshold rules on a fitted CATE curve
and axis-aligned decision trees of depth at most two. Trees maximise the
objective ``sum_i (2 pi(x_i) - 1) (psi_b_i - gamma)``; the exact search
enumerates every split between consecutive distinct feature values.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cate import CateFit, pointwise_band, predict_cate
from .data import SCHEMA_VERSION
from .dml import EffectEstimate, NuisancePredictions, ScoreElements, estimate_atte, solve_score
from .errors import ConfigurationError, EstimandUndefinedError, ShapeError

MAX_DEPTH = 2


# ---------------------------------------------------------------------------
# policy types


@dataclass(frozen=True)
class Leaf:
    action: int

    def to_dict(self) -> dict:
        return {"action": int(self.action)}


@dataclass(frozen=True)
class Split:
    """Rows with ``x[feature] <= threshold`` go left."""

    feature: int
    threshold: float
    left: "Leaf | Split"
    right: "Leaf | Split"

    def to_dict(self) -> dict:
        return {
            "feature": int(self.feature),
            "threshold": float(self.threshold),
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }


def node_from_dict(doc) -> Leaf | Split:
    if "action" in doc:
        return Leaf(int(doc["action"]))
    return Split(int(doc["feature"]), float(doc["threshold"]), node_from_dict(doc["left"]), node_from_dict(doc["right"]))


def _depth(node) -> int:
    if isinstance(node, Leaf):
        return 0
    return 1 + max(_depth(node.left), _depth(node.right))


def _max_feature(node) -> int:
    if isinstance(node, Leaf):
        return -1
    return max(node.feature, _max_feature(node.left), _max_feature(node.right))


def _collapse(node):
    """Merge sibling leaves that carry the same action."""
    if isinstance(node, Leaf):
        return node
    left, right = _collapse(node.left), _collapse(node.right)
    if isinstance(left, Leaf) and isinstance(right, Leaf) and left.action == right.action:
        return left
    return Split(node.feature, node.threshold, left, right)


def _apply_node(node, x) -> np.ndarray:
    if isinstance(node, Leaf):
        return np.full(x.shape[0], node.action, dtype=np.int64)
    out = np.empty(x.shape[0], dtype=np.int64)
    go_left = x[:, node.feature] <= node.threshold
    out[go_left] = _apply_node(node.left, x[go_left])
    out[~go_left] = _apply_node(node.right, x[~go_left])
    return out


def _as_features(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


@dataclass(frozen=True)
class TreePolicy:
    """Axis-aligned tree over a feature matrix with ``n_features`` columns."""

    root: Leaf | Split
    n_features: int
    max_depth: int = MAX_DEPTH
    objective: float | None = None
    kind: str = "tree"

    def __post_init__(self):
        if _depth(self.root) > self.max_depth:
            raise ConfigurationError(f"tree deeper than {self.max_depth}")
        if _max_feature(self.root) >= self.n_features:
            raise ConfigurationError("tree splits on a feature index beyond n_features")

    @property
    def depth(self) -> int:
        return _depth(self.root)

    def apply(self, x) -> np.ndarray:
        x = _as_features(x)
        if x.shape[1] != self.n_features:
            raise ShapeError(f"tree expects {self.n_features} features, got {x.shape[1]}")
        return _apply_node(self.root, x)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "tree",
            "n_features": self.n_features,
            "max_depth": self.max_depth,
            "objective": self.objective,
            "tree": self.root.to_dict(),
        }


@dataclass(frozen=True)
class ThresholdPolicy:
    """Treat where the CATE estimate (``mode='point'``) or its lower
    pointwise bound at level ``2 * alpha`` (``mode='lower_ci'``) is at
    least ``gamma``. ``columns`` selects the CATE inputs from the feature
    matrix passed to :meth:`apply`.
    """

    fit: CateFit
    gamma: float
    mode: str = "point"
    alpha: float = 0.05
    columns: tuple = (0,)
    kind: str = "cate_threshold"

    def __post_init__(self):
        if self.mode not in ("point", "lower_ci"):
            raise ConfigurationError(f"unknown threshold mode {self.mode!r}")
        if self.mode == "lower_ci" and not 0 < 2 * self.alpha < 1:
            raise ConfigurationError("lower_ci mode needs 0 < alpha < 0.5")
        if len(self.columns) != self.fit.basis.q:
            raise ConfigurationError(f"basis takes {self.fit.basis.q} columns, got {self.columns}")
        object.__setattr__(self, "columns", tuple(int(c) for c in self.columns))

    def criterion(self, x) -> np.ndarray:
        """The quantity compared against ``gamma``."""
        x = _as_features(x)
        if x.shape[1] <= max(self.columns):
            raise ShapeError(f"need at least {max(self.columns) + 1} feature columns, got {x.shape[1]}")
        xt = x[:, list(self.columns)]
        if self.mode == "point":
            return predict_cate(self.fit, xt)
        lo, _ = pointwise_band(self.fit, xt, 2 * self.alpha)
        return lo

    def apply(self, x) -> np.ndarray:
        return (self.criterion(x) >= self.gamma).astype(np.int64)

    def to_dict(self) -> dict:
        fit_doc = self.fit.to_dict()
        payload = json.dumps([fit_doc["basis"], fit_doc["beta_hat"]], sort_keys=True).encode()
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "cate_threshold",
            "gamma": self.gamma,
            "mode": self.mode,
            "alpha": self.alpha,
            "columns": list(self.columns),
            "fit_digest": hashlib.sha256(payload).hexdigest(),
            "fit": fit_doc,
        }


def policy_from_dict(doc) -> TreePolicy | ThresholdPolicy:
    kind = doc.get("kind")
    if kind == "tree":
        return TreePolicy(node_from_dict(doc["tree"]), int(doc["n_features"]), int(doc.get("max_depth", MAX_DEPTH)), doc.get("objective"))
    if kind == "cate_threshold":
        return ThresholdPolicy(
            CateFit.from_dict(doc["fit"]), float(doc["gamma"]), doc["mode"], float(doc["alpha"]), tuple(doc["columns"])
        )
    raise ConfigurationError(f"unknown policy kind {kind!r}")


def apply_policy(policy, x) -> np.ndarray:
    return policy.apply(x)


def threshold_policy(fit: CateFit, gamma: float, mode: str = "point", alpha: float = 0.05, columns=None) -> ThresholdPolicy:
    if columns is None:
        columns = tuple(range(fit.basis.q))
    return ThresholdPolicy(fit, float(gamma), mode, float(alpha), tuple(columns))


def policy_objective(assignments, psi_b, gamma: float = 0.0) -> float:
    """``sum_i (2 pi_i - 1)(psi_b_i - gamma)``."""
    pi = np.asarray(assignments, dtype=float)
    r = np.asarray(psi_b, dtype=float) - gamma
    return float(np.sum((2.0 * pi - 1.0) * r))


# ---------------------------------------------------------------------------
# exact search


def _leaf(total) -> Leaf:
    return Leaf(1 if total > 0 else 0)


def _best_stump(x, r):
    """Best depth-1 tree on ``(x, r)``.

    Returns ``(objective, node)``. A leaf wins unless a split is strictly
    better; among splits the lowest feature index, then the smallest
    threshold, wins.
    """
    total = r.sum()
    best_val, best = abs(total), _leaf(total)
    n = r.shape[0]
    if n < 2:
        return best_val, best
    for j in range(x.shape[1]):
        order = np.argsort(x[:, j], kind="stable")
        xs = x[order, j]
        cs = np.cumsum(r[order])[:-1]
        val = np.abs(cs) + np.abs(total - cs)
        val = np.where(xs[:-1] < xs[1:], val, -np.inf)
        i = int(np.argmax(val))
        if val[i] > best_val:
            best_val = float(val[i])
            best = Split(j, float(0.5 * (xs[i] + xs[i + 1])), _leaf(cs[i]), _leaf(total - cs[i]))
    return best_val, best


class _Axis:
    """Per-feature sort order and valid split positions."""

    def __init__(self, col):
        self.order = np.argsort(col, kind="stable")
        self.rank = np.empty_like(self.order)
        self.rank[self.order] = np.arange(col.size)
        self.sorted = col[self.order]
        # position t means "first t rows in sorted order go left"
        self.valid = np.zeros(col.size + 1, dtype=bool)
        self.valid[1:-1] = self.sorted[:-1] < self.sorted[1:]


def _child_scan(axis_j, axis_k, r, total, block=256):
    """For every root position ``s`` along ``j``, the best stump along ``k``
    of the left and of the right child.

    Returns arrays over ``s = 0..n`` of (left value, left position, right
    value, right position); position ``-1`` means no valid split.
    """
    n = r.size
    prefix_k = np.concatenate([[0.0], np.cumsum(r[axis_k.order])])
    lv = np.full(n + 1, -np.inf)
    lp = np.full(n + 1, -1, dtype=np.int64)
    rv = np.full(n + 1, -np.inf)
    rp = np.full(n + 1, -1, dtype=np.int64)
    mask = axis_k.valid
    run = np.zeros(n + 1)
    rows_j = axis_j.order
    kpos = axis_k.rank[rows_j] + 1  # column after which each row is counted
    r_j = r[rows_j]
    lv[0] = -np.inf
    for s0 in range(0, n, block):
        s1 = min(s0 + block, n)
        m = s1 - s0
        d = np.zeros((m, n + 1))
        d[np.arange(m), kpos[s0:s1]] = r_j[s0:s1]
        np.cumsum(d, axis=1, out=d)
        np.cumsum(d, axis=0, out=d)
        d += run
        run = d[-1].copy()
        # d[u] is M[s0 + u + 1, :]: sums over the first s rows along j
        left_tot = d[:, -1:]
        lval = np.abs(d) + np.abs(left_tot - d)
        rsum = prefix_k[None, :] - d
        right_tot = total - left_tot
        rval = np.abs(rsum) + np.abs(right_tot - rsum)
        lval[:, ~mask] = -np.inf
        rval[:, ~mask] = -np.inf
        li = np.argmax(lval, axis=1)
        ri = np.argmax(rval, axis=1)
        idx = np.arange(m)
        lv[s0 + 1 : s1 + 1] = lval[idx, li]
        lp[s0 + 1 : s1 + 1] = li
        rv[s0 + 1 : s1 + 1] = rval[idx, ri]
        rp[s0 + 1 : s1 + 1] = ri
    lp[~np.isfinite(lv)] = -1
    rp[~np.isfinite(rv)] = -1
    return lv, lp, rv, rp


def _subset_threshold(col, member, lo_rank_vals, pos):
    """Midpoint between the largest member value left of sorted position
    ``pos`` and the smallest member value at or right of it."""
    left_vals = col[member & (col <= lo_rank_vals[pos - 1])]
    right_vals = col[member & (col >= lo_rank_vals[pos])]
    return float(0.5 * (left_vals.max() + right_vals.min()))


def _stump_node(x, r, member, axis, k, pos):
    """Rebuild the child stump at sorted position ``pos`` on feature ``k``
    restricted to ``member`` rows (collapsed to a leaf if one side is empty)."""
    col = x[:, k]
    go_left = member & (axis.rank < pos)
    go_right = member & (axis.rank >= pos)
    if not go_left.any() or not go_right.any():
        return _leaf(r[member].sum())
    thr = _subset_threshold(col, member, axis.sorted, pos)
    return Split(k, thr, _leaf(r[go_left].sum()), _leaf(r[go_right].sum()))


def exact_policy_tree(x, psi_b, gamma: float = 0.0, depth: int = 2) -> TreePolicy:
    """Globally optimal tree of depth ``depth`` (1 or 2) for the shifted
    scores ``psi_b - gamma``.

    Ties prefer fewer splits, then the lower feature index, then the
    smaller split value, then action 0. Sibling leaves with equal actions
    are merged in the returned tree.
    """
    x = _as_features(x)
    r = np.asarray(psi_b, dtype=float).ravel() - float(gamma)
    n, d = x.shape
    if r.shape[0] != n:
        raise ShapeError(f"x has {n} rows, psi_b has {r.shape[0]}")
    if n < 2:
        raise ConfigurationError("need at least 2 observations")
    if not np.isfinite(r).all() or not np.isfinite(x).all():
        raise ConfigurationError("scores and features must be finite")
    if depth not in (1, 2):
        raise ConfigurationError("depth must be 1 or 2")

    if depth == 1:
        _, node = _best_stump(x, r)
    else:
        node = _exact_depth2(x, r)
    node = _collapse(node)
    pol = TreePolicy(node, d, depth)
    return TreePolicy(node, d, depth, policy_objective(pol.apply(x), r))


def _exact_depth2(x, r):
    n, d = x.shape
    total = r.sum()
    axes = [_Axis(x[:, j]) for j in range(d)]
    best_val, best = abs(total), None

    for j in range(d):
        aj = axes[j]
        left_tot = np.concatenate([[0.0], np.cumsum(r[aj.order])])
        # leaf children first, then child stumps by ascending feature
        lbest = np.abs(left_tot)
        rbest = np.abs(total - left_tot)
        lk = np.full(n + 1, -1, dtype=np.int64)
        lpos = np.full(n + 1, -1, dtype=np.int64)
        rk = np.full(n + 1, -1, dtype=np.int64)
        rpos = np.full(n + 1, -1, dtype=np.int64)
        for k in range(d):
            lv, lp, rv, rp = _child_scan(aj, axes[k], r, total)
            upd = lv > lbest
            lbest = np.where(upd, lv, lbest)
            lk[upd], lpos[upd] = k, lp[upd]
            upd = rv > rbest
            rbest = np.where(upd, rv, rbest)
            rk[upd], rpos[upd] = k, rp[upd]
        val = np.where(aj.valid, lbest + rbest, -np.inf)
        s = int(np.argmax(val))
        if val[s] > best_val:
            best_val = float(val[s])
            best = (j, s, int(lk[s]), int(lpos[s]), int(rk[s]), int(rpos[s]))

    if best is None:
        return _leaf(total)
    j, s, lk, lpos, rk, rpos = best
    aj = axes[j]
    thr = float(0.5 * (aj.sorted[s - 1] + aj.sorted[s]))
    in_left = aj.rank < s
    in_right = ~in_left
    left = _leaf(r[in_left].sum()) if lk < 0 else _stump_node(x, r, in_left, axes[lk], lk, lpos)
    right = _leaf(r[in_right].sum()) if rk < 0 else _stump_node(x, r, in_right, axes[rk], rk, rpos)
    return Split(j, thr, left, right)


# ---------------------------------------------------------------------------
# greedy trees


def _weighted_gini(w_pos, w_neg):
    tot = w_pos + w_neg
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(tot > 0, 2.0 * w_pos * w_neg / tot, 0.0)
    return g


def _best_gini_split(x, r):
    """Split minimising the weighted Gini impurity for labels sign(r) and
    weights |r|; ``None`` when no split lowers the impurity."""
    w = np.abs(r)
    pos = np.where(r > 0, w, 0.0)
    neg = np.where(r < 0, w, 0.0)
    parent = float(_weighted_gini(pos.sum(), neg.sum()))
    best_imp, best = parent, None
    for j in range(x.shape[1]):
        order = np.argsort(x[:, j], kind="stable")
        xs = x[order, j]
        cp = np.cumsum(pos[order])[:-1]
        cn = np.cumsum(neg[order])[:-1]
        imp = _weighted_gini(cp, cn) + _weighted_gini(pos.sum() - cp, neg.sum() - cn)
        imp = np.where(xs[:-1] < xs[1:], imp, np.inf)
        if imp.size == 0:
            continue
        i = int(np.argmin(imp))
        if imp[i] < best_imp * (1 - 1e-12) - 1e-15:
            best_imp, best = float(imp[i]), (j, float(0.5 * (xs[i] + xs[i + 1])))
    return best


def _grow_greedy(x, r, depth, impurity):
    if depth == 0 or r.size < 2:
        return _leaf(r.sum())
    if impurity == "misclassification":
        # minimising weighted misclassification is maximising the objective
        _, stump = _best_stump(x, r)
        if isinstance(stump, Leaf):
            return stump
        j, thr = stump.feature, stump.threshold
    else:
        found = _best_gini_split(x, r)
        if found is None:
            return _leaf(r.sum())
        j, thr = found
    go_left = x[:, j] <= thr
    return Split(
        j,
        thr,
        _grow_greedy(x[go_left], r[go_left], depth - 1, impurity),
        _grow_greedy(x[~go_left], r[~go_left], depth - 1, impurity),
    )


def greedy_policy_tree(x, psi_b, gamma: float = 0.0, depth: int = 2, impurity: str = "misclassification") -> TreePolicy:
    """Top-down weighted classification tree.

    Labels are ``sign(psi_b - gamma)`` and weights ``|psi_b - gamma|``. Each
    node takes the split with the lowest weighted impurity (misclassification
    by default, or ``"gini"``) and stops when no split improves it.
    """
    if impurity not in ("misclassification", "gini"):
        raise ConfigurationError(f"unknown impurity {impurity!r}")
    if depth not in (1, 2):
        raise ConfigurationError("depth must be 1 or 2")
    x = _as_features(x)
    r = np.asarray(psi_b, dtype=float).ravel() - float(gamma)
    if r.shape[0] != x.shape[0]:
        raise ShapeError("x and psi_b lengths differ")
    node = _collapse(_grow_greedy(x, r, depth, impurity))
    pol = TreePolicy(node, x.shape[1], depth)
    return TreePolicy(node, x.shape[1], depth, policy_objective(pol.apply(x), r))


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class PolicyEvaluation:
    """Share treated, group effect among the treated and policy value.

    ``value`` is ``mean(assignment * psi_b)``, which equals
    ``share * gate.theta_hat`` up to rounding.
    """

    share_treated: float
    gate: EffectEstimate | None
    value: float
    value_se: float

    def to_dict(self) -> dict:
        return {
            "share_treated": self.share_treated,
            "gate": None if self.gate is None else self.gate.to_dict(),
            "value": self.value,
            "value_se": self.value_se,
        }


def evaluate_policy(assignments, scores: ScoreElements, level: float = 0.95) -> PolicyEvaluation:
    """Share, GATE among assigned lots and value of an assignment vector.

    Raises :class:`EstimandUndefinedError` (carrying the share) when the
    policy treats nobody.
    """
    pi = np.asarray(assignments).ravel()
    if pi.shape[0] != scores.n:
        raise ShapeError(f"{pi.shape[0]} assignments for {scores.n} scores")
    if scores.target != "ATE":
        raise ConfigurationError("policy evaluation needs ATE score elements")
    if not np.all((pi == 0) | (pi == 1)):
        raise ConfigurationError("assignments must be 0 or 1")
    pi = pi.astype(float)
    psi = scores.psi_b
    share = float(pi.mean())
    contrib = pi * psi
    value = float(contrib.mean())
    n1 = int(pi.sum())
    if n1 == 0:
        raise EstimandUndefinedError("policy treats no observation; GATE undefined", share=share)
    sub = psi[pi == 1]
    if n1 >= 2:
        gate = solve_score(ScoreElements(-np.ones(n1), sub), level)
    else:
        g = float(sub[0])
        gate = EffectEstimate(g, math.nan, math.nan, math.nan, 1, "ATE", level, True)
    value_se = float(contrib.std(ddof=1) / math.sqrt(scores.n)) if scores.n > 1 else math.nan
    return PolicyEvaluation(share, gate, value, value_se)


@dataclass(frozen=True)
class PolicyRow:
    name: str
    share: float
    gate: float
    gate_se: float
    value: float
    value_se: float

    def as_list(self):
        return [self.name, self.share, self.gate, self.gate_se, self.value, self.value_se]


ROW_HEADER = ["policy", "share", "gate", "gate_se", "value", "value_se"]


def compare_policies(
    policies: Sequence,
    features,
    scores: ScoreElements,
    data=None,
    nuisances: NuisancePredictions | None = None,
    baseline_name: str = "observed",
) -> list[PolicyRow]:
    """Evaluate ``(name, policy)`` pairs on ``features`` and rank by value.

    With ``data`` and ``nuisances`` the observed assignment ``a`` is added as
    a baseline row whose group effect is the ATTE estimate; its value is
    ``share * ATTE``.
    """
    rows = []
    for name, pol in policies:
        assign = pol.apply(features) if hasattr(pol, "apply") else np.asarray(pol)
        try:
            ev = evaluate_policy(assign, scores)
            rows.append(PolicyRow(name, ev.share_treated, ev.gate.theta_hat, ev.gate.std_error, ev.value, ev.value_se))
        except EstimandUndefinedError as exc:
            rows.append(PolicyRow(name, exc.share, math.nan, math.nan, 0.0, 0.0))
    if data is not None and nuisances is not None:
        atte = estimate_atte(data, nuisances)
        share = float(data.a.mean())
        rows.append(PolicyRow(baseline_name, share, atte.theta_hat, atte.std_error, share * atte.theta_hat, share * atte.std_error))
    # stable sort: equal values keep input order
    return sorted(rows, key=lambda row: -row.value)


def write_rows_csv(path, rows: Sequence[PolicyRow], extra_cols: Sequence[str] = (), extra=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(extra_cols) + ROW_HEADER)
        for i, row in enumerate(rows):
            vals = [row.name] + [repr(float(v)) for v in row.as_list()[1:]]
            w.writerow((list(extra[i]) if extra else []) + vals)


def decision_boundary_1d(policy, features, column: int = 0) -> float:
    """Location along ``column`` where in-sample assignments switch.

    Fits the single cut ``c`` (treat above, or treat below) that best
    reproduces the policy's assignments on ``features`` and returns the
    midpoint between the two sorted values it separates.
    """
    x = _as_features(features)
    assign = policy.apply(x) if hasattr(policy, "apply") else np.asarray(policy)
    col = x[:, column]
    order = np.argsort(col, kind="stable")
    a = assign[order].astype(float)
    xs = col[order]
    # agreement with "treat above position t" and "treat below position t"
    above = np.concatenate([[0.0], np.cumsum(1 - a)]) + np.concatenate([np.cumsum(a[::-1])[::-1], [0.0]])
    below = np.concatenate([[0.0], np.cumsum(a)]) + np.concatenate([np.cumsum((1 - a)[::-1])[::-1], [0.0]])
    score = np.maximum(above, below)[1:-1]
    valid = xs[:-1] < xs[1:]
    score = np.where(valid, score, -np.inf)
    t = int(np.argmax(score))
    return float(0.5 * (xs[t] + xs[t + 1]))
