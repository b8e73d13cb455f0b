"""Nuisance learners: regression and probability models behind one spec.

Families
--------
linear
    Least squares with intercept and optional ridge penalty ``l2``.
logistic
    Penalised logistic regression fitted by Newton iterations.
random_forest
    Bootstrap-aggregated CART trees.
gradient_boosting
    Depth-limited least-squares boosting (log-loss boosting with Newton
    leaf values for classifiers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from . import _cart
from .errors import ConfigurationError, FitError, ShapeError

FAMILIES = ("linear", "logistic", "random_forest", "gradient_boosting")

DEFAULTS = {
    "linear": {"l2": 0.0},
    "logistic": {"l2": 1e-4, "max_iter": 100},
    "random_forest": {
        "n_estimators": 100,
        "max_depth": 6,
        "min_leaf": 5,
        "max_features": None,
    },
    "gradient_boosting": {
        "n_estimators": 100,
        "learning_rate": 0.1,
        "max_depth": 3,
        "min_leaf": 10,
        "subsample": 1.0,
    },
}

PROB_EPS = 1e-12


def _check_hyper(family, hp):
    unknown = set(hp) - set(DEFAULTS[family])
    if unknown:
        raise ConfigurationError(f"{family}: unknown hyperparameters {sorted(unknown)}")
    merged = {**DEFAULTS[family], **hp}
    if "l2" in merged and not merged["l2"] >= 0:
        raise ConfigurationError("l2 must be non-negative")
    if "learning_rate" in merged and not 0 < merged["learning_rate"] <= 1:
        raise ConfigurationError("learning_rate must lie in (0, 1]")
    if "max_depth" in merged and not int(merged["max_depth"]) >= 1:
        raise ConfigurationError("max_depth must be at least 1")
    if "min_leaf" in merged and not int(merged["min_leaf"]) >= 1:
        raise ConfigurationError("min_leaf must be at least 1")
    if "n_estimators" in merged and not int(merged["n_estimators"]) >= 1:
        raise ConfigurationError("n_estimators must be at least 1")
    if "subsample" in merged and not 0 < merged["subsample"] <= 1:
        raise ConfigurationError("subsample must lie in (0, 1]")
    if "max_iter" in merged and not int(merged["max_iter"]) >= 1:
        raise ConfigurationError("max_iter must be at least 1")
    mf = merged.get("max_features")
    if mf is not None and not int(mf) >= 1:
        raise ConfigurationError("max_features must be at least 1")
    return merged


@dataclass(frozen=True)
class LearnerSpec:
    """Learner family plus hyperparameters and an optional tuning grid."""

    family: str
    hyperparameters: Mapping = field(default_factory=dict)
    tuning_grid: Sequence[Mapping] | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(
                f"unknown learner family {self.family!r}; expected one of {FAMILIES}"
            )
        _check_hyper(self.family, self.hyperparameters)
        grid = self.tuning_grid
        if grid is not None:
            grid = tuple(dict(g) for g in grid)
            for g in grid:
                _check_hyper(self.family, {**self.hyperparameters, **g})
        object.__setattr__(self, "hyperparameters", dict(self.hyperparameters))
        object.__setattr__(self, "tuning_grid", grid)

    @property
    def params(self) -> dict:
        """Hyperparameters with family defaults filled in."""
        return {**DEFAULTS[self.family], **self.hyperparameters}

    def with_params(self, **updates) -> "LearnerSpec":
        return LearnerSpec(self.family, {**self.hyperparameters, **updates}, self.tuning_grid)

    def to_dict(self) -> dict:
        doc = {"family": self.family, "hyperparameters": dict(self.hyperparameters)}
        if self.tuning_grid is not None:
            doc["tuning_grid"] = [dict(g) for g in self.tuning_grid]
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> "LearnerSpec":
        if isinstance(doc, str):
            return cls(doc)
        return cls(
            family=doc["family"],
            hyperparameters=doc.get("hyperparameters", {}),
            tuning_grid=doc.get("tuning_grid"),
        )


@dataclass(frozen=True, eq=False)
class FittedLearner:
    spec: LearnerSpec
    state: object
    is_classifier: bool
    n_features: int


def _as_matrix(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


def _design(x):
    return np.column_stack([np.ones(x.shape[0]), x])


def _fit_linear(x, y, l2):
    z = _design(x)
    if l2 > 0:
        pen = np.full(z.shape[1], l2)
        pen[0] = 0.0
        return np.linalg.solve(z.T @ z + np.diag(pen), z.T @ y)
    coef, *_ = np.linalg.lstsq(z, y, rcond=None)
    return coef


def _fit_logistic(x, y, l2, max_iter):
    z = _design(x)
    n = z.shape[0]
    pen = np.full(z.shape[1], l2 * n)
    pen[0] = 0.0
    ybar = y.mean()
    coef = np.zeros(z.shape[1])
    coef[0] = math.log(ybar / (1 - ybar))
    for _ in range(int(max_iter)):
        p = expit(z @ coef)
        grad = z.T @ (p - y) + pen * coef
        w = np.maximum(p * (1 - p), 1e-12)
        hess = (z * w[:, None]).T @ z + np.diag(pen)
        step = np.linalg.solve(hess + 1e-12 * np.eye(z.shape[1]), grad)
        coef = coef - step
        if np.max(np.abs(step)) < 1e-10 * (1 + np.max(np.abs(coef))):
            break
    return coef


def _fit_forest(x, y, p, seed):
    trees = []
    n = x.shape[0]
    for t in range(int(p["n_estimators"])):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), t]))
        idx = rng.integers(0, n, n)
        trees.append(
            _cart.fit_tree(
                x[idx], y[idx], int(p["max_depth"]), int(p["min_leaf"]), p["max_features"], rng
            )
        )
    return trees


def _fit_boosting(x, y, p, seed, is_classifier):
    n = x.shape[0]
    lr = float(p["learning_rate"])
    if is_classifier:
        ybar = y.mean()
        init = math.log(ybar / (1 - ybar))
    else:
        init = float(y.mean())
    f = np.full(n, init)
    trees = []
    for t in range(int(p["n_estimators"])):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), t]))
        if p["subsample"] < 1.0:
            idx = np.sort(rng.choice(n, size=max(1, int(round(p["subsample"] * n))), replace=False))
        else:
            idx = np.arange(n)
        if is_classifier:
            prob = expit(f)
            resid = y - prob
            hess = prob * (1 - prob)
        else:
            resid = y - f
        tree = _cart.fit_tree(x[idx], resid[idx], int(p["max_depth"]), int(p["min_leaf"]), None, rng)
        if is_classifier:
            # Newton step per leaf: sum of gradients over sum of hessians
            leaves = tree.apply(x[idx])
            num = np.bincount(leaves, weights=resid[idx], minlength=tree.n_nodes)
            den = np.bincount(leaves, weights=hess[idx], minlength=tree.n_nodes)
            tree.value = np.where(den > 1e-12, num / np.maximum(den, 1e-12), 0.0)
        tree.value = tree.value * lr
        f = f + tree.predict(x)
        trees.append(tree)
    return init, trees


def fit(spec: LearnerSpec, x, target, is_classifier: bool, seed: int = 0) -> FittedLearner:
    """Fit ``spec`` to ``(x, target)``.

    Classifier targets must be 0/1 and contain both classes. The fit is a
    pure function of ``(spec, x, target, seed)``.
    """
    x = _as_matrix(x)
    y = np.asarray(target, dtype=float).ravel()
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"x has {x.shape[0]} rows, target has {y.shape[0]}")
    if x.shape[0] == 0:
        raise FitError("cannot fit on zero rows")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise FitError("non-finite training data")
    p = spec.params
    fam = spec.family
    if is_classifier:
        if not np.all((y == 0) | (y == 1)):
            raise FitError("classifier targets must be 0 or 1")
        if y.min() == y.max():
            raise FitError(f"classifier target has a single class ({y[0]:g})")
        if fam == "linear":
            raise ConfigurationError("linear family is regression only; use logistic")
    elif fam == "logistic":
        raise ConfigurationError("logistic family is classification only; use linear")

    if fam == "linear":
        state = _fit_linear(x, y, float(p["l2"]))
    elif fam == "logistic":
        state = _fit_logistic(x, y, float(p["l2"]), p["max_iter"])
    elif fam == "random_forest":
        state = _fit_forest(x, y, p, seed)
    else:
        state = _fit_boosting(x, y, p, seed, is_classifier)
    return FittedLearner(spec=spec, state=state, is_classifier=bool(is_classifier), n_features=x.shape[1])


def predict(model: FittedLearner, x, return_clamped: bool = False):
    """Predictions for the rows of ``x``.

    Classifier output is clamped to [0, 1]; with ``return_clamped`` the
    number of clamped values is returned as a second element.
    """
    x = _as_matrix(x)
    if x.shape[0] == 0:
        out = np.zeros(0)
        return (out, 0) if return_clamped else out
    if x.shape[1] != model.n_features:
        raise ShapeError(f"expected {model.n_features} features, got {x.shape[1]}")
    fam = model.spec.family
    if fam == "linear":
        out = _design(x) @ model.state
    elif fam == "logistic":
        out = expit(_design(x) @ model.state)
    elif fam == "random_forest":
        out = np.mean([t.predict(x) for t in model.state], axis=0)
    else:
        init, trees = model.state
        f = np.full(x.shape[0], init)
        for t in trees:
            f += t.predict(x)
        out = expit(f) if model.is_classifier else f
    clamped = 0
    if model.is_classifier:
        clamped = int(np.count_nonzero((out < 0) | (out > 1)))
        out = np.clip(out, 0.0, 1.0)
    return (out, clamped) if return_clamped else out


def rmse(pred, target) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.size == 0:
        return float("nan")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def log_loss(prob, target) -> float:
    prob = np.clip(np.asarray(prob, dtype=float), PROB_EPS, 1 - PROB_EPS)
    y = np.asarray(target, dtype=float)
    return float(-np.mean(y * np.log(prob) + (1 - y) * np.log(1 - prob)))


def cv_loss(spec: LearnerSpec, x, target, folds, is_classifier: bool, seed: int = 0) -> float:
    """Out-of-fold loss over ``folds``: RMSE for regressors, log-loss for
    classifiers."""
    x = _as_matrix(x)
    y = np.asarray(target, dtype=float).ravel()
    pred = np.empty_like(y)
    for f in range(folds.k):
        tr, te = folds.train_index(f), folds.test_index(f)
        model = fit(spec, x[tr], y[tr], is_classifier, seed=seed + f)
        pred[te] = predict(model, x[te])
    return log_loss(pred, y) if is_classifier else rmse(pred, y)


def tune(spec: LearnerSpec, x, target, folds, is_classifier: bool = False, seed: int = 0) -> LearnerSpec:
    """Grid search over ``spec.tuning_grid``.

    Returns the spec with the winning grid element merged into its
    hyperparameters (grid removed). Ties keep the earlier grid element.
    """
    if not spec.tuning_grid:
        raise ConfigurationError("tuning_grid is empty")
    best, best_loss = None, math.inf
    for g in spec.tuning_grid:
        cand = LearnerSpec(spec.family, {**spec.hyperparameters, **g})
        loss = cv_loss(cand, x, target, folds, is_classifier, seed)
        if loss < best_loss:
            best, best_loss = cand, loss
    return best


def nuisance_rmse(predictions, data) -> tuple[float, float, float]:
    """RMSE of out-of-fold nuisances: propensity against ``a`` on all rows,
    ``g0`` against ``y`` on untreated rows, ``g1`` on treated rows."""
    a = data.a
    rmse_m = rmse(predictions.m_hat, a)
    rmse_g0 = rmse(predictions.g0_hat[a == 0], data.y[a == 0])
    rmse_g1 = rmse(predictions.g1_hat[a == 1], data.y[a == 1])
    return rmse_m, rmse_g0, rmse_g1
