"""Lot-level data: containers, CSV ingestion, PCA of color coordinates,
stratified fold assignment and a synthetic generator with known truth.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import (
    ConfigurationError,
    DataValidationError,
    DegenerateDataError,
    SchemaError,
    ShapeError,
    StratificationError,
)

SCHEMA_VERSION = 1

PROPENSITY_FLOOR = 0.05
PROPENSITY_CEIL = 0.95


def _frozen(arr, dtype=float):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class LotDataset:
    """Observed lots: yield ``y``, rework flag ``a`` and covariates ``x``.

    Arrays are copied and made read-only on construction.
    """

    y: np.ndarray
    a: np.ndarray
    x: np.ndarray
    lot_id: np.ndarray = None
    feature_names: tuple = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        a_raw = np.asarray(self.a, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        n = y.shape[0]
        if a_raw.shape[0] != n or x.shape[0] != n:
            raise ShapeError(
                f"length mismatch: y={n}, a={a_raw.shape[0]}, x={x.shape[0]}"
            )
        if x.shape[1] < 1:
            raise ShapeError("x needs at least one column")
        for name, arr in (("y", y), ("a", a_raw)):
            bad = np.flatnonzero(~np.isfinite(arr))
            if bad.size:
                raise DataValidationError(f"non-finite {name}", row=int(bad[0]))
        bad_rows = np.flatnonzero(~np.isfinite(x).all(axis=1))
        if bad_rows.size:
            raise DataValidationError("non-finite x", row=int(bad_rows[0]))
        bad = np.flatnonzero((a_raw != 0) & (a_raw != 1))
        if bad.size:
            raise DataValidationError(
                f"treatment must be 0 or 1, got {a_raw[bad[0]]:g}", row=int(bad[0])
            )
        if n and (a_raw.min() == a_raw.max()):
            raise DataValidationError("both treatment arms must occur")

        lot_id = self.lot_id
        if lot_id is None:
            width = max(len(str(n)), 1)
            lot_id = [f"L{i:0{width}d}" for i in range(n)]
        lot_id = np.array([str(v) for v in lot_id], dtype=object)
        if lot_id.shape[0] != n:
            raise ShapeError("lot_id length mismatch")
        lot_id.setflags(write=False)

        names = self.feature_names
        if names is None:
            names = tuple(f"x{j + 1}" for j in range(x.shape[1]))
        names = tuple(str(s) for s in names)
        if len(names) != x.shape[1]:
            raise ShapeError("feature_names length mismatch")

        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "a", _frozen(a_raw.astype(np.int64), dtype=np.int64))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "lot_id", lot_id)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def d(self) -> int:
        return int(self.x.shape[1])

    def subset(self, idx) -> "LotDataset":
        idx = np.asarray(idx)
        return LotDataset(
            self.y[idx], self.a[idx], self.x[idx], self.lot_id[idx], self.feature_names
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "type": "LotDataset",
            "n": self.n,
            "feature_names": list(self.feature_names),
            "y": self.y.tolist(),
            "a": self.a.tolist(),
            "x": self.x.tolist(),
            "lot_id": list(self.lot_id),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "LotDataset":
        _check_version(doc, "LotDataset")
        return cls(
            y=doc["y"],
            a=doc["a"],
            x=np.asarray(doc["x"], dtype=float).reshape(doc["n"], -1),
            lot_id=doc["lot_id"],
            feature_names=tuple(doc["feature_names"]),
        )


def _check_version(doc, type_name):
    if doc.get("type") != type_name:
        raise ConfigurationError(f"expected a {type_name} document, got {doc.get('type')!r}")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(
            f"unsupported schema_version {doc.get('schema_version')!r}"
        )


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass(frozen=True)
class CsvSchema:
    """Column-name mapping for :func:`load_dataset`."""

    y: str = "y"
    a: str = "a"
    x: tuple = ("x1", "x2")
    lot_id: str | None = None

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "CsvSchema":
        x = mapping.get("x", ("x1", "x2"))
        if isinstance(x, str):
            x = (x,)
        return cls(
            y=mapping.get("y", "y"),
            a=mapping.get("a", "a"),
            x=tuple(x),
            lot_id=mapping.get("lot_id"),
        )

    def to_dict(self) -> dict:
        return {"y": self.y, "a": self.a, "x": list(self.x), "lot_id": self.lot_id}


def _parse_float(text, column, row):
    try:
        return float(text)
    except (TypeError, ValueError):
        raise DataValidationError(
            f"column {column!r}: cannot parse {text!r} as a number", row=row
        ) from None


def load_dataset(path, schema: CsvSchema | Mapping | None = None) -> LotDataset:
    """Read a lot table from CSV.

    ``schema`` maps the roles y / a / x / lot_id to column names. Row order is
    preserved. Validation errors carry the zero-based data row.
    """
    if schema is None:
        schema = CsvSchema()
    elif not isinstance(schema, CsvSchema):
        schema = CsvSchema.from_mapping(schema)

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError("empty CSV file") from None
        header = [h.strip() for h in header]
        col = {name: j for j, name in enumerate(header)}
        wanted = [schema.y, schema.a, *schema.x]
        if schema.lot_id is not None:
            wanted.append(schema.lot_id)
        for name in wanted:
            if name not in col:
                raise SchemaError(name)

        ys, as_, xs, ids = [], [], [], []
        for i, rec in enumerate(reader):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataValidationError(
                    f"expected {len(header)} fields, got {len(rec)}", row=i
                )
            y = _parse_float(rec[col[schema.y]], schema.y, i)
            a = _parse_float(rec[col[schema.a]], schema.a, i)
            if not (a == 0.0 or a == 1.0):
                raise DataValidationError(
                    f"treatment column {schema.a!r} must be 0 or 1, got {rec[col[schema.a]]!r}",
                    row=i,
                )
            x = [_parse_float(rec[col[c]], c, i) for c in schema.x]
            if not math.isfinite(y) or not all(math.isfinite(v) for v in x):
                raise DataValidationError("non-finite value", row=i)
            ys.append(y)
            as_.append(a)
            xs.append(x)
            ids.append(rec[col[schema.lot_id]] if schema.lot_id is not None else None)

    x_arr = np.array(xs, dtype=float).reshape(len(xs), len(schema.x))
    lot_id = ids if schema.lot_id is not None else None
    return LotDataset(ys, as_, x_arr, lot_id=lot_id, feature_names=schema.x)


def write_dataset(data: LotDataset, path, schema: CsvSchema | None = None) -> None:
    """Write ``data`` as CSV with shortest round-trip float formatting."""
    if schema is None:
        schema = CsvSchema(x=data.feature_names, lot_id="lot_id")
    lot_col = schema.lot_id or "lot_id"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([lot_col, schema.y, schema.a, *schema.x])
        for i in range(data.n):
            w.writerow(
                [data.lot_id[i], repr(float(data.y[i])), int(data.a[i])]
                + [repr(float(v)) for v in data.x[i]]
            )


# ---------------------------------------------------------------------------
# PCA


@dataclass(frozen=True, eq=False)
class PcaModel:
    """Principal axes of a small-dimensional measurement.

    ``components`` holds orthonormal rows sorted by explained variance. When
    fitted with ``standardize=True``, inputs are divided by ``scale`` after
    centering; otherwise ``scale`` is all ones.
    """

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    scale: np.ndarray = None

    def __post_init__(self):
        mean = _frozen(self.mean)
        comps = _frozen(np.atleast_2d(self.components))
        ev = _frozen(self.explained_variance)
        scale = np.ones_like(mean) if self.scale is None else self.scale
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "explained_variance", ev)
        object.__setattr__(self, "scale", _frozen(scale))

    @property
    def d(self) -> int:
        return int(self.mean.shape[0])

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        return self.explained_variance / self.explained_variance.sum()

    def transform(self, x) -> np.ndarray:
        return transform_pca(self, x)

    def inverse_transform(self, scores) -> np.ndarray:
        return inverse_transform_pca(self, scores)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "type": "PcaModel",
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
            "scale": self.scale.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "PcaModel":
        _check_version(doc, "PcaModel")
        return cls(
            mean=doc["mean"],
            components=doc["components"],
            explained_variance=doc["explained_variance"],
            scale=doc.get("scale"),
        )


def fit_pca(x, standardize: bool = False) -> PcaModel:
    """Fit principal axes to the rows of ``x``.

    Variances use the population normalisation (divide by n). Each axis is
    signed so that its largest-magnitude loading is positive.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n < 2 or d < 1:
        raise DegenerateDataError(f"need at least 2 rows and 1 column, got {x.shape}")
    if not np.isfinite(x).all():
        raise DataValidationError("non-finite values in PCA input")
    mean = x.mean(axis=0)
    xc = x - mean
    if standardize:
        scale = xc.std(axis=0)
        if np.any(scale == 0):
            raise DegenerateDataError("cannot standardize a constant column")
    else:
        scale = np.ones(d)
    xc = xc / scale
    if not np.any(xc):
        raise DegenerateDataError("input has zero total variance")

    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    if vt.shape[0] < d:
        # n < d: complete the basis with an orthonormal complement
        q, _ = np.linalg.qr(np.vstack([vt, np.eye(d)]).T)
        vt = q[:, :d].T
        s = np.concatenate([s, np.zeros(d - s.shape[0])])
    ev = s**2 / n
    pivot = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(d), pivot])
    signs[signs == 0] = 1.0
    vt = vt * signs[:, None]
    return PcaModel(mean=mean, components=vt, explained_variance=ev, scale=scale)


def _check_cols(model, arr):
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, model.d) if model.d > 1 else arr[:, None]
    if arr.shape[1] != model.d:
        raise ShapeError(f"expected {model.d} columns, got {arr.shape[1]}")
    return arr


def transform_pca(model: PcaModel, x) -> np.ndarray:
    """Component scores; column 0 is the main axis (C_m), column 1 the
    secondary axis (C_s)."""
    x = _check_cols(model, x)
    return ((x - model.mean) / model.scale) @ model.components.T


def inverse_transform_pca(model: PcaModel, scores) -> np.ndarray:
    scores = _check_cols(model, scores)
    return (scores @ model.components) * model.scale + model.mean


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    k: int
    fold_of: np.ndarray

    def __post_init__(self):
        fold_of = _frozen(self.fold_of, dtype=np.int64)
        if self.k < 2:
            raise ConfigurationError("fold count must be at least 2")
        if fold_of.size and (fold_of.min() < 0 or fold_of.max() >= self.k):
            raise ConfigurationError("fold index out of range")
        empty = sorted(set(range(self.k)) - set(np.unique(fold_of).tolist()))
        if empty:
            raise ConfigurationError(f"empty folds: {empty}")
        object.__setattr__(self, "fold_of", fold_of)

    @property
    def n(self) -> int:
        return int(self.fold_of.shape[0])

    def test_index(self, f: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == f)

    def train_index(self, f: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != f)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.k)

    def to_dict(self) -> dict:
        return {"k": self.k, "fold_of": self.fold_of.tolist()}

    @classmethod
    def from_dict(cls, doc) -> "FoldAssignment":
        return cls(k=int(doc["k"]), fold_of=doc["fold_of"])


def assign_folds(a, k: int, seed: int) -> FoldAssignment:
    """Stratified k-fold split on a binary treatment vector.

    Rows of each arm are shuffled and dealt round-robin; the untreated arm
    continues the cycle where the treated arm stopped, so overall fold sizes
    also differ by at most one.
    """
    a = np.asarray(a).ravel()
    if k < 2:
        raise ConfigurationError("fold count must be at least 2")
    treated = np.flatnonzero(a == 1)
    control = np.flatnonzero(a == 0)
    if treated.size + control.size != a.size:
        raise DataValidationError("treatment must be 0 or 1")
    for name, idx in (("treated", treated), ("untreated", control)):
        if idx.size < k:
            raise StratificationError(
                f"{name} arm has {idx.size} rows, fewer than k={k}"
            )
    rng = np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))
    fold_of = np.empty(a.size, dtype=np.int64)
    fold_of[rng.permutation(treated)] = np.arange(treated.size) % k
    fold_of[rng.permutation(control)] = (treated.size + np.arange(control.size)) % k
    return FoldAssignment(k=k, fold_of=fold_of)


# ---------------------------------------------------------------------------
# synthetic lots with known truth

EFFECT_FNS = ("constant", "linear", "step")
BASELINE_FNS = ("zero", "linear", "nonlinear")
PROPENSITY_FNS = ("constant", "logistic", "selection_on_gain")

_EFFECT_DEFAULTS = {
    "constant": {"value": 0.5},
    "linear": {"intercept": 0.0, "slope": 1.0},
    "step": {"low": 0.0, "height": 1.0, "cutoff": 0.0},
}
# intercept -2.15 with slope 3.0 puts the treated share near 0.21 under x1 ~ U(-1, 1)
_PROPENSITY_DEFAULTS = {
    "constant": {"value": 0.5},
    "logistic": {"intercept": 0.0, "slope": 1.5, "slope2": 0.0},
    "selection_on_gain": {"intercept": -2.15, "slope": 3.0, "slope2": 0.0},
}

X2_SD = 0.3
ORACLE_DRAWS = 1_000_000


@dataclass(frozen=True)
class DgpConfig:
    """Synthetic lot generator settings.

    Covariates are ``x1 ~ Uniform(-1, 1)`` and ``x2 ~ Normal(0, 0.3**2)``,
    independent. The true effect, baseline and propensity depend on them
    through the named built-in families; ``*_params`` override defaults.
    """

    n: int = 5000
    effect_fn: str = "constant"
    baseline_fn: str = "linear"
    propensity_fn: str = "logistic"
    noise_sd: float = 0.5
    seed: int = 0
    effect_params: Mapping = field(default_factory=dict)
    propensity_params: Mapping = field(default_factory=dict)
    propensity_bounds: tuple = (PROPENSITY_FLOOR, PROPENSITY_CEIL)

    def __post_init__(self):
        if int(self.n) < 2:
            raise ConfigurationError("n must be at least 2")
        if self.effect_fn not in EFFECT_FNS:
            raise ConfigurationError(f"unknown effect_fn {self.effect_fn!r}")
        if self.baseline_fn not in BASELINE_FNS:
            raise ConfigurationError(f"unknown baseline_fn {self.baseline_fn!r}")
        if self.propensity_fn not in PROPENSITY_FNS:
            raise ConfigurationError(f"unknown propensity_fn {self.propensity_fn!r}")
        if not (self.noise_sd > 0 and math.isfinite(self.noise_sd)):
            raise ConfigurationError("noise_sd must be positive")
        lo, hi = self.propensity_bounds
        if not (PROPENSITY_FLOOR <= lo < hi <= PROPENSITY_CEIL):
            raise ConfigurationError(
                f"propensity_bounds must lie within [{PROPENSITY_FLOOR}, {PROPENSITY_CEIL}]"
            )
        for name, params, defaults in (
            ("effect_params", self.effect_params, _EFFECT_DEFAULTS[self.effect_fn]),
            ("propensity_params", self.propensity_params, _PROPENSITY_DEFAULTS[self.propensity_fn]),
        ):
            unknown = set(params) - set(defaults)
            if unknown:
                raise ConfigurationError(f"unknown {name}: {sorted(unknown)}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "effect_params", dict(self.effect_params))
        object.__setattr__(self, "propensity_params", dict(self.propensity_params))
        object.__setattr__(self, "propensity_bounds", (float(lo), float(hi)))

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "effect_fn": self.effect_fn,
            "baseline_fn": self.baseline_fn,
            "propensity_fn": self.propensity_fn,
            "noise_sd": self.noise_sd,
            "seed": self.seed,
            "effect_params": dict(self.effect_params),
            "propensity_params": dict(self.propensity_params),
            "propensity_bounds": list(self.propensity_bounds),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "DgpConfig":
        doc = dict(doc)
        if "propensity_bounds" in doc:
            doc["propensity_bounds"] = tuple(doc["propensity_bounds"])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None


def _merge_params(kind, name, defaults, params):
    if name not in defaults:
        raise ConfigurationError(f"unknown {kind} function {name!r}")
    unknown = set(params or {}) - set(defaults[name])
    if unknown:
        raise ConfigurationError(f"unknown {kind} parameters {sorted(unknown)}")
    return {**defaults[name], **(params or {})}


def make_effect_fn(name: str, params: Mapping | None = None) -> Callable:
    p = _merge_params("effect", name, _EFFECT_DEFAULTS, params)
    if name == "constant":
        return lambda x: np.full(np.asarray(x).shape[0], float(p["value"]))
    if name == "linear":
        return lambda x: p["intercept"] + p["slope"] * np.asarray(x)[:, 0]
    return lambda x: p["low"] + p["height"] * (np.asarray(x)[:, 0] >= p["cutoff"])


def make_baseline_fn(name: str) -> Callable:
    if name == "zero":
        return lambda x: np.zeros(np.asarray(x).shape[0])
    if name == "linear":
        return lambda x: 1.0 + 0.5 * np.asarray(x)[:, 0] - 0.25 * np.asarray(x)[:, 1]
    return lambda x: np.sin(np.pi * np.asarray(x)[:, 0]) + 2.0 * np.asarray(x)[:, 1] ** 2


def make_propensity_fn(name: str, params: Mapping | None = None, bounds=(0.05, 0.95)) -> Callable:
    p = _merge_params("propensity", name, _PROPENSITY_DEFAULTS, params)
    lo, hi = max(bounds[0], PROPENSITY_FLOOR), min(bounds[1], PROPENSITY_CEIL)
    if name == "constant":
        return lambda x: np.full(np.asarray(x).shape[0], float(np.clip(p["value"], lo, hi)))

    def fn(x):
        x = np.asarray(x)
        z = p["intercept"] + p["slope"] * x[:, 0] + p["slope2"] * x[:, 1]
        return np.clip(expit(z), lo, hi)

    return fn


def draw_covariates(rng: np.random.Generator, n: int) -> np.ndarray:
    x1 = rng.uniform(-1.0, 1.0, n)
    x2 = rng.normal(0.0, X2_SD, n)
    return np.column_stack([x1, x2])


@dataclass(frozen=True, eq=False)
class OracleTruth:
    """Ground truth of a synthetic design.

    ``theta_ate`` and ``theta_atte`` are exact for a constant effect and
    Monte Carlo averages otherwise; ``mc_tolerance`` is three Monte Carlo
    standard errors (0 when exact).
    """

    theta_ate: float
    theta_atte: float
    theta_fn: Callable
    m_fn: Callable
    g0_fn: Callable
    mc_draws: int = 0
    mc_tolerance: float = 0.0
    config: DgpConfig | None = None

    def g1_fn(self, x):
        return self.g0_fn(x) + self.theta_fn(x)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "type": "OracleTruth",
            "theta_ate": self.theta_ate,
            "theta_atte": self.theta_atte,
            "mc_draws": self.mc_draws,
            "mc_tolerance": self.mc_tolerance,
            "config": self.config.to_dict() if self.config is not None else None,
        }


def _oracle(cfg: DgpConfig, theta_fn, m_fn, g0_fn) -> OracleTruth:
    if cfg.effect_fn == "constant":
        c = float(theta_fn(np.zeros((1, 2)))[0])
        return OracleTruth(c, c, theta_fn, m_fn, g0_fn, 0, 0.0, cfg)
    rng = np.random.Generator(np.random.Philox(key=cfg.seed, counter=[0, 0, 0, 1]))
    xs = draw_covariates(rng, ORACLE_DRAWS)
    th = theta_fn(xs)
    m = m_fn(xs)
    ate = float(th.mean())
    atte = float((th * m).sum() / m.sum())
    tol = 3.0 * float(th.std()) / math.sqrt(ORACLE_DRAWS)
    return OracleTruth(ate, atte, theta_fn, m_fn, g0_fn, ORACLE_DRAWS, tol, cfg)


def simulate_lots(cfg: DgpConfig) -> tuple[LotDataset, OracleTruth]:
    """Draw ``cfg.n`` lots and return them with the generating truth.

    ``A ~ Bernoulli(m*(x))`` and ``Y = g*(0, x) + A * theta*(x) + N(0, noise_sd^2)``.
    Identical configs give bitwise-identical output.
    """
    theta_fn = make_effect_fn(cfg.effect_fn, cfg.effect_params)
    m_fn = make_propensity_fn(cfg.propensity_fn, cfg.propensity_params, cfg.propensity_bounds)
    g0_fn = make_baseline_fn(cfg.baseline_fn)

    # Philox is counter based: one key per config seed, disjoint counter
    # blocks for the sample (stream 0) and the oracle draws (stream 1).
    rng = np.random.Generator(np.random.Philox(key=cfg.seed, counter=[0, 0, 0, 0]))
    x = draw_covariates(rng, cfg.n)
    m = m_fn(x)
    a = (rng.uniform(size=cfg.n) < m).astype(np.int64)
    y = g0_fn(x) + a * theta_fn(x) + rng.normal(0.0, cfg.noise_sd, cfg.n)
    if a.min() == a.max():
        raise DataValidationError(
            "simulated sample has a single treatment arm; increase n or widen propensities"
        )
    return LotDataset(y, a, x, feature_names=("x1", "x2")), _oracle(cfg, theta_fn, m_fn, g0_fn)


def exact_design(
    effect_fn: str = "linear",
    baseline_fn: str = "nonlinear",
    grid_size: int = 41,
    noise_sd: float = 0.5,
    effect_params: Mapping | None = None,
) -> tuple[LotDataset, OracleTruth]:
    """A finite population on which the interactive model holds exactly.

    Every grid point ``x1`` appears in 8 rows. The propensity takes values in
    {1/4, 1/2, 3/4}, the treated count per point is exactly ``8 * m*(x)``,
    and noise within each (point, arm) cell is a balanced ``+/- noise_sd``
    pattern that sums to zero. Sample means over this population therefore
    equal expectations, which makes finite-difference checks of the score
    free of sampling noise.
    """
    if grid_size < 2:
        raise ConfigurationError("grid_size must be at least 2")
    theta_fn = make_effect_fn(effect_fn, effect_params)
    g0_fn = make_baseline_fn(baseline_fn)

    def m_fn(x):
        x1 = np.asarray(x)[:, 0]
        return np.where(x1 < -1 / 3, 0.25, np.where(x1 > 1 / 3, 0.75, 0.5))

    grid = np.linspace(-0.9, 0.9, grid_size)
    rows_x, rows_a, rows_e = [], [], []
    for x1 in grid:
        m = float(m_fn(np.array([[x1, 0.0]]))[0])
        n_treated = int(round(8 * m))
        for arm, count in ((1, n_treated), (0, 8 - n_treated)):
            pattern = [noise_sd if j % 2 == 0 else -noise_sd for j in range(count)]
            if count % 2:
                pattern[-1] = 0.0
            for e in pattern:
                rows_x.append((x1, 0.0))
                rows_a.append(arm)
                rows_e.append(e)
    x = np.array(rows_x)
    a = np.array(rows_a)
    y = g0_fn(x) + a * theta_fn(x) + np.array(rows_e)
    th = theta_fn(x)
    m = m_fn(x)
    truth = OracleTruth(
        theta_ate=float(th.mean()),
        theta_atte=float((th * a).sum() / a.sum()),
        theta_fn=theta_fn,
        m_fn=m_fn,
        g0_fn=g0_fn,
    )
    return LotDataset(y, a, x, feature_names=("x1", "x2")), truth


def save_json(doc: Mapping, path) -> None:
    """Write ``doc`` as sorted, indented JSON with a trailing newline."""
    text = json.dumps(doc, indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


__all__: Sequence[str] = [
    "CsvSchema",
    "DgpConfig",
    "FoldAssignment",
    "LotDataset",
    "OracleTruth",
    "PcaModel",
    "assign_folds",
    "exact_design",
    "fit_pca",
    "inverse_transform_pca",
    "load_dataset",
    "simulate_lots",
    "transform_pca",
    "write_dataset",
]
