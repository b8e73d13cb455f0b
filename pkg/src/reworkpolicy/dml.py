"""Cross-fitted interactive regression model.

Nuisances are predicted out of fold, the propensity is clamped to
``trim`` bounds, and effects are read off the doubly-robust (AIPW) score
``psi = psi_a * theta + psi_b``.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from . import learners
from .data import SCHEMA_VERSION, FoldAssignment, LotDataset
from .errors import (
    ConfigurationError,
    CrossfitError,
    EstimandUndefinedError,
    FitError,
    InsufficientDataError,
    ShapeError,
)

DEFAULT_TRIM = (0.025, 0.975)
TARGETS = ("ATE", "ATTE")


def _ro(arr, dtype=float):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _check_trim(trim):
    lo, hi = float(trim[0]), float(trim[1])
    if not 0 < lo < hi < 1:
        raise ConfigurationError(f"trim bounds must satisfy 0 < lo < hi < 1, got {trim}")
    return lo, hi


def trim_propensity(m, trim=DEFAULT_TRIM) -> np.ndarray:
    """Clamp propensities into ``[lo, hi]``. Idempotent."""
    lo, hi = _check_trim(trim)
    return np.clip(np.asarray(m, dtype=float), lo, hi)


@dataclass(frozen=True, eq=False)
class NuisancePredictions:
    """Out-of-fold nuisance predictions for every row.

    ``m_hat`` is stored after trimming; ``n_trimmed`` counts rows whose raw
    propensity fell outside the bounds. ``folds`` is ``None`` when the
    nuisances were supplied externally (e.g. oracle values).
    """

    g0_hat: np.ndarray
    g1_hat: np.ndarray
    m_hat: np.ndarray
    folds: FoldAssignment | None = None
    trim_bounds: tuple = DEFAULT_TRIM
    n_trimmed: int = 0
    n_clamped_classifier: int = 0

    def __post_init__(self):
        lo, hi = _check_trim(self.trim_bounds)
        g0 = _ro(self.g0_hat)
        g1 = _ro(self.g1_hat)
        m_raw = np.asarray(self.m_hat, dtype=float)
        if not (g0.shape == g1.shape == m_raw.shape) or g0.ndim != 1:
            raise ShapeError("nuisance vectors must be 1-d and equally long")
        if self.folds is not None and self.folds.n != g0.shape[0]:
            raise ShapeError("folds do not match nuisance length")
        n_out = int(np.count_nonzero((m_raw < lo) | (m_raw > hi)))
        object.__setattr__(self, "g0_hat", g0)
        object.__setattr__(self, "g1_hat", g1)
        object.__setattr__(self, "m_hat", _ro(np.clip(m_raw, lo, hi)))
        object.__setattr__(self, "trim_bounds", (lo, hi))
        object.__setattr__(self, "n_trimmed", int(self.n_trimmed) + n_out)

    @property
    def n(self) -> int:
        return int(self.g0_hat.shape[0])

    def perturbed(self, d_g0=0.0, d_g1=0.0, d_m=0.0) -> "NuisancePredictions":
        """Shifted copy used by sensitivity checks; ``m`` is not re-trimmed."""
        out = object.__new__(NuisancePredictions)
        for name, val in (
            ("g0_hat", self.g0_hat + d_g0),
            ("g1_hat", self.g1_hat + d_g1),
            ("m_hat", self.m_hat + d_m),
        ):
            object.__setattr__(out, name, _ro(val))
        object.__setattr__(out, "folds", self.folds)
        object.__setattr__(out, "trim_bounds", self.trim_bounds)
        object.__setattr__(out, "n_trimmed", self.n_trimmed)
        object.__setattr__(out, "n_clamped_classifier", self.n_clamped_classifier)
        return out


def crossfit_nuisances(
    data: LotDataset,
    g_spec: learners.LearnerSpec,
    m_spec: learners.LearnerSpec,
    folds: FoldAssignment,
    trim=DEFAULT_TRIM,
    seed: int = 0,
) -> NuisancePredictions:
    """Fit ``g(1, .)`` on treated, ``g(0, .)`` on untreated and ``m`` on all
    rows outside each fold; predict inside the fold."""
    _check_trim(trim)
    if folds.n != data.n:
        raise CrossfitError(f"fold assignment covers {folds.n} rows, data has {data.n}")
    x, y, a = data.x, data.y, data.a
    g0 = np.empty(data.n)
    g1 = np.empty(data.n)
    m = np.empty(data.n)
    clamped = 0
    for f in range(folds.k):
        tr, te = folds.train_index(f), folds.test_index(f)
        tr1 = tr[a[tr] == 1]
        tr0 = tr[a[tr] == 0]
        if tr1.size == 0 or tr0.size == 0:
            raise CrossfitError(f"fold {f}: training complement lacks a treatment arm")
        base = 1000 * int(seed) + 10 * f
        try:
            mod1 = learners.fit(g_spec, x[tr1], y[tr1], False, seed=base + 1)
            mod0 = learners.fit(g_spec, x[tr0], y[tr0], False, seed=base + 2)
            modm = learners.fit(m_spec, x[tr], a[tr], True, seed=base + 3)
        except FitError as exc:
            raise CrossfitError(f"fold {f}: {exc}") from exc
        g1[te] = learners.predict(mod1, x[te])
        g0[te] = learners.predict(mod0, x[te])
        m[te], c = learners.predict(modm, x[te], return_clamped=True)
        clamped += c
    return NuisancePredictions(g0, g1, m, folds, tuple(trim), 0, clamped)


@dataclass(frozen=True, eq=False)
class ScoreElements:
    """Per-row linear score pieces ``(psi_a, psi_b)`` for one target."""

    psi_a: np.ndarray
    psi_b: np.ndarray
    target: str = "ATE"
    lot_id: np.ndarray | None = None

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ConfigurationError(f"unknown target {self.target!r}")
        pa, pb = _ro(self.psi_a), _ro(self.psi_b)
        if pa.shape != pb.shape or pa.ndim != 1:
            raise ShapeError("psi_a and psi_b must be 1-d and equally long")
        if not (np.isfinite(pa).all() and np.isfinite(pb).all()):
            raise ConfigurationError("score elements must be finite")
        object.__setattr__(self, "psi_a", pa)
        object.__setattr__(self, "psi_b", pb)
        if self.lot_id is not None:
            ids = np.array([str(v) for v in self.lot_id], dtype=object)
            ids.setflags(write=False)
            object.__setattr__(self, "lot_id", ids)

    @property
    def n(self) -> int:
        return int(self.psi_b.shape[0])

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "type": "ScoreElements",
            "target": self.target,
            "psi_a": self.psi_a.tolist(),
            "psi_b": self.psi_b.tolist(),
            "lot_id": None if self.lot_id is None else list(self.lot_id),
        }

    @classmethod
    def from_dict(cls, doc) -> "ScoreElements":
        return cls(doc["psi_a"], doc["psi_b"], doc.get("target", "ATE"), doc.get("lot_id"))

    def write_csv(self, path) -> None:
        ids = self.lot_id if self.lot_id is not None else [str(i) for i in range(self.n)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lot_id", "psi_a", "psi_b"])
            for i in range(self.n):
                w.writerow([ids[i], repr(float(self.psi_a[i])), repr(float(self.psi_b[i]))])

    @classmethod
    def read_csv(cls, path, target: str = "ATE") -> "ScoreElements":
        ids, pa, pb = [], [], []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                ids.append(row["lot_id"])
                pa.append(float(row["psi_a"]))
                pb.append(float(row["psi_b"]))
        return cls(pa, pb, target, ids)


def _aligned(data, nu):
    if nu.n != data.n:
        raise ShapeError(f"nuisances cover {nu.n} rows, data has {data.n}")


def aipw_scores(data: LotDataset, nu: NuisancePredictions) -> ScoreElements:
    """ATE score: ``psi_a = -1`` and
    ``psi_b = g1 - g0 + a (y - g1) / m - (1 - a)(y - g0) / (1 - m)``."""
    _aligned(data, nu)
    y, a = data.y, data.a
    g0, g1, m = nu.g0_hat, nu.g1_hat, nu.m_hat
    psi_b = g1 - g0 + a * (y - g1) / m - (1 - a) * (y - g0) / (1 - m)
    return ScoreElements(-np.ones(data.n), psi_b, "ATE", data.lot_id)


def atte_scores(data: LotDataset, nu: NuisancePredictions) -> ScoreElements:
    """ATTE score with the treated share ``p`` estimated by ``mean(a)``:
    ``psi_a = -a / p`` and
    ``psi_b = [a (y - g0) - m (1 - a)(y - g0) / (1 - m)] / p``."""
    _aligned(data, nu)
    y, a = data.y, data.a
    p = a.mean()
    if p == 0:
        raise EstimandUndefinedError("no treated observations; ATTE undefined", share=0.0)
    g0, m = nu.g0_hat, nu.m_hat
    resid = y - g0
    psi_b = (a * resid - m * (1 - a) * resid / (1 - m)) / p
    return ScoreElements(-a / p, psi_b, "ATTE", data.lot_id)


@dataclass(frozen=True)
class EffectEstimate:
    theta_hat: float
    std_error: float
    ci_lo: float
    ci_hi: float
    n_used: int
    target: str = "ATE"
    level: float = 0.95
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "type": "EffectEstimate",
            "target": self.target,
            "theta_hat": self.theta_hat,
            "std_error": self.std_error,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "level": self.level,
            "n_used": self.n_used,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, doc) -> "EffectEstimate":
        return cls(
            theta_hat=doc["theta_hat"],
            std_error=doc["std_error"],
            ci_lo=doc["ci_lo"],
            ci_hi=doc["ci_hi"],
            n_used=doc["n_used"],
            target=doc.get("target", "ATE"),
            level=doc.get("level", 0.95),
            degenerate=doc.get("degenerate", False),
        )


def solve_score(scores: ScoreElements, level: float = 0.95) -> EffectEstimate:
    """Root of the empirical linear moment with a plug-in standard error.

    ``theta = -sum(psi_b) / sum(psi_a)``; the influence terms are
    ``psi / -mean(psi_a)`` and their sample standard deviation over ``sqrt(n)``
    is the standard error.
    """
    if not 0 < level < 1:
        raise ConfigurationError("level must lie in (0, 1)")
    n = scores.n
    if n < 2:
        raise InsufficientDataError(f"need at least 2 observations, got {n}")
    pa, pb = scores.psi_a, scores.psi_b
    if scores.target == "ATE" and np.all(pa == -1.0):
        theta = float(pb.mean())
        infl = pb - theta
    else:
        j = pa.mean()
        if j == 0:
            raise EstimandUndefinedError("mean psi_a is zero; moment has no unique root")
        theta = float(-pb.sum() / pa.sum())
        infl = (pa * theta + pb) / -j
    se = float(infl.std(ddof=1) / math.sqrt(n))
    z = float(norm.ppf(0.5 + level / 2))
    return EffectEstimate(
        theta_hat=theta,
        std_error=se,
        ci_lo=theta - z * se,
        ci_hi=theta + z * se,
        n_used=n,
        target=scores.target,
        level=level,
        degenerate=se == 0.0,
    )


def estimate_ate(scores: ScoreElements, level: float = 0.95) -> EffectEstimate:
    if scores.target != "ATE":
        raise ConfigurationError("estimate_ate needs ATE score elements")
    return solve_score(scores, level)


def estimate_atte(data: LotDataset, nu: NuisancePredictions, level: float = 0.95) -> EffectEstimate:
    return solve_score(atte_scores(data, nu), level)


def moment(scores: ScoreElements, theta: float) -> float:
    """Empirical mean of ``psi_a * theta + psi_b``."""
    return float(np.mean(scores.psi_a * theta + scores.psi_b))


def default_directions(data: LotDataset) -> dict:
    """Fixed, bounded perturbation directions built from the first covariate."""
    x1 = data.x[:, 0]
    spread = np.ptp(x1)
    z = (x1 - x1.min()) / spread * 2 - 1 if spread > 0 else np.zeros_like(x1)
    return {"g0": 1.0 + 0.5 * z, "g1": 1.0 - 0.5 * z, "m": 0.5 + 0.5 * z**2}


def orthogonality_check(
    data: LotDataset,
    nu: NuisancePredictions,
    theta_hat: float,
    eps: float,
    perturb=("g0", "g1", "m"),
    directions: dict | None = None,
) -> float:
    """Largest finite-difference slope of the mean ATE score.

    Every sign pattern of ``+/- eps`` times the fixed direction is applied
    jointly to the nuisances named in ``perturb``; the slope is
    ``|mean psi(perturbed) - mean psi(base)| / eps``. For an orthogonal
    score evaluated at the true nuisances the slope is of order ``eps``.
    """
    if eps == 0:
        return 0.0
    if eps < 0:
        raise ConfigurationError("eps must be non-negative")
    unknown = set(perturb) - {"g0", "g1", "m"}
    if unknown:
        raise ConfigurationError(f"unknown nuisances {sorted(unknown)}")
    h = default_directions(data) if directions is None else directions
    base = moment(aipw_scores(data, nu), theta_hat)
    names = tuple(perturb)
    worst = 0.0
    for signs in itertools.product((-1.0, 1.0), repeat=len(names)):
        shift = {f"d_{k}": s * eps * h[k] for k, s in zip(names, signs)}
        moved = moment(aipw_scores(data, nu.perturbed(**shift)), theta_hat)
        worst = max(worst, abs(moved - base) / eps)
    return worst
