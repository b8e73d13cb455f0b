"""Conditional effects by least-squares projection of AIPW scores onto a
spline basis, with pointwise and uniform (sup-t multiplier bootstrap)
confidence bands."""

from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.stats import norm

from .data import SCHEMA_VERSION
from .errors import ConfigurationError, ShapeError, SingularityError, UnstableQuantileWarning
from .splines import BasisSpec, build_basis

RIDGE_PENALTY = 1e-8
DEFAULT_DRAWS = 1000
MIN_DRAWS = 100


@dataclass(frozen=True, eq=False)
class CateFit:
    """Projection coefficients and their robust covariance.

    ``omega_hat`` is the sandwich ``Q^-1 S Q^-1`` with ``Q = B'B / n`` and
    ``S = sum(e_i^2 b_i b_i') / n``, so ``Var(beta_hat) ~ omega_hat / n``.
    ``influence`` (rows ``Q^-1 b_i e_i``) is kept in memory for the
    multiplier bootstrap and is not serialised.
    """

    basis: BasisSpec
    beta_hat: np.ndarray
    omega_hat: np.ndarray
    n: int
    bootstrap_draws: np.ndarray | None = None
    influence: np.ndarray | None = None
    ridge: bool = False
    n_clamped: int = 0

    @property
    def p(self) -> int:
        return int(self.beta_hat.shape[0])

    def to_dict(self, include_draws: bool = False) -> dict:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "type": "CateFit",
            "basis": self.basis.to_dict(),
            "beta_hat": self.beta_hat.tolist(),
            "omega_hat": self.omega_hat.tolist(),
            "n": self.n,
            "ridge": self.ridge,
            "n_clamped": self.n_clamped,
            "draws_digest": None,
        }
        if self.bootstrap_draws is not None:
            draws = np.ascontiguousarray(self.bootstrap_draws, dtype="<f8")
            doc["draws_digest"] = {
                "shape": list(draws.shape),
                "sha256": hashlib.sha256(draws.tobytes()).hexdigest(),
            }
            if include_draws:
                doc["bootstrap_draws"] = draws.tolist()
        return doc

    @classmethod
    def from_dict(cls, doc) -> "CateFit":
        draws = doc.get("bootstrap_draws")
        return cls(
            basis=BasisSpec.from_dict(doc["basis"]),
            beta_hat=np.asarray(doc["beta_hat"], dtype=float),
            omega_hat=np.asarray(doc["omega_hat"], dtype=float),
            n=int(doc["n"]),
            bootstrap_draws=None if draws is None else np.asarray(draws, dtype=float),
            ridge=bool(doc.get("ridge", False)),
            n_clamped=int(doc.get("n_clamped", 0)),
        )


def _dependent_columns(b):
    _, r, piv = scipy.linalg.qr(b, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(b.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.count_nonzero(diag > tol))
    return rank, sorted(int(c) for c in piv[rank:])


def project_scores(
    psi_b,
    basis_matrix,
    basis: BasisSpec | None = None,
    ridge_fallback: bool = False,
) -> CateFit:
    """Least-squares projection of ``psi_b`` on ``basis_matrix``.

    A rank-deficient basis raises :class:`SingularityError` unless
    ``ridge_fallback`` is set, in which case a ``1e-8`` ridge penalty on the
    normalised Gram matrix is used and a warning is issued.
    """
    y = np.asarray(psi_b, dtype=float).ravel()
    b = np.asarray(basis_matrix, dtype=float)
    if b.ndim == 1:
        b = b[:, None]
    n, p = b.shape
    if y.shape[0] != n:
        raise ShapeError(f"psi_b has {y.shape[0]} rows, basis has {n}")
    if n <= p:
        raise ConfigurationError(f"need more observations ({n}) than basis columns ({p})")
    if basis is None:
        basis = BasisSpec(kind="intercept") if p == 1 else None

    rank, bad = _dependent_columns(b)
    q = b.T @ b / n
    ridge = rank < p
    if ridge:
        if not ridge_fallback:
            raise SingularityError(f"basis matrix has rank {rank} < {p}; dependent columns {bad}", bad)
        warnings.warn(f"rank-deficient basis (columns {bad}); using ridge {RIDGE_PENALTY}", RuntimeWarning)
        q_inv = np.linalg.inv(q + RIDGE_PENALTY * np.eye(p))
        beta = q_inv @ (b.T @ y / n)
    else:
        beta, *_ = np.linalg.lstsq(b, y, rcond=None)
        q_inv = np.linalg.inv(q)
    resid = y - b @ beta
    infl = (b * resid[:, None]) @ q_inv  # q_inv symmetric
    omega = infl.T @ infl / n
    omega = 0.5 * (omega + omega.T)
    return CateFit(basis=basis, beta_hat=beta, omega_hat=omega, n=n, influence=infl, ridge=ridge)


def fit_cate(psi_b, x_tilde, basis: BasisSpec, ridge_fallback: bool = False) -> CateFit:
    """Resolve ``basis`` on ``x_tilde``, build it and project ``psi_b``."""
    spec = basis.resolve(x_tilde)
    mat, clamped = build_basis(spec, x_tilde, return_clamped=True)
    fit = project_scores(psi_b, mat, spec, ridge_fallback)
    object.__setattr__(fit, "n_clamped", clamped)
    return fit


def _basis_at(fit: CateFit, x_tilde):
    if fit.basis is None:
        raise ConfigurationError("fit carries no basis specification")
    return build_basis(fit.basis, x_tilde)


def predict_cate(fit: CateFit, x_tilde) -> np.ndarray:
    return _basis_at(fit, x_tilde) @ fit.beta_hat


def pointwise_se(fit: CateFit, x_tilde) -> np.ndarray:
    b = _basis_at(fit, x_tilde)
    var = np.einsum("ij,jk,ik->i", b, fit.omega_hat, b) / fit.n
    return np.sqrt(np.maximum(var, 0.0))


def _check_alpha(alpha):
    if not 0 < alpha < 1:
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha}")


def pointwise_band(fit: CateFit, grid, alpha: float = 0.05):
    """Two-sided Gaussian band ``theta_hat -/+ z_{1-alpha/2} * se``."""
    _check_alpha(alpha)
    est = predict_cate(fit, grid)
    half = norm.ppf(1 - alpha / 2) * pointwise_se(fit, grid)
    return est - half, est + half


def bootstrap_draws(fit: CateFit, n_draws: int = DEFAULT_DRAWS, seed: int = 0) -> np.ndarray:
    """Gaussian multiplier draws of ``beta* - beta_hat``, shape ``(B, p)``.

    Multipliers are generated in one fixed stream and consumed in blocks,
    so the result depends only on ``(fit, n_draws, seed)``.
    """
    if fit.influence is None:
        if fit.bootstrap_draws is not None and fit.bootstrap_draws.shape[0] >= n_draws:
            return fit.bootstrap_draws[:n_draws]
        raise ConfigurationError("fit has neither influence terms nor enough stored draws")
    rng = np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))
    out = np.empty((n_draws, fit.p))
    block = max(1, 2_000_000 // max(fit.n, 1))
    for start in range(0, n_draws, block):
        stop = min(start + block, n_draws)
        xi = rng.standard_normal((stop - start, fit.n))
        out[start:stop] = xi @ fit.influence / fit.n
    return out


def uniform_critical_value(fit: CateFit, grid, alpha=0.05, n_draws=DEFAULT_DRAWS, seed=0) -> float:
    """(1 - alpha) quantile of the sup-t statistic over ``grid``.

    Never below the pointwise Gaussian value, so uniform bands always
    contain pointwise ones.
    """
    _check_alpha(alpha)
    if n_draws < MIN_DRAWS:
        warnings.warn(
            f"{n_draws} bootstrap draws is below {MIN_DRAWS}; quantile is unstable",
            UnstableQuantileWarning,
        )
    b = _basis_at(fit, grid)
    se = pointwise_se(fit, grid)
    z = float(norm.ppf(1 - alpha / 2))
    live = se > 0
    if not live.any():
        return z
    draws = bootstrap_draws(fit, n_draws, seed)
    t = np.abs(draws @ b[live].T) / se[live]
    sup = t.max(axis=1)
    return max(float(np.quantile(sup, 1 - alpha)), z)


def uniform_band(fit: CateFit, grid, alpha: float = 0.05, n_draws: int = DEFAULT_DRAWS, seed: int = 0):
    cv = uniform_critical_value(fit, grid, alpha, n_draws, seed)
    est = predict_cate(fit, grid)
    half = cv * pointwise_se(fit, grid)
    return est - half, est + half


def with_draws(fit: CateFit, n_draws: int = DEFAULT_DRAWS, seed: int = 0) -> CateFit:
    """Copy of ``fit`` carrying its bootstrap draws."""
    draws = bootstrap_draws(fit, n_draws, seed)
    return CateFit(fit.basis, fit.beta_hat, fit.omega_hat, fit.n, draws, fit.influence, fit.ridge, fit.n_clamped)


def default_grid(fit: CateFit, size: int = 50) -> np.ndarray:
    """Evenly spaced grid over the support (``size**2`` points in 2-d)."""
    if fit.basis.kind == "intercept" or fit.basis.support is None:
        raise ConfigurationError("grid needs a basis with known support")
    axes = [np.linspace(lo, hi, size) for lo, hi in fit.basis.support]
    if len(axes) == 1:
        return axes[0][:, None]
    g0, g1 = np.meshgrid(axes[0], axes[1], indexing="ij")
    return np.column_stack([g0.ravel(), g1.ravel()])


def grid_table(fit: CateFit, grid, alpha=0.05, n_draws=DEFAULT_DRAWS, seed=0) -> tuple[list, np.ndarray]:
    """Header and rows ``(x..., theta, lo_pt, hi_pt, lo_unif, hi_unif)``."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    est = predict_cate(fit, grid)
    lo_pt, hi_pt = pointwise_band(fit, grid, alpha)
    lo_u, hi_u = uniform_band(fit, grid, alpha, n_draws, seed)
    names = ["x_tilde"] if grid.shape[1] == 1 else [f"x_tilde_{j + 1}" for j in range(grid.shape[1])]
    header = names + ["theta_hat", "lo_pt", "hi_pt", "lo_unif", "hi_unif"]
    return header, np.column_stack([grid, est, lo_pt, hi_pt, lo_u, hi_u])


def write_grid_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])

