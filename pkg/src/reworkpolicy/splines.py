"""B-spline bases in one and two dimensions."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ShapeError

KINDS = ("bspline_1d", "tensor_bspline_2d", "intercept")
KNOT_RULES = ("quantile", "uniform")


def knot_vector(lo: float, hi: float, interior: Sequence[float], degree: int) -> np.ndarray:
    """Clamped knot vector: ``degree + 1`` repeated boundary knots."""
    return np.concatenate([np.full(degree + 1, lo), np.asarray(interior, float), np.full(degree + 1, hi)])


def bspline_design(x, knots, degree: int) -> np.ndarray:
    """Evaluate all B-splines of a clamped knot vector at ``x``.

    Cox-de Boor recursion. The right boundary is included in the last
    non-degenerate knot span, so rows sum to one on ``[knots[0], knots[-1]]``.
    """
    x = np.asarray(x, dtype=float).ravel()
    t = np.asarray(knots, dtype=float)
    n_basis = t.size - degree - 1
    # degree-0 indicators on half-open spans, last non-empty span closed
    span = np.searchsorted(t, x, side="right") - 1
    last = np.flatnonzero(t[:-1] < t[1:])[-1]
    span = np.where(x >= t[last + 1], last, span)
    b = np.zeros((x.size, t.size - 1))
    ok = (span >= 0) & (span < t.size - 1)
    b[np.flatnonzero(ok), span[ok]] = 1.0
    for k in range(1, degree + 1):
        nb = t.size - 1 - k
        out = np.zeros((x.size, nb))
        for i in range(nb):
            d1 = t[i + k] - t[i]
            d2 = t[i + k + 1] - t[i + 1]
            if d1 > 0:
                out[:, i] += (x - t[i]) / d1 * b[:, i]
            if d2 > 0:
                out[:, i] += (t[i + k + 1] - x) / d2 * b[:, i + 1]
        b = out
    return b[:, :n_basis]


@dataclass(frozen=True)
class BasisSpec:
    """Spline basis configuration.

    ``df`` is the number of columns per axis, so a 2-d tensor basis has
    ``df**2`` columns. ``support`` and ``interior_knots`` are per-axis and
    are filled in by :meth:`resolve` from data when not given.
    """

    kind: str = "bspline_1d"
    degree: int = 3
    df: int = 5
    knot_rule: str = "quantile"
    support: tuple | None = None
    interior_knots: tuple | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown basis kind {self.kind!r}")
        if self.knot_rule not in KNOT_RULES:
            raise ConfigurationError(f"unknown knot_rule {self.knot_rule!r}")
        if self.kind != "intercept":
            if int(self.degree) < 1:
                raise ConfigurationError("degree must be at least 1")
            if int(self.df) < int(self.degree) + 1:
                raise ConfigurationError(
                    f"df={self.df} is below degree + 1 = {int(self.degree) + 1}"
                )
        if self.support is not None:
            sup = tuple((float(lo), float(hi)) for lo, hi in self.support)
            if len(sup) != self.q:
                raise ConfigurationError(f"support needs {self.q} axis ranges")
            for lo, hi in sup:
                if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                    raise ConfigurationError(f"invalid support ({lo}, {hi})")
            object.__setattr__(self, "support", sup)
        if self.interior_knots is not None:
            object.__setattr__(
                self, "interior_knots", tuple(tuple(float(v) for v in k) for k in self.interior_knots)
            )

    @property
    def q(self) -> int:
        """Number of input columns."""
        return 2 if self.kind == "tensor_bspline_2d" else 1

    @property
    def p(self) -> int:
        """Number of basis columns."""
        if self.kind == "intercept":
            return 1
        return self.df if self.kind == "bspline_1d" else self.df**2

    @property
    def n_interior(self) -> int:
        return int(self.df) - int(self.degree) - 1

    @property
    def resolved(self) -> bool:
        return self.kind == "intercept" or (self.support is not None and self.interior_knots is not None)

    def resolve(self, x_tilde) -> "BasisSpec":
        """Fix support and interior knots from the columns of ``x_tilde``."""
        if self.kind == "intercept":
            return self
        x = _as_input(x_tilde, self.q)
        support = self.support
        if support is None:
            support = tuple((float(x[:, j].min()), float(x[:, j].max())) for j in range(self.q))
            for lo, hi in support:
                if not lo < hi:
                    raise ConfigurationError("cannot infer support from constant data")
        knots = self.interior_knots
        if knots is None:
            knots = []
            probs = np.arange(1, self.n_interior + 1) / (self.n_interior + 1)
            for j, (lo, hi) in enumerate(support):
                if self.knot_rule == "quantile":
                    col = np.clip(x[:, j], lo, hi)
                    knots.append(tuple(np.quantile(col, probs).tolist()))
                else:
                    knots.append(tuple((lo + probs * (hi - lo)).tolist()))
        return replace(self, support=tuple(support), interior_knots=tuple(knots))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "degree": int(self.degree),
            "df": int(self.df),
            "knot_rule": self.knot_rule,
            "support": None if self.support is None else [list(s) for s in self.support],
            "interior_knots": None
            if self.interior_knots is None
            else [list(k) for k in self.interior_knots],
        }

    @classmethod
    def from_dict(cls, doc) -> "BasisSpec":
        return cls(
            kind=doc.get("kind", "bspline_1d"),
            degree=int(doc.get("degree", 3)),
            df=int(doc.get("df", 5)),
            knot_rule=doc.get("knot_rule", "quantile"),
            support=doc.get("support"),
            interior_knots=doc.get("interior_knots"),
        )


def _as_input(x_tilde, q):
    x = np.asarray(x_tilde, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] != q:
        raise ShapeError(f"basis expects {q} input column(s), got {x.shape[1]}")
    return x


def build_basis(spec: BasisSpec, x_tilde, return_clamped: bool = False):
    """Basis matrix for the rows of ``x_tilde``.

    An unresolved spec is first resolved on ``x_tilde`` itself. Inputs
    outside the support are clamped to it; ``return_clamped`` also returns
    the number of clamped entries.
    """
    x = _as_input(x_tilde, spec.q)
    if spec.kind == "intercept":
        out = np.ones((x.shape[0], 1))
        return (out, 0) if return_clamped else out
    if not spec.resolved:
        spec = spec.resolve(x)
    cols = []
    clamped = 0
    for j in range(spec.q):
        lo, hi = spec.support[j]
        xj = x[:, j]
        clamped += int(np.count_nonzero((xj < lo) | (xj > hi)))
        t = knot_vector(lo, hi, spec.interior_knots[j], int(spec.degree))
        cols.append(bspline_design(np.clip(xj, lo, hi), t, int(spec.degree)))
    if spec.q == 1:
        out = cols[0]
    else:
        # row-wise Kronecker product, axis-0 index varying slowest
        out = (cols[0][:, :, None] * cols[1][:, None, :]).reshape(x.shape[0], -1)
    return (out, clamped) if return_clamped else out
