"""Legendre scaling functions, Gauss-Legendre rules and two-scale filters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

MAX_QUAD_ORDER = 60
MAX_FILTER_ORDER = 30

__all__ = [
    "MultiwaveletBasis",
    "TwoScaleFilters",
    "build_two_scale_filters",
    "gauss_legendre_rule",
    "get_basis",
    "legendre_eval",
    "scaling_eval",
    "scaling_table",
]


def legendre_eval(i, x):
    """Evaluate the Legendre polynomial P_i at x by the three-term recurrence."""
    x = np.asarray(x, dtype=float)
    if i == 0:
        out = np.ones_like(x)
    elif i == 1:
        out = x.copy()
    else:
        p_prev, p = np.ones_like(x), x
        for n in range(2, i + 1):
            p_prev, p = p, ((2 * n - 1) * x * p - (n - 1) * p_prev) / n
        out = p
    return float(out) if out.ndim == 0 else out


def _legendre_all(k, x):
    """Rows P_0..P_{k-1} evaluated at x (shape (k, *x.shape))."""
    x = np.asarray(x, dtype=float)
    out = np.empty((k,) + x.shape)
    out[0] = 1.0
    if k > 1:
        out[1] = x
    for n in range(2, k):
        out[n] = ((2 * n - 1) * x * out[n - 1] - (n - 1) * out[n - 2]) / n
    return out


def scaling_table(k, x):
    """phi_i(x) for i < k without the support cut-off (polynomial extension)."""
    x = np.asarray(x, dtype=float)
    norms = np.sqrt(2.0 * np.arange(k) + 1.0).reshape((k,) + (1,) * x.ndim)
    return norms * _legendre_all(k, 2.0 * x - 1.0)


def scaling_eval(i, x):
    """Mother scaling function sqrt(2i+1) P_i(2x-1) on (0, 1), zero elsewhere."""
    x = np.asarray(x, dtype=float)
    inside = (x > 0.0) & (x < 1.0)
    val = np.where(inside, math.sqrt(2 * i + 1) * np.asarray(legendre_eval(i, 2.0 * x - 1.0)), 0.0)
    return float(val) if val.ndim == 0 else val


@lru_cache(maxsize=None)
def _gauss_legendre_cached(k):
    z, w = np.polynomial.legendre.leggauss(k)
    x = 0.5 * (z + 1.0)
    wt = 0.5 * w
    x.setflags(write=False)
    wt.setflags(write=False)
    return x, wt


def gauss_legendre_rule(k):
    """k-point Gauss-Legendre nodes and weights on [0, 1]."""
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= MAX_QUAD_ORDER:
        raise ValueError(f"quadrature order must be an integer in [1, {MAX_QUAD_ORDER}], got {k!r}")
    return _gauss_legendre_cached(int(k))


@dataclass(frozen=True)
class TwoScaleFilters:
    """Two-scale matrices mapping [left child | right child] to [scaling | wavelet].

    ``h0``/``h1`` produce parent scaling coefficients from the left/right child
    blocks, ``g0``/``g1`` produce the parent wavelet coefficients. The stacked
    matrix ``hg`` is orthogonal, so ``hg.T`` reverses the transform.
    """

    h0: np.ndarray
    h1: np.ndarray
    g0: np.ndarray
    g1: np.ndarray
    hg: np.ndarray = field(repr=False)

    @property
    def k(self):
        return self.h0.shape[0]


def _gram_schmidt_columns(a, start):
    """Orthonormalise columns start.. of ``a`` against all previous ones.

    Columns before ``start`` are assumed orthonormal already. Classical
    Gram-Schmidt applied twice per column.
    """
    q = a.copy()
    for j in range(start, q.shape[1]):
        v = q[:, j]
        for _ in range(2):
            v = v - q[:, :j] @ (q[:, :j].T @ v)
        nrm = np.linalg.norm(v)
        if nrm < 1e-10:
            raise ArithmeticError(f"moment vector {j} is linearly dependent")
        q[:, j] = v / nrm
    return q


def build_two_scale_filters(k):
    """Build the order-k multiwavelet filters.

    Scaling rows come from quadrature of Legendre products (exact). Wavelet
    rows are obtained by orthogonalising the child-space moments of the
    Legendre polynomials of degree k..2k-1 against lower degrees, so wavelet
    ``j`` has ``k + j`` vanishing moments.
    """
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= MAX_FILTER_ORDER:
        raise ValueError(f"filter order must be an integer in [1, {MAX_FILTER_ORDER}], got {k!r}")
    k = int(k)
    npt = (3 * k) // 2 + 1
    x, w = gauss_legendre_rule(npt)
    phi_child = scaling_table(k, x)  # phi_j(x_q)
    poly_left = scaling_table(2 * k, 0.5 * x)  # degree-p polynomial on the parent
    poly_right = scaling_table(2 * k, 0.5 * (x + 1.0))
    scale = 1.0 / math.sqrt(2.0)
    mom_left = scale * (poly_left * w) @ phi_child.T  # (2k, k)
    mom_right = scale * (poly_right * w) @ phi_child.T
    moments = np.hstack([mom_left, mom_right]).T  # columns indexed by degree p

    q = _gram_schmidt_columns(moments, start=k)
    hg = q.T.copy()
    for j in range(k, 2 * k):
        if hg[j] @ moments[:, j] > 0.0:
            hg[j] = -hg[j]

    resid = np.max(np.abs(hg @ hg.T - np.eye(2 * k)))
    if resid > 1e-10:
        raise ArithmeticError(f"two-scale matrix for k={k} not orthogonal (residual {resid:.2e})")
    hg.setflags(write=False)
    return TwoScaleFilters(
        h0=hg[:k, :k], h1=hg[:k, k:], g0=hg[k:, :k], g1=hg[k:, k:], hg=hg
    )


@dataclass(frozen=True)
class MultiwaveletBasis:
    """Order-k scaling basis with its quadrature rule and filters."""

    k: int
    quad_nodes: np.ndarray
    quad_weights: np.ndarray
    phi_at_nodes: np.ndarray
    filters: TwoScaleFilters

    @property
    def quad_phi_w(self):
        """phi_i(x_q) * w_q, the projection matrix from values to coefficients."""
        return self.phi_at_nodes * self.quad_weights

    def eval_phi(self, x):
        """Matrix phi_i(x_j) (k x len(x)) with x in [0, 1] (closed)."""
        return scaling_table(self.k, np.atleast_1d(x))


@lru_cache(maxsize=None)
def get_basis(k):
    """Shared immutable basis of order k."""
    x, w = gauss_legendre_rule(k)
    phi = scaling_table(k, x)
    phi.setflags(write=False)
    return MultiwaveletBasis(
        k=k, quad_nodes=x, quad_weights=w, phi_at_nodes=phi, filters=build_two_scale_filters(k)
    )
