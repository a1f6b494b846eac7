"""Gaussian-sum (separated) representations of radial kernels.

Both kernels are discretisations of

    e^{-mu r} / r = 2/sqrt(pi) * int exp(-r^2 e^{2s} - mu^2 e^{-2s} / 4 + s) ds

by the trapezoidal rule in ``s``; each node becomes one Gaussian term
``c * exp(-t r^2)``. ``mu = 0`` gives the Coulomb kernel 1/r.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "KERNEL_FORMAT",
    "SeparatedKernel",
    "fit_bsh",
    "fit_coulomb",
    "load_kernel",
    "step_for_precision",
]

KERNEL_FORMAT = "mra-kernel/1"

EPS_MIN = 1e-10
EPS_MAX = 1e-2


def step_for_precision(eps):
    """Initial trapezoid step in ``s`` for relative precision ``eps``."""
    return 1.0 / (0.2 + 0.47 * math.log10(1.0 / eps))


@dataclass(frozen=True)
class SeparatedKernel:
    """Kernel approximated as ``sum_mu c_mu exp(-t_mu r^2)``.

    Lengths are in user-domain units. ``kind`` is ``"coulomb"`` (1/r) or
    ``"bsh"`` (exp(-mu r) / (4 pi r)).
    """

    coeffs: np.ndarray
    exponents: np.ndarray
    eps: float
    r_lo: float
    r_hi: float
    kind: str = "coulomb"
    mu: float = 0.0
    step: float = field(default=float("nan"), compare=False)

    def __post_init__(self):
        c = np.ascontiguousarray(self.coeffs, dtype=float)
        t = np.ascontiguousarray(self.exponents, dtype=float)
        if c.shape != t.shape or c.ndim != 1:
            raise ValueError("coeffs and exponents must be 1-d arrays of equal length")
        if np.any(t <= 0):
            raise ValueError("Gaussian exponents must be positive")
        c.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "exponents", t)

    @property
    def terms(self):
        return list(zip(self.coeffs.tolist(), self.exponents.tolist()))

    @property
    def M(self):
        return len(self.coeffs)

    def __len__(self):
        return len(self.coeffs)

    def __call__(self, r):
        """Evaluate the Gaussian sum at distances ``r``."""
        r = np.asarray(r, dtype=float)
        r2 = (r * r)[..., None]
        return np.sum(self.coeffs * np.exp(-self.exponents * r2), axis=-1)

    def exact(self, r):
        """The radial kernel being approximated."""
        r = np.asarray(r, dtype=float)
        if self.kind == "coulomb":
            return 1.0 / r
        return np.exp(-self.mu * r) / (4.0 * math.pi * r)

    def relative_error(self, npts=1000, r_lo=None, r_hi=None):
        """Max relative error on a log grid, and where it occurs."""
        lo = self.r_lo if r_lo is None else r_lo
        hi = self.r_hi if r_hi is None else r_hi
        r = np.geomspace(lo, hi, npts)
        err = np.abs(self(r) / self.exact(r) - 1.0)
        i = int(np.argmax(err))
        return float(err[i]), float(r[i])

    def volume_integral(self, dim=3):
        """Integral of the Gaussian sum over R^dim."""
        return float(np.sum(self.coeffs * (math.pi / self.exponents) ** (dim / 2)))

    def decays_beyond(self, length):
        """True if the kernel is negligible (below eps relative to its value at r_lo) past ``length``."""
        if self.r_hi >= length:
            return True
        if self.kind != "bsh" or self.mu <= 0:
            return False
        return float(self(self.r_hi)) <= self.eps * float(self.exact(self.r_lo)) * self.r_lo

    def to_dict(self):
        return {
            "format": KERNEL_FORMAT,
            "kind": self.kind,
            "mu": self.mu,
            "eps": self.eps,
            "r_lo": self.r_lo,
            "r_hi": self.r_hi,
            "step": self.step,
            "terms": [[c, t] for c, t in self.terms],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != KERNEL_FORMAT:
            raise ValueError(f"unsupported kernel format {d.get('format')!r}")
        terms = np.asarray(d["terms"], dtype=float).reshape(-1, 2)
        return cls(
            coeffs=terms[:, 0],
            exponents=terms[:, 1],
            eps=float(d["eps"]),
            r_lo=float(d["r_lo"]),
            r_hi=float(d["r_hi"]),
            kind=d["kind"],
            mu=float(d.get("mu", 0.0)),
            step=float(d.get("step", float("nan"))),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def load_kernel(path):
    return SeparatedKernel.from_dict(json.loads(Path(path).read_text()))


def _check_range(eps, r_lo, r_hi):
    if not (EPS_MIN <= eps <= EPS_MAX):
        raise ValueError(f"eps must lie in [{EPS_MIN:g}, {EPS_MAX:g}], got {eps:g}")
    if not (0.0 < r_lo < r_hi) or not math.isfinite(r_hi):
        raise ValueError(f"need 0 < r_lo < r_hi < inf, got r_lo={r_lo!r}, r_hi={r_hi!r}")


def _fit(mu, eps, r_lo, r_hi, prefactor, step=None):
    # Trapezoid nodes in s; shrink the step until the dense-grid check passes.
    r_check = np.geomspace(r_lo, r_hi, 4000)
    target = np.exp(-mu * r_check) / r_check
    # Upper limit: the narrowest Gaussian must be negligible at r_lo.
    u2 = math.log(1.0 / eps) + 4.0
    s_hi = 0.5 * math.log(u2 / r_lo**2)
    # Lower limit: the truncated tail ~ r e^{s} must be far below eps at r_hi.
    s_lo = math.log(1e-2 * eps * math.sqrt(math.pi) / (2.0 * r_hi))
    if mu > 0:
        # exp(-mu^2 e^{-2s}/4) kills the tail once mu^2 e^{-2s} / 4 is large
        s_lo = max(s_lo, -0.5 * math.log(4.0 * (math.log(1.0 / eps) + 800.0) / mu**2))
    h = step_for_precision(eps) if step is None else step
    for _ in range(40):
        n = int(math.ceil((s_hi - s_lo) / h)) + 1
        s = s_hi - h * np.arange(n)
        c = (2.0 / math.sqrt(math.pi)) * h * np.exp(s - 0.25 * mu * mu * np.exp(-2.0 * s))
        t = np.exp(2.0 * s)
        contrib = c[:, None] * np.exp(-t[:, None] * r_check[None, :] ** 2) / target[None, :]
        keep = contrib.max(axis=1) > 1e-3 * eps / n
        idx = np.flatnonzero(keep)
        if idx.size == 0:
            raise ValueError("kernel fit produced no significant terms")
        sl = slice(idx[0], idx[-1] + 1)
        approx = contrib[sl].sum(axis=0)
        err = np.max(np.abs(approx - 1.0))
        if err <= 0.5 * eps:
            return prefactor * c[sl], t[sl], h
        if step is not None:
            break
        h *= 0.85
    raise ValueError(
        f"cannot reach relative precision {eps:g} on [{r_lo:g}, {r_hi:g}] (best {err:.3g})"
    )


def fit_coulomb(eps, r_lo, r_hi, step=None):
    """Gaussian-sum fit of 1/r with relative error ``eps`` on [r_lo, r_hi]."""
    _check_range(eps, r_lo, r_hi)
    c, t, h = _fit(0.0, eps, r_lo, r_hi, 1.0, step)
    return SeparatedKernel(c, t, eps=eps, r_lo=r_lo, r_hi=r_hi, kind="coulomb", mu=0.0, step=h)


def fit_bsh(mu, eps, r_lo, r_hi, step=None):
    """Gaussian-sum fit of exp(-mu r) / (4 pi r) with relative error ``eps``."""
    _check_range(eps, r_lo, r_hi)
    if not (math.isfinite(mu) and mu >= 0.0):
        raise ValueError(f"mu must be finite and non-negative, got {mu!r}")
    if mu * r_hi > 600.0:
        raise ValueError(f"mu * r_hi = {mu * r_hi:g} underflows; shrink r_hi")
    c, t, h = _fit(float(mu), eps, r_lo, r_hi, 1.0 / (4.0 * math.pi), step)
    return SeparatedKernel(c, t, eps=eps, r_lo=r_lo, r_hi=r_hi, kind="bsh", mu=float(mu), step=h)
