"""Lowest bound state of -1/2 lap psi + V psi = E psi by Green's-function iteration.

Each step forms ``psi <- -2 G_mu (V psi)`` with the bound-state Helmholtz
kernel ``G_mu = exp(-mu r) / (4 pi r)``, ``mu = sqrt(-2 E)``, and corrects the
energy by a first-order increment. No derivative of psi is ever taken.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .convolution import apply
from .funcops import ProjectionParams, gaxpy, inner, multiply, norm2, project, scale
from .kernels import EPS_MAX, EPS_MIN, fit_bsh
from .tree import MRAFunction

__all__ = [
    "Harmonic",
    "KernelCache",
    "PotentialSpec",
    "ScfState",
    "SmoothedCoulomb",
    "SolverBreakdown",
    "UserCallable",
    "convergence_tolerance",
    "energy_update",
    "scf_step",
    "solve_ground_state",
]

# relative change of mu that triggers a new kernel fit
REFIT_TOLERANCE = 0.01
# tighter tolerance applied once the iteration has settled: a kernel at the
# wrong energy shifts the fixed point, and E by a second-order amount
FINAL_REFIT_TOLERANCE = 1e-3
# kernel fit range starts this far below the finest box
R_LO_FRACTION = 1e-4
# consecutive residual increases that count as stagnation
STAGNATION_STEPS = 3


class SolverBreakdown(RuntimeError):
    """The iteration left the bound-state regime or produced a zero function."""


class PotentialSpec:
    """A potential V(x) in user coordinates; call with an (N, dim) array."""

    kind = "user"

    def __call__(self, points):
        raise NotImplementedError

    def describe(self):
        return {"kind": self.kind}

    def project(self, params, domain):
        return project(self, params, domain, vectorized=True)


@dataclass(frozen=True)
class Harmonic(PotentialSpec):
    """V = omega^2 |x|^2 / 2 - offset; ground state 3 omega / 2 - offset in 3D."""

    omega: float = 1.0
    offset: float = 0.0
    kind = "harmonic"

    def __call__(self, points):
        x = np.asarray(points, dtype=float)
        return 0.5 * self.omega**2 * np.sum(x * x, axis=-1) - self.offset

    def exact_energy(self, dim=3):
        return 0.5 * dim * self.omega - self.offset

    def describe(self):
        return {"kind": self.kind, "omega": self.omega, "offset": self.offset}


@dataclass(frozen=True)
class SmoothedCoulomb(PotentialSpec):
    """V = -charge * erf(r / a) / r, finite (-2 charge / (a sqrt(pi))) at r = 0."""

    charge: float = 1.0
    smoothing_length: float = 1e-3
    center: tuple = (0.0, 0.0, 0.0)
    kind = "smoothed_coulomb"

    def __post_init__(self):
        if not self.smoothing_length > 0:
            raise ValueError("smoothing_length must be positive")

    def __call__(self, points):
        x = np.asarray(points, dtype=float) - np.asarray(self.center, dtype=float)
        r = np.sqrt(np.sum(x * x, axis=-1))
        a = self.smoothing_length
        small = r < 1e-8 * a
        safe = np.where(small, 1.0, r)
        out = erf(safe / a) / safe
        # series erf(z)/z ~ 2/sqrt(pi) (1 - z^2/3) near the centre
        out = np.where(small, 2.0 / (a * math.sqrt(math.pi)), out)
        return -self.charge * out

    def describe(self):
        return {
            "kind": self.kind,
            "charge": self.charge,
            "smoothing_length": self.smoothing_length,
            "center": list(self.center),
        }


@dataclass(frozen=True)
class UserCallable(PotentialSpec):
    """Wrap an arbitrary callable; ``vectorized`` as for :func:`project`."""

    func: object = None
    vectorized: bool = True
    name: str = "user"
    kind = "user"

    def __call__(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.vectorized:
            return np.asarray(self.func(pts), dtype=float).reshape(len(pts))
        return np.array([float(self.func(p)) for p in pts])

    def describe(self):
        return {"kind": self.kind, "name": self.name}


@dataclass
class ScfState:
    psi: MRAFunction
    energy: float
    residual: float = math.inf
    iteration: int = 0
    delta_e: float = math.inf
    converged: bool = False
    failed: bool = False
    stagnated: bool = False
    message: str = ""
    history: list = field(default_factory=list)

    def record(self):
        return {
            "iteration": self.iteration,
            "energy": self.energy,
            "delta_e": self.delta_e,
            "residual": self.residual,
            "nodes": len(self.psi.nodes),
        }


class KernelCache:
    """BSH kernel fits reused until mu drifts by more than ``tolerance``.

    A refit also happens when the source function has boxes finer than the
    current fit resolves.
    """

    def __init__(self, eps, domain, tolerance=REFIT_TOLERANCE):
        self.eps = min(max(eps, EPS_MIN), EPS_MAX)
        self.tolerance = tolerance
        dom = np.asarray(domain, dtype=float)
        self.diameter = float(np.sqrt(np.sum((dom[:, 1] - dom[:, 0]) ** 2)))
        self.kernel = None
        self.fits = 0

    def _r_hi(self, mu, r_lo):
        # past this distance exp(-mu r) / r is far below eps; never beyond the domain
        r = (math.log(1.0 / self.eps) + 5.0) / mu
        while math.exp(-mu * r) / r > self.eps * math.exp(-mu * r_lo):
            r *= 1.2
        return max(min(r, self.diameter), 8.0 * r_lo)

    def get(self, mu, finest):
        k = self.kernel
        stale = (
            k is None
            or abs(mu - k.mu) > self.tolerance * k.mu
            or k.r_lo > finest
        )
        if stale:
            # the Gaussian sum saturates below r_lo; the lost part scales as r_lo^2
            r_lo = finest * R_LO_FRACTION
            if k is not None and abs(mu - k.mu) <= self.tolerance * k.mu:
                mu = k.mu
            self.kernel = fit_bsh(mu, self.eps, r_lo, self._r_hi(mu, r_lo))
            self.fits += 1
        return self.kernel


def convergence_tolerance(eps):
    """(residual tolerance, energy-increment tolerance)."""
    return max(10.0 * eps, 1e-6), 10.0 * eps


def energy_update(psi_old, psi_new_unnormalized, v_psi_old):
    """First-order energy increment <V psi_old, psi_new - psi_old> / |psi_new|^2."""
    nn = norm2(psi_new_unnormalized)
    if not nn > 0 or not math.isfinite(nn):
        raise SolverBreakdown("new wavefunction has zero norm; the potential binds no state")
    diff = gaxpy(1.0, psi_new_unnormalized, -1.0, psi_old)
    return inner(v_psi_old, diff) / (nn * nn)


def _finest_box(f):
    return float(np.min(f.widths)) * 0.5 ** f.max_level()


def scf_step(state, V, eps, *, v_func=None, kernels=None, threads=None):
    """One Green's-function iteration; returns the next state.

    ``V`` is a potential object or an already projected potential; pass
    ``v_func`` to reuse a projection across steps.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    psi = state.psi
    E = state.energy
    if not E < 0:
        raise SolverBreakdown(f"energy {E:g} is not negative; no bound-state kernel exists")
    if v_func is None:
        if isinstance(V, MRAFunction):
            v_func = V
        else:
            v_func = V.project(ProjectionParams(k=psi.k, eps=eps), psi.domain)
    if kernels is None:
        kernels = KernelCache(0.1 * eps, psi.domain)

    v_psi = multiply(v_func, psi)
    mu = math.sqrt(-2.0 * E)
    try:
        G = kernels.get(mu, _finest_box(v_psi))
    except ValueError as exc:
        raise SolverBreakdown(f"no Green's-function fit at E = {E:g}: {exc}") from None
    trial = scale(-2.0, apply(G, v_psi, threads=threads))
    # a reused kernel inverts (T - E_g) at its own energy, so the increment
    # is relative to E_g rather than to the current estimate
    E_g = -0.5 * G.mu * G.mu
    dE = energy_update(psi, trial, v_psi)
    if not inner(psi, trial) > 0:
        # a repulsive potential flips the sign of the iterate and E runs away downwards
        raise SolverBreakdown(
            f"iterate {state.iteration + 1} is anti-aligned with the previous one at E = {E:g}; "
            "the potential binds no state here (offset the potential or change E0)"
        )
    E_new = E_g + dE
    if not E_new < 0:
        raise SolverBreakdown(
            f"energy update drove E to {E_new:g} >= 0 at iteration {state.iteration + 1}; "
            "start from a lower E0 or offset the potential"
        )
    psi_new = scale(1.0 / norm2(trial), trial)
    residual = norm2(gaxpy(1.0, psi_new, -1.0, psi))
    nxt = ScfState(
        psi=psi_new,
        energy=E_new,
        residual=residual,
        iteration=state.iteration + 1,
        delta_e=E_new - E,
        history=list(state.history),
    )
    nxt.history.append(nxt.record())
    return nxt


def _stagnating(history):
    res = [h["residual"] for h in history[-(STAGNATION_STEPS + 1):]]
    if len(res) <= STAGNATION_STEPS:
        return False
    return all(b > a for a, b in zip(res, res[1:]))


def solve_ground_state(
    V,
    guess,
    E0,
    eps,
    max_iter=30,
    *,
    k=8,
    domain=(-6.0, 6.0),
    dim=3,
    vectorized=True,
    threads=None,
    callback=None,
):
    """Iterate :func:`scf_step` from an analytic guess until converged.

    Returns the final state. Non-convergence, stagnation and breakdown are
    reported through ``failed`` / ``stagnated`` / ``message`` rather than
    raised, so the history is always available.
    """
    if not E0 < 0:
        raise ValueError(f"E0 must be negative, got {E0!r}")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    params = ProjectionParams(k=k, eps=eps)
    if isinstance(guess, MRAFunction):
        psi = guess
    else:
        psi = project(guess, params, domain, dim=dim, vectorized=vectorized)
    nrm = norm2(psi)
    if not nrm > 0:
        raise ValueError("initial guess has zero norm")
    psi = scale(1.0 / nrm, psi)
    v_func = V if isinstance(V, MRAFunction) else V.project(params, psi.domain)
    kernels = KernelCache(0.1 * eps, psi.domain)
    res_tol, e_tol = convergence_tolerance(eps)

    state = ScfState(psi=psi, energy=float(E0))
    while state.iteration < max_iter:
        try:
            state = scf_step(state, V, eps, v_func=v_func, kernels=kernels, threads=threads)
        except SolverBreakdown as exc:
            state.failed = True
            state.message = str(exc)
            return state
        if callback is not None:
            callback(state)
        if state.residual < res_tol and abs(state.delta_e) < e_tol:
            mu = math.sqrt(-2.0 * state.energy)
            if abs(mu - kernels.kernel.mu) > FINAL_REFIT_TOLERANCE * kernels.kernel.mu:
                # settle once more with a kernel fitted at the current energy
                kernels.tolerance = FINAL_REFIT_TOLERANCE
                continue
            state.converged = True
            state.message = f"converged in {state.iteration} iterations"
            return state
        if _stagnating(state.history):
            state.failed = True
            state.stagnated = True
            state.message = (
                f"residual grew for {STAGNATION_STEPS} consecutive steps "
                f"(now {state.residual:.3g}); iteration stagnated"
            )
            return state
    state.failed = True
    state.message = (
        f"not converged after {max_iter} iterations "
        f"(residual {state.residual:.3g}, last dE {state.delta_e:.3g})"
    )
    return state
