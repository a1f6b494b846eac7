import math

import numpy as np
import pytest

from mra import (
    Harmonic,
    ProjectionParams,
    ScfState,
    SmoothedCoulomb,
    SolverBreakdown,
    UserCallable,
    apply,
    energy_update,
    gaxpy,
    inner,
    multiply,
    norm2,
    project,
    scale,
    scf_step,
    solve_ground_state,
)
from mra.solvers import KernelCache, convergence_tolerance

from conftest import HYDROGEN_REFERENCE

EPS = 1e-5
BOX = (-3.0, 3.0)


def _normalized(func, k=8, eps=EPS, domain=BOX):
    f = project(func, ProjectionParams(k=k, eps=eps), domain, dim=3, vectorized=True)
    return scale(1.0 / norm2(f), f)


def test_harmonic_values():
    V = Harmonic(omega=2.0, offset=1.0)
    np.testing.assert_allclose(V(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])), [1.0, -1.0])
    assert V.exact_energy() == 2.0


def test_smoothed_coulomb_is_regular():
    a = 1e-3
    V = SmoothedCoulomb(smoothing_length=a)
    at0 = V(np.zeros((1, 3)))[0]
    assert math.isfinite(at0) and at0 == pytest.approx(-2.0 / (a * math.sqrt(math.pi)), rel=1e-12)
    near = V(np.array([[1e-12, 0.0, 0.0]]))[0]
    assert near == pytest.approx(at0, rel=1e-9)
    far = V(np.array([[0.0, 3.0, 4.0]]))[0]
    assert far == pytest.approx(-0.2, rel=1e-14)
    with pytest.raises(ValueError):
        SmoothedCoulomb(smoothing_length=0.0)


def test_user_callable_forms():
    pts = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 1.0]])
    vec = UserCallable(lambda x: x[:, 2] * 2.0)
    one = UserCallable(lambda p: p[2] * 2.0, vectorized=False)
    np.testing.assert_array_equal(vec(pts), [6.0, 2.0])
    np.testing.assert_array_equal(one(pts), [6.0, 2.0])


def test_energy_update_identity_and_breakdown():
    psi = _normalized(lambda x: np.exp(-np.sum(x * x, axis=1)), k=6, eps=1e-4)
    v_psi = multiply(Harmonic(offset=5.0).project(ProjectionParams(k=6, eps=1e-4), psi.domain), psi)
    assert energy_update(psi, psi, v_psi) == 0.0
    with pytest.raises(SolverBreakdown):
        energy_update(psi, scale(0.0, psi), v_psi)


def test_exact_fixed_point():
    psi = _normalized(lambda x: np.exp(-0.5 * np.sum(x * x, axis=1)))
    nxt = scf_step(ScfState(psi=psi, energy=-3.5), Harmonic(offset=5.0), EPS)
    assert nxt.residual <= 5e-4
    assert abs(nxt.delta_e) <= 1e-4
    assert abs(norm2(nxt.psi) - 1.0) <= 1e-10
    assert nxt.iteration == 1 and len(nxt.history) == 1


def test_error_shrinks_from_perturbed_start():
    errors = []
    solve_ground_state(
        Harmonic(offset=5.0), lambda x: np.exp(-0.7 * np.sum(x * x, axis=1)), -3.0, EPS, 6,
        k=8, domain=BOX, callback=lambda s: errors.append(abs(s.energy + 3.5)),
    )
    assert len(errors) == 6
    assert all(b < a for a, b in zip(errors[1:], errors[2:]))


def test_zero_potential_breaks_down():
    zero = UserCallable(lambda x: np.zeros(len(x)), name="zero")
    state = solve_ground_state(zero, lambda x: np.exp(-np.sum(x * x, axis=1)), -1.0, 1e-4, 5, k=6, domain=BOX)
    assert state.failed and not state.converged
    assert "zero norm" in state.message


def test_step_rejects_non_negative_energy():
    psi = _normalized(lambda x: np.exp(-np.sum(x * x, axis=1)), k=6, eps=1e-4)
    with pytest.raises(SolverBreakdown):
        scf_step(ScfState(psi=psi, energy=0.0), Harmonic(), 1e-4)
    with pytest.raises(ValueError):
        scf_step(ScfState(psi=psi, energy=-1.0), Harmonic(), 0.0)


def test_repulsive_potential_breaks_down():
    # without the offset V >= 0 binds nothing below zero; the solver must say so
    guess = lambda x: np.exp(-np.sum(x * x, axis=1))
    state = solve_ground_state(Harmonic(), guess, -0.5, 1e-4, 10, k=6, domain=BOX)
    assert state.failed and not state.converged
    assert "binds no state" in state.message


def test_solver_argument_checks():
    guess = lambda x: np.exp(-np.sum(x * x, axis=1))
    with pytest.raises(ValueError):
        solve_ground_state(Harmonic(offset=5.0), guess, 0.5, EPS)
    with pytest.raises(ValueError):
        solve_ground_state(Harmonic(offset=5.0), guess, -1.0, EPS, 0)


def test_single_iteration_reports_failure():
    state = solve_ground_state(
        Harmonic(offset=5.0), lambda x: np.exp(-np.sum(x * x, axis=1)), -1.0, 1e-4, 1, k=6, domain=BOX
    )
    assert state.failed and not state.converged
    assert len(state.history) == 1
    assert "not converged" in state.message


def test_first_energy_step_points_down(harmonic_run):
    _, state = harmonic_run
    assert state.history[0]["delta_e"] < 0.0


def test_harmonic_converges(harmonic_run):
    V, state = harmonic_run
    assert state.converged and not state.failed
    assert abs(state.energy - V.exact_energy()) <= 1e-4
    assert state.iteration <= 25
    res_tol, e_tol = convergence_tolerance(EPS)
    assert state.residual < res_tol and abs(state.delta_e) < e_tol
    assert all(h["energy"] < 0 for h in state.history)


def test_normalization(harmonic_run):
    _, state = harmonic_run
    assert abs(norm2(state.psi) - 1.0) <= 1e-10


def test_virial(harmonic_run):
    _, state = harmonic_run
    psi = state.psi
    bare = Harmonic(offset=0.0).project(ProjectionParams(k=psi.k, eps=EPS), psi.domain)
    assert inner(psi, multiply(bare, psi)) == pytest.approx(0.75, abs=5e-3)


def test_greens_function_consistency(harmonic_run):
    V, state = harmonic_run
    psi = state.psi
    v_psi = multiply(V.project(ProjectionParams(k=psi.k, eps=EPS), psi.domain), psi)
    finest = float(np.min(psi.widths)) * 0.5 ** v_psi.max_level()
    G = KernelCache(0.1 * EPS, psi.domain).get(math.sqrt(-2.0 * state.energy), finest)
    gap = norm2(gaxpy(1.0, psi, 2.0, apply(G, v_psi)))
    assert gap <= 10.0 * convergence_tolerance(EPS)[0]


def test_deterministic_history():
    def run():
        return solve_ground_state(
            Harmonic(offset=5.0), lambda x: np.exp(-np.sum(x * x, axis=1)), -1.0, 1e-4, 3,
            k=6, domain=BOX, threads=1,
        ).history

    assert run() == run()


def test_odd_guess_stays_odd():
    state = solve_ground_state(
        Harmonic(offset=5.0), lambda x: x[:, 0] * np.exp(-0.5 * np.sum(x * x, axis=1)), -2.0, EPS, 25,
        k=8, domain=BOX,
    )
    assert abs(state.energy + 3.5) > 0.5
    if state.converged:
        assert abs(state.energy + 2.5) < 1e-3
    else:
        assert state.stagnated or state.failed


def test_kernel_cache_policy():
    cache = KernelCache(1e-6, [[-3.0, 3.0]] * 3)
    a = cache.get(1.0, 1e-2)
    assert cache.get(1.005, 1e-2) is a
    b = cache.get(1.02, 1e-2)
    assert b is not a and b.mu == 1.02
    c = cache.get(1.02, 1e-7)
    assert c is not b and c.r_lo <= 1e-7
    assert cache.fits == 3


def test_hydrogen(hydrogen_run):
    _, state = hydrogen_run
    assert state.converged
    assert abs(state.energy - HYDROGEN_REFERENCE) <= 1e-4
    assert abs(state.energy + 0.5) <= 5e-3
