import math

import numpy as np
import pytest

from mra import (
    KernelRangeError,
    ProjectionParams,
    SeparatedKernel,
    apply,
    build_conv1d_block,
    compress,
    eval_point,
    eval_points,
    fit_coulomb,
    gaxpy,
    inner,
    project,
    scale,
)
from mra.basis import gauss_legendre_rule, get_basis, scaling_table
from mra.convolution import ApplyStats, block_sectors, default_threads, nonstandard_blocks
from mra.tree import NodeKey

from _helpers import gaussian, project_gaussian, random_tree

PI = math.pi


def _mother_functions(k, x):
    """[phi | psi] of the unit box at points x in [0, 1] (rows)."""
    hg = get_basis(k).filters.hg
    left = np.where(x < 0.5, 1.0, 0.0) * scaling_table(k, 2.0 * x) * math.sqrt(2.0)
    right = np.where(x >= 0.5, 1.0, 0.0) * scaling_table(k, 2.0 * x - 1.0) * math.sqrt(2.0)
    psi = hg[k:, :k] @ left + hg[k:, k:] @ right
    return np.vstack([scaling_table(k, x), psi])


def _brute_block(t, n, ell, k):
    """Block by dense piecewise Gauss-Legendre quadrature on both boxes."""
    x, w = gauss_legendre_rule(40)
    pieces = 8
    xs = np.concatenate([(x + j) / pieces for j in range(pieces)])
    ws = np.concatenate([w / pieces for _ in range(pieces)])
    f = _mother_functions(k, xs)
    h = 2.0**-n
    # target box ell, source box 0, both at level n: x - y = h (ell + u - v)
    d = h * (ell + xs[:, None] - xs[None, :])
    kern = np.exp(-t * d * d)
    return h * (f * ws) @ kern @ (f * ws).T


@pytest.mark.parametrize("t, n, ell", [(50.0, 1, 0), (50.0, 1, 1), (3000.0, 3, -1), (0.5, 0, 0), (0.8, 1, 2), (40.0, 2, 3)])
def test_block_matches_brute_quadrature(t, n, ell):
    k = 4
    R = build_conv1d_block((1.0, t), n, ell, k)
    ref = _brute_block(t, n, ell, k)
    assert np.max(np.abs(R - ref)) <= 1e-12 * max(1.0, np.max(np.abs(ref)))


@pytest.mark.parametrize("k", [4, 6])
def test_block_transpose_symmetry(k):
    for n, ell in [(0, 0), (2, 1), (3, 5)]:
        a = build_conv1d_block((1.0, 30.0), n, ell, k)
        b = build_conv1d_block((1.0, 30.0), n, -ell, k)
        np.testing.assert_allclose(a, b.T, atol=1e-15)


def test_narrow_gaussian_acts_like_delta():
    # mass leaking over the box faces is of relative size t^(-1/2), so the
    # off-diagonal sectors only drop below 1e-8 for t beyond ~1e18
    k, t, c = 6, 1e20, 2.0
    R = build_conv1d_block((c, t), 0, 0, k)
    ss, sw, ws, ww = block_sectors(R, k)
    lead = c * math.sqrt(PI / t)
    np.testing.assert_allclose(ss, lead * np.eye(k), atol=1e-8 * lead)
    assert np.linalg.norm(sw) < 1e-8 * lead
    assert np.linalg.norm(ws) < 1e-8 * lead
    assert np.linalg.norm(build_conv1d_block((c, t), 0, 1, k)) < 1e-8 * lead


def test_face_leakage_scales_as_inverse_root_t():
    k = 6
    rel = []
    for t in (1e12, 1e14, 1e16):
        _, sw, _, _ = block_sectors(build_conv1d_block((1.0, t), 0, 0, k), k)
        rel.append(np.linalg.norm(sw) / math.sqrt(PI / t))
    np.testing.assert_allclose(np.array(rel[:-1]) / np.array(rel[1:]), 10.0, rtol=1e-3)


def test_block_rejects_bad_exponent():
    with pytest.raises(ValueError):
        build_conv1d_block((1.0, 0.0), 0, 0, 4)


def _decay_slopes(k, level=5):
    K = fit_coulomb(1e-10, 1e-5, 4.0)
    ells = np.arange(2, 17)
    ww, sw = [], []
    for ell in ells:
        R = sum(build_conv1d_block(term, level, int(ell), k) for term in K.terms)
        _, s_w, _, w_w = block_sectors(R, k)
        ww.append(np.linalg.norm(w_w, 2))
        sw.append(np.linalg.norm(s_w, 2))
    x = np.log(ells)
    return np.polyfit(x, np.log(ww), 1)[0], np.polyfit(x, np.log(sw), 1)[0]


@pytest.mark.parametrize("k", [4, 6, 8])
def test_block_decay(k):
    ww, sw = _decay_slopes(k)
    assert ww <= -(2 * k + 1) + 0.5
    assert sw <= -(k + 1) + 0.5


def test_nonstandard_blocks_match_compressed_form():
    rng = np.random.default_rng(4)
    f = random_tree(rng, 2, 4, 4)
    c = compress(f)
    ns = nonstandard_blocks(f)
    root = NodeKey.root(2)
    for n, (keys, blocks) in ns.items():
        for key, b in zip(keys, blocks):
            w = b.copy()
            if key != root:
                w[:4, :4] = 0.0
            np.testing.assert_allclose(w, c.nodes[key], atol=1e-12)


def _one_term(c, t, r_hi):
    return SeparatedKernel(np.array([c]), np.array([t]), eps=1e-12, r_lo=1e-9, r_hi=r_hi, kind="gaussian")


@pytest.mark.parametrize("dim", [1, 2])
def test_apply_single_gaussian_matches_analytic(dim):
    a, t = 1.0, 2.0
    f = project(gaussian((0.0,) * dim, a), ProjectionParams(k=8, eps=1e-8), (-7.0, 7.0), dim=dim, vectorized=True)
    out = apply(_one_term(1.0, t, 14.0 * math.sqrt(dim)), f)
    s = a + t
    rng = np.random.default_rng(dim)
    pts = rng.uniform(-3.0, 3.0, (30, dim))
    exact = (PI / s) ** (dim / 2) * np.exp(-a * t / s * np.sum(pts * pts, axis=1))
    assert np.max(np.abs(eval_points(out, pts) - exact)) < 1e-6


@pytest.fixture(scope="module")
def coulomb_case():
    g = project_gaussian()
    op = fit_coulomb(1e-6, 1e-4, math.sqrt(3.0) * 12.0)
    stats = ApplyStats()
    v = apply(op, g, stats=stats)
    return g, op, v, stats


def test_coulomb_potential_values(coulomb_case):
    g, op, v, stats = coulomb_case
    assert eval_point(v, [0.0, 0.0, 0.0]) == pytest.approx(2.0 * PI, abs=1e-3)
    far = eval_point(v, [5.0, 0.0, 0.0])
    assert far == pytest.approx(PI**1.5 / 5.0, rel=1e-3)
    assert stats.source_blocks > 0 and stats.contributions > 0


def test_coulomb_self_energy(coulomb_case):
    g, op, v, _ = coulomb_case
    assert inner(g, v) == pytest.approx(24.739429, rel=1e-4)


def test_apply_linear(coulomb_case):
    g, op, v, _ = coulomb_case
    h = project_gaussian(center=(0.7, -0.4, 0.2), alpha=2.0)
    alpha, beta = 0.6, -1.3
    lhs = apply(op, gaxpy(alpha, g, beta, h))
    rhs = gaxpy(alpha, v, beta, apply(op, h))
    diff = gaxpy(1.0, lhs, -1.0, rhs)
    assert math.sqrt(inner(diff, diff)) <= 10.0 * g.eps


def test_apply_symmetric(coulomb_case):
    g, op, v, _ = coulomb_case
    h = project_gaussian(center=(1.0, 0.5, -0.5), alpha=3.0)
    a = inner(h, v)
    b = inner(g, apply(op, h))
    assert abs(a - b) <= 10.0 * g.eps


def test_screening_is_sound(coulomb_case):
    g, op, v, stats = coulomb_case
    tight_stats = ApplyStats()
    tight = apply(op, g, screen=0.1, stats=tight_stats)
    assert tight_stats.contributions >= stats.contributions
    e0, e1 = inner(g, v), inner(g, tight)
    assert abs(e0 - e1) < g.eps * abs(e1)


def test_threads_give_same_result(coulomb_case):
    g, op, v, _ = coulomb_case
    w = apply(op, g, threads=3)
    assert w.nodes.keys() == v.nodes.keys()
    assert all(np.array_equal(w.nodes[key], v.nodes[key]) for key in v.nodes)


def test_zero_source_gives_zero():
    g = project_gaussian(k=4, eps=1e-3)
    zero = scale(0.0, g)
    out = apply(fit_coulomb(1e-4, 1e-4, 21.0), zero)
    assert math.sqrt(inner(out, out)) == 0.0


def test_kernel_range_checks():
    g = project_gaussian(k=4, eps=1e-3)
    with pytest.raises(KernelRangeError):
        apply(fit_coulomb(1e-4, 1e-4, 2.0), g)
    with pytest.raises(KernelRangeError):
        apply(fit_coulomb(1e-4, 1.0, 30.0), g)


def test_thread_env(monkeypatch):
    monkeypatch.setenv("MRA_NUM_THREADS", "4")
    assert default_threads() == 4
    monkeypatch.setenv("MRA_NUM_THREADS", "zero")
    with pytest.raises(ValueError):
        default_threads()
    monkeypatch.delenv("MRA_NUM_THREADS")
    assert default_threads() == 1
