"""One-dimensional non-standard-form blocks of Gaussian convolution kernels.

For a Gaussian ``exp(-t x^2)`` on the unit cube, the block at level ``n`` and
box displacement ``ell`` is the 2k x 2k matrix of the kernel between the
[scaling | wavelet] functions of two boxes::

    R[a, b] = int int chi^n_{l+ell, a}(x) exp(-t (x - y)^2) chi^n_{l, b}(y) dx dy

Its leading k x k corner is the scaling-scaling block r^n_ell. Blocks depend
only on ``ell`` (Toeplitz).

Two evaluation routes are used. Narrow Gaussians go through the
auto-correlation of the scaling functions on level n+1 followed by the
two-scale filters. Wide Gaussians (``t / 4^n <= 1``) use a Taylor expansion
of the kernel about the box displacement in which the vanishing moments of
the wavelets drop out exactly; this avoids the cancellation that otherwise
hides the tiny wavelet-wavelet entries below round-off.
"""

from __future__ import annotations

import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .basis import gauss_legendre_rule, get_basis, scaling_table
from .tree import (
    RECONSTRUCTED,
    NodeKey,
    corner,
    gather_children,
    reconstruct,
    scatter_children,
    transform,
    truncate,
)

__all__ = [
    "ApplyStats",
    "GaussianBlocks",
    "KernelRangeError",
    "apply",
    "block_sectors",
    "build_conv1d_block",
    "default_threads",
    "nonstandard_blocks",
]

THREADS_ENV = "MRA_NUM_THREADS"

# Taylor route is used when the level-scaled exponent is at most this.
TAYLOR_MAX_TAU = 1.0
# log of the smallest Gaussian factor worth integrating
_LOG_TINY = 745.0


@lru_cache(maxsize=None)
def _correlation_coeffs(k):
    """Legendre coefficients of the scaling auto-correlation on [0,1] and [-1,0].

    Returns ``(a_pos, a_neg)`` of shape (k, k, 2k) such that, for w in [0, 1],
    ``int phi_i(w + y) phi_j(y) dy = sum_p a_pos[i, j, p] phihat_p(w)`` and
    ``int phi_i(w - 1 + y) phi_j(y) dy = sum_p a_neg[i, j, p] phihat_p(w)``.
    """
    m = 2 * k
    zq, wq = gauss_legendre_rule(m)
    yq, wy = gauss_legendre_rule(k + 1)
    a_pos = np.empty((k, k, m))
    a_neg = np.empty((k, k, m))
    poly = scaling_table(m, zq)  # (2k, nq)

    # positive piece: z in [0,1], eta in [0, 1-z]
    span = 1.0 - zq
    eta = yq[None, :] * span[:, None]
    fi = scaling_table(k, zq[:, None] + eta)  # (k, nz, ny)
    fj = scaling_table(k, eta)
    phi_pos = np.einsum("izy,jzy,y,z->ijz", fi, fj, wy, span)
    # negative piece: z = w - 1, eta in [1-w, 1]
    span = zq.copy()
    eta = 1.0 - zq[:, None] + yq[None, :] * span[:, None]
    fi = scaling_table(k, (zq - 1.0)[:, None] + eta)
    fj = scaling_table(k, eta)
    phi_neg = np.einsum("izy,jzy,y,z->ijz", fi, fj, wy, span)

    a_pos[:] = np.einsum("ijz,pz,z->ijp", phi_pos, poly, wq)
    a_neg[:] = np.einsum("ijz,pz,z->ijp", phi_neg, poly, wq)
    return a_pos, a_neg


def _gauss_poly_integrals(tau, a, npoly, npt):
    """int_0^1 exp(-tau (a + w)^2) phihat_p(w) dw for p < npoly."""
    center = min(max(-a, 0.0), 1.0)
    dist = abs(-a - center)
    if tau * dist * dist > _LOG_TINY:
        return np.zeros(npoly)
    slope = 2.0 * tau * dist
    scale = 1.0 / math.sqrt(tau)
    if slope > 0.0:
        scale = min(scale, 1.0 / slope)
    # beyond ``cut`` from ``center`` the integrand has dropped by e^-80
    cut = math.sqrt(dist * dist + 80.0 / tau) - dist
    lo, hi = max(0.0, center - cut), min(1.0, center + cut)
    edges = {lo, hi, center}
    d = 0.25 * scale
    while d < cut:
        edges.update(p for p in (center - d, center + d) if lo < p < hi)
        d *= 2.0
    if scale >= 0.5:
        edges.update(np.linspace(lo, hi, 3).tolist())
    edges = np.array(sorted(edges))
    edges = edges[np.concatenate([[True], np.diff(edges) > 0])]
    x, w = gauss_legendre_rule(npt)
    width = np.diff(edges)[:, None]
    pts = (edges[:-1, None] + width * x[None, :]).ravel()
    wts = (width * w[None, :]).ravel()
    vals = np.exp(-tau * (a + pts) ** 2) * wts
    return scaling_table(npoly, pts) @ vals


@lru_cache(maxsize=None)
def _taylor_tables(k):
    """Centered moments of [phi | psi] and the per-order bilinear moment tensors."""
    basis = get_basis(k)
    hg = basis.filters.hg
    mmax = min(2 * k + 64, 2 * (60 - 1) - k)
    npt = min(60, (mmax + k) // 2 + 1)
    x, w = gauss_legendre_rule(npt)
    phi = scaling_table(k, x)  # mother functions on their own unit
    pw = np.arange(mmax + 1)
    # scaling functions: (x - 1/2)^a
    mom_phi = (phi * w) @ ((x - 0.5)[:, None] ** pw)
    # children halves seen from the parent: left y/2 - 1/2, right y/2
    left = (phi * w) @ ((0.5 * x - 0.5)[:, None] ** pw) * (math.sqrt(2.0) * 0.5)
    right = (phi * w) @ ((0.5 * x)[:, None] ** pw) * (math.sqrt(2.0) * 0.5)
    mom_psi = hg[k:, :k] @ left + hg[k:, k:] @ right
    mom_psi[:, :k] = 0.0  # vanishing moments, exactly
    mom = np.vstack([mom_phi, mom_psi])  # (2k, mmax+1)

    sgn = (-1.0) ** pw
    tens = np.zeros((mmax + 1, 2 * k, 2 * k))
    for m in range(mmax + 1):
        a = np.arange(m + 1)
        binom = np.array([math.comb(m, int(i)) for i in a], dtype=float)
        coef = binom * sgn[m - a]
        tens[m] = (mom[:, a] * coef) @ mom[:, m - a].T
    return tens


@lru_cache(maxsize=None)
def _taylor_bounds(k):
    """Per-order spectral norms of the moment tensors, split into (ss, rest),
    times the largest magnitude of the order-m Taylor factor at unit tau."""
    tens = _taylor_tables(k)
    mmax = tens.shape[0] - 1
    # h_m(y) = H_m(y) exp(-y^2) / m!; its sup bounds |T_m| / tau^(m/2)
    y = np.linspace(-(math.sqrt(2.0 * mmax) + 6.0), math.sqrt(2.0 * mmax) + 6.0, 20001)
    h = np.empty((mmax + 1, y.size))
    h[0] = np.exp(-y * y)
    if mmax >= 1:
        h[1] = 2.0 * y * h[0]
    for m in range(1, mmax):
        h[m + 1] = (2.0 * y * h[m] - 2.0 * h[m - 1]) / (m + 1)
    sup = 1.05 * np.max(np.abs(h), axis=1)
    ss = np.array([np.linalg.norm(t[:k, :k], 2) for t in tens])
    rest = np.array([np.linalg.norm(t - np.pad(t[:k, :k], ((0, k), (0, k))), 2) for t in tens])
    return sup * ss, sup * rest


def _taylor_block(tau, ell, k):
    tens = _taylor_tables(k)
    mmax = tens.shape[0] - 1
    x = float(ell)
    t = np.empty(mmax + 1)
    t[0] = math.exp(-tau * x * x)
    if mmax >= 1:
        t[1] = -2.0 * tau * x * t[0]
    for m in range(1, mmax):
        t[m + 1] = -2.0 * tau * (x * t[m] + t[m - 1]) / (m + 1)
    return np.tensordot(t, tens, axes=1)


class GaussianBlocks:
    """Cached non-standard blocks for ``exp(-t x^2)`` on the unit interval.

    ``t`` is the exponent in unit-cube coordinates. Blocks carry no
    expansion coefficient.
    """

    def __init__(self, t, k):
        self.t = float(t)
        self.k = int(k)
        self._hg = get_basis(self.k).filters.hg
        self._r = {}
        self._R = {}
        self._norms = {}
        self._max = {}
        self._lock = threading.Lock()

    def rnl(self, n, ell):
        """Scaling-scaling block r^n_ell (k x k)."""
        key = (n, ell)
        out = self._r.get(key)
        if out is None:
            k = self.k
            tau = self.t / 4.0**n
            npt = min(60, 2 * k + 12)
            a_pos, a_neg = _correlation_coeffs(k)
            g_pos = _gauss_poly_integrals(tau, float(ell), 2 * k, npt)
            g_neg = _gauss_poly_integrals(tau, float(ell) - 1.0, 2 * k, npt)
            out = (a_pos @ g_pos + a_neg @ g_neg) * 2.0**-n
            out.setflags(write=False)
            with self._lock:
                out = self._r.setdefault(key, out)
        return out

    def block(self, n, ell):
        """Full 2k x 2k block over [scaling | wavelet] sectors at level n."""
        key = (n, ell)
        out = self._R.get(key)
        if out is None:
            k = self.k
            tau = self.t / 4.0**n
            if tau * max(abs(ell) - 1, 0) ** 2 > _LOG_TINY:
                out = np.zeros((2 * k, 2 * k))
            elif tau <= TAYLOR_MAX_TAU:
                out = _taylor_block(tau, ell, k) * 2.0**-n
            else:
                r0 = self.rnl(n + 1, 2 * ell)
                rm = self.rnl(n + 1, 2 * ell - 1)
                rp = self.rnl(n + 1, 2 * ell + 1)
                full = np.block([[r0, rm], [rp, r0]])
                out = self._hg @ full @ self._hg.T
            out.setflags(write=False)
            with self._lock:
                out = self._R.setdefault(key, out)
        return out

    def max_norms(self, n):
        """Upper bounds on (ss norm, rest norm) over all displacements at level n."""
        out = self._max.get(n)
        if out is None:
            k = self.k
            tau = self.t / 4.0**n
            if tau <= TAYLOR_MAX_TAU:
                ss_m, rest_m = _taylor_bounds(k)
                powers = tau ** (0.5 * np.arange(len(ss_m)))
                out = (float(powers @ ss_m) * 2.0**-n, float(powers @ rest_m) * 2.0**-n)
            else:
                # narrow kernel: beyond this displacement everything is below e^-40
                reach = min((1 << n) - 1, int(math.ceil(1.0 + math.sqrt(40.0 / tau))))
                vals = np.array([self.norms(n, ell) for ell in range(0, reach + 1)])
                out = (float(vals[:, 0].max()), float(vals[:, 1].max()))
            with self._lock:
                out = self._max.setdefault(n, out)
        return out

    def norms(self, n, ell):
        """(norm of the scaling-scaling corner, norm of the remainder)."""
        key = (n, ell)
        out = self._norms.get(key)
        if out is None:
            R = self.block(n, ell)
            k = self.k
            ss = np.linalg.norm(R[:k, :k], 2)
            rest = R.copy()
            rest[:k, :k] = 0.0
            out = (float(ss), float(np.linalg.norm(rest, 2)))
            with self._lock:
                out = self._norms.setdefault(key, out)
        return out


@lru_cache(maxsize=4096)
def _blocks_for(t, k):
    return GaussianBlocks(t, k)


def build_conv1d_block(term, n, ell, k):
    """2k x 2k non-standard block of ``c * exp(-t x^2)`` at level n, displacement ell.

    ``term = (c, t)`` with ``t`` in unit-interval coordinates.
    """
    c, t = term
    if t <= 0:
        raise ValueError("Gaussian exponent must be positive")
    return c * _blocks_for(float(t), int(k)).block(int(n), int(ell))


def block_sectors(R, k):
    """Split a 2k x 2k block into (ss, sw, ws, ww) sectors."""
    return R[:k, :k], R[:k, k:], R[k:, :k], R[k:, k:]


class KernelRangeError(ValueError):
    """The kernel fit does not cover the length scales of the function."""


def default_threads():
    """Worker count from the MRA_NUM_THREADS environment variable (default 1)."""
    raw = os.environ.get(THREADS_ENV, "1").strip()
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


@dataclass
class ApplyStats:
    """Work counters from one operator application."""

    source_blocks: int = 0
    contributions: int = 0
    screened_threshold: float = 0.0


def nonstandard_blocks(f):
    """Per-level [scaling | wavelet] blocks of every interior node of ``f``.

    Unlike the compressed form the scaling corner is kept at every level.
    A single-leaf tree is split once so that the root is always interior.
    Returns ``{n: (keys, blocks)}`` with ``blocks`` of shape (N, (2k)^d).
    """
    f = reconstruct(f) if f.is_compressed else f
    d, k = f.dim, f.k
    hg = f.basis.filters.hg
    nodes = dict(f.nodes)
    root = NodeKey.root(d)
    if root in nodes:
        big = np.zeros((1,) + (2 * k,) * d)
        big[corner(d, k)] = nodes.pop(root)
        kids = scatter_children(transform(big, np.ascontiguousarray(hg.T)), d, k)
        for j, ch in enumerate(root.children()):
            nodes[ch] = kids[0, j]

    by_level = {}
    for key in nodes:
        p = key.parent()
        by_level.setdefault(p.n, set()).add(p)
    for n in range(max(by_level), 0, -1):
        if n in by_level:
            by_level.setdefault(n - 1, set()).update(p.parent() for p in by_level[n])

    c = corner(d, k)
    out = {}
    for n in sorted(by_level, reverse=True):
        parents = sorted(by_level[n])
        kids = np.stack([np.stack([nodes.pop(ch) for ch in p.children()]) for p in parents])
        big = transform(gather_children(kids, d, k), hg)
        for i, p in enumerate(parents):
            nodes[p] = big[i][c[1:]]
        out[n] = (parents, big)
    return out


def _term_window(axis_blocks, coeff, n, reach, cutoff):
    """Displacements per axis where the term can still contribute above ``cutoff``.

    ``cutoff`` already includes the largest source norm. The bound
    prod(a + b) - prod(a) (or prod(a + b) at level 0) grows in every
    sector norm, so with the other axes at their largest norms an axis
    value ``ell`` matters only if ``b(ell) P1 + a(ell) P2`` reaches the
    cutoff. Each axis is scanned outward until two consecutive misses.
    Returns None when the term is negligible at this level.
    """
    d = len(axis_blocks)
    maxes = [b.max_norms(n) for b in axis_blocks]
    A = [m[0] for m in maxes]
    AB = [m[0] + m[1] for m in maxes]
    top = math.prod(AB) - (math.prod(A) if n > 0 else 0.0)
    if abs(coeff) * top < cutoff:
        return None
    wins = []
    for i, b in enumerate(axis_blocks):
        p1 = abs(coeff) * math.prod(AB[:i] + AB[i + 1:])
        p2 = p1 - abs(coeff) * math.prod(A[:i] + A[i + 1:]) if n > 0 else p1
        ells = []
        misses = 0
        ell = 0
        while ell <= reach and misses < 2:
            ss, rest = b.norms(n, ell)
            if rest * p1 + ss * p2 < cutoff:
                misses += 1
            else:
                misses = 0
                ells += [ell, -ell] if ell else [0]
            ell += 1
        if not ells:
            return None
        wins.append(np.array(sorted(ells)))
    return wins


def _term_displacements(axis_blocks, coeff, n, wins, cutoff):
    """All displacement vectors with their norm bound at or above ``cutoff``."""
    d = len(axis_blocks)
    a = np.ones(())
    ab = np.ones(())
    for i, b in enumerate(axis_blocks):
        norms = np.array([b.norms(n, int(e)) for e in wins[i]])
        shape = [1] * d
        shape[i] = len(wins[i])
        a = a * norms[:, 0].reshape(shape)
        ab = ab * (norms[:, 0] + norms[:, 1]).reshape(shape)
    bound = abs(coeff) * (ab - a if n > 0 else ab)
    idx = np.nonzero(bound >= cutoff)
    ells = np.stack([wins[i][idx[i]] for i in range(d)], axis=1)
    return ells, bound[idx]


def _contract_trie(x, items, mats, axis=0):
    """Apply per-axis matrices for many displacement vectors, sharing prefixes.

    ``items`` holds (ell, count) pairs; rows of ``x`` are sorted so each
    displacement only needs its first ``count`` rows. Yields (ell, result).
    """
    groups = {}
    for ell, cnt in items:
        groups.setdefault(ell[axis], []).append((ell, cnt))
    last = axis == len(mats) - 1
    for v, group in groups.items():
        top = max(cnt for _, cnt in group)
        y = np.tensordot(x[:top], mats[axis](v), axes=([1], [1]))
        if last:
            for ell, cnt in group:
                yield ell, y[:cnt]
        else:
            yield from _contract_trie(y, group, mats, axis + 1)


def _apply_level_term(level, term_axes, coeff, ells, bounds, cutoff, acc, counter):
    n, keys, blocks, src_norms, src_l, codes, k = level
    d = src_l.shape[1]
    width = 1 << n
    # sources needed for each displacement: those with bound * norm >= cutoff
    counts = np.searchsorted(-src_norms, -cutoff / bounds, side="right")
    items = [(tuple(int(v) for v in e), int(c)) for e, c in zip(ells, counts) if c > 0]
    if not items:
        return

    def full(i):
        return lambda v: term_axes[i].block(n, int(v))

    def ss(i):
        return lambda v: term_axes[i].block(n, int(v))[:k, :k]

    c = corner(d, k)
    parts = [([full(i) for i in range(d)], blocks, 1.0)]
    if n > 0:
        parts.append(([ss(i) for i in range(d)], blocks[c], -1.0))
    for which, (mats, x, sign) in enumerate(parts):
        for ell, y in _contract_trie(x, items, mats):
            tgt = src_l[: len(y)] + np.asarray(ell)
            ok = np.all((tgt >= 0) & (tgt < width), axis=1)
            if not np.any(ok):
                continue
            tcode = np.ravel_multi_index(tuple(tgt[ok].T), (width,) * d)
            rows = np.searchsorted(codes, tcode)
            if which == 0:
                acc[rows] += (coeff * sign) * y[ok]
                counter[0] += int(np.count_nonzero(ok))
            else:
                acc[(rows,) + c[1:]] += (coeff * sign) * y[ok]


def _unit_terms(kernel, widths):
    """Unit-cube (coefficient, per-axis exponents) of each Gaussian term."""
    scale = float(np.prod(widths))
    return [(c * scale, tuple(t * w * w for w in widths)) for c, t in kernel.terms]


def _check_kernel_range(kernel, f):
    diameter = float(np.sqrt(np.sum(f.widths**2)))
    if not kernel.decays_beyond(diameter):
        raise KernelRangeError(
            f"kernel valid up to r_hi={kernel.r_hi:g} but the domain diameter is {diameter:g}"
        )
    finest = float(np.min(f.widths)) * 0.5 ** f.max_level()
    if kernel.r_lo > finest:
        raise KernelRangeError(
            f"kernel resolves down to r_lo={kernel.r_lo:g} but the finest box is {finest:g}"
        )


def apply(kernel, f, *, threads=None, screen=1.0, stats=None):
    """Apply the convolution with a separated kernel (free-space boundaries).

    The source is taken to non-standard form and every Gaussian term acts
    through d one-dimensional block products per source node. Contributions
    whose norm bound times source norm falls below
    ``screen * f.eps / (terms * source blocks)`` are skipped. The result is
    assembled top-down and truncated at ``f.eps``.
    """
    _check_kernel_range(kernel, f)
    threads = default_threads() if threads is None else int(threads)
    if threads < 1:
        raise ValueError("threads must be positive")
    d, k = f.dim, f.k
    ns = nonstandard_blocks(f)
    jac = math.sqrt(f.volume)
    terms = _unit_terms(kernel, f.widths)
    nsrc = sum(len(keys) for keys, _ in ns.values())
    # thresholds below are on unit-cube coefficient norms
    cutoff = screen * f.eps / (len(terms) * nsrc) / jac
    if stats is not None:
        stats.source_blocks = nsrc
        stats.screened_threshold = cutoff * jac

    levels = []
    plans = []
    for n in sorted(ns):
        keys, blocks = ns[n]
        nrm = np.sqrt(np.sum(blocks.reshape(len(keys), -1) ** 2, axis=1))
        order = np.argsort(-nrm, kind="stable")
        keys = [keys[i] for i in order]
        blocks = np.ascontiguousarray(blocks[order])
        nrm = nrm[order]
        src_l = np.array([key.l for key in keys], dtype=np.int64).reshape(len(keys), d)
        reach = (1 << n) - 1
        term_plans = []
        all_ells = set()
        for coeff, texps in terms:
            axes = [_blocks_for(t, k) for t in texps]
            cut = cutoff / nrm[0] if nrm[0] > 0 else math.inf
            wins = _term_window(axes, coeff, n, reach, cut)
            if wins is None:
                continue
            ells, bounds = _term_displacements(axes, coeff, n, wins, cut)
            if len(ells):
                term_plans.append((axes, coeff, ells, bounds))
                all_ells.update(map(tuple, ells.tolist()))
        if not term_plans:
            continue
        width = 1 << n
        cand = (src_l[:, None, :] + np.array(sorted(all_ells))[None, :, :]).reshape(-1, d)
        cand = cand[np.all((cand >= 0) & (cand < width), axis=1)]
        codes = np.unique(np.ravel_multi_index(tuple(cand.T), (width,) * d))
        levels.append((n, keys, blocks, nrm, src_l, codes, k))
        plans.append(term_plans)

    def run(level, term_plans):
        acc = np.zeros((len(level[5]),) + (2 * k,) * d)
        counter = [0]
        for axes, coeff, ells, bounds in term_plans:
            _apply_level_term(level, axes, coeff, ells, bounds, cutoff, acc, counter)
        return acc, counter[0]

    jobs = list(zip(levels, plans))
    if threads == 1:
        results = [run(lv, tp) for lv, tp in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda job: run(*job), jobs))

    out_blocks = {}
    total = 0
    for (level, _), (acc, cnt) in zip(jobs, results):
        n = level[0]
        width = 1 << n
        total += cnt
        ls = np.stack(np.unravel_index(level[5], (width,) * d), axis=1)
        for row, l in enumerate(ls.tolist()):
            out_blocks[NodeKey(n, tuple(l))] = acc[row]
    if stats is not None:
        stats.contributions = total
    return truncate(_assemble(f, out_blocks), f.eps)


def _assemble(f, out_blocks):
    """Sum per-level [scaling | wavelet] outputs top-down into leaf scaling blocks."""
    d, k = f.dim, f.k
    root = NodeKey.root(d)
    interior = set(out_blocks)
    for key in list(interior):
        while key.n > 0:
            key = key.parent()
            if key in interior:
                break
            interior.add(key)
    if not interior:
        block = np.zeros((k,) * d)
        return f.replace(form=RECONSTRUCTED, nodes={root: block})
    hgt = np.ascontiguousarray(f.basis.filters.hg.T)
    c = corner(d, k)
    by_level = {}
    for key in interior:
        by_level.setdefault(key.n, []).append(key)
    scaling = {root: np.zeros((k,) * d)}
    leaves = {}
    for n in sorted(by_level):
        keys = sorted(by_level[n])
        big = np.stack([
            out_blocks[key] if key in out_blocks else np.zeros((2 * k,) * d) for key in keys
        ])
        big[c] += np.stack([scaling.pop(key) for key in keys])
        kids = scatter_children(transform(big, hgt), d, k)
        for i, key in enumerate(keys):
            for j, ch in enumerate(key.children()):
                if ch in interior:
                    scaling[ch] = kids[i, j]
                else:
                    leaves[ch] = kids[i, j].copy()
    return f.replace(form=RECONSTRUCTED, nodes=leaves)
