"""Function calculus: projection, evaluation, sums, products and integrals."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .basis import scaling_table
from .tree import (
    COMPRESSED,
    MAX_DEPTH,
    RECONSTRUCTED,
    MRAFunction,
    NodeKey,
    compress,
    corner,
    gather_children,
    norm_coeffs,
    reconstruct,
    scatter_children,
    transform,
    truncate,
)

__all__ = [
    "DomainError",
    "ProjectionParams",
    "RefinementError",
    "constant",
    "eval_point",
    "eval_points",
    "gaxpy",
    "inner",
    "multiply",
    "norm2",
    "project",
    "scale",
    "trace",
]

# refine while the wavelet norm exceeds this fraction of eps
REFINE_SAFETY = 0.3


class RefinementError(RuntimeError):
    """Adaptive refinement did not converge within the depth limit."""


class DomainError(ValueError):
    """A point lies outside the function's domain."""


@dataclass(frozen=True)
class ProjectionParams:
    k: int = 6
    eps: float = 1e-4
    initial_level: int = 2
    max_depth: int = MAX_DEPTH

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps!r}")
        if self.initial_level < 0 or self.max_depth < self.initial_level:
            raise ValueError("need 0 <= initial_level <= max_depth")
        if self.max_depth > MAX_DEPTH:
            raise ValueError(f"max_depth is capped at {MAX_DEPTH}")


def _as_domain(domain, dim):
    dom = np.asarray(domain, dtype=float)
    if dom.ndim == 1:
        if dim is None:
            raise ValueError("dim is required when a single interval is given")
        dom = np.tile(dom.reshape(1, 2), (dim, 1))
    if dom.ndim != 2 or dom.shape[1] != 2:
        raise ValueError(f"domain must be (dim, 2) intervals, got shape {dom.shape}")
    if not np.all(np.isfinite(dom)):
        raise ValueError("domain must be finite")
    return dom


def _evaluator(func, dim, vectorized):
    if vectorized:
        return lambda pts: np.asarray(func(pts), dtype=float).reshape(len(pts))
    return lambda pts: np.fromiter((func(p) for p in pts), dtype=float, count=len(pts))


def _child_points(keys, basis, dim):
    """Unit-cube quadrature points of all boxes in ``keys`` (same level)."""
    n = keys[0].n
    h = 0.5**n
    x = basis.quad_nodes
    grid = np.stack(np.meshgrid(*([x] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    lows = np.array([key.l for key in keys], dtype=float)
    return (lows[:, None, :] + grid[None, :, :]) * h  # (nbox, k^d, dim)


def _project_boxes(keys, evaluate, basis, dim, domain):
    """Scaling coefficients of ``f`` on each box (all at one level)."""
    k = basis.k
    n = keys[0].n
    u = _child_points(keys, basis, dim)
    x = domain[:, 0] + (domain[:, 1] - domain[:, 0]) * u
    vals = evaluate(x.reshape(-1, dim)).reshape((len(keys),) + (k,) * dim)
    if not np.all(np.isfinite(vals)):
        raise ValueError("function returned non-finite values")
    return transform(vals, basis.quad_phi_w) * 2.0 ** (-0.5 * n * dim)


def project(func, params=None, domain=None, *, dim=None, vectorized=False):
    """Adaptively project an analytic function into the multiwavelet basis.

    ``func`` takes a point (length-``dim`` array) in user coordinates, or an
    (N, dim) array of points when ``vectorized`` is true. Each box is
    compared against its children; where the wavelet norm of the difference
    exceeds ``0.3 * eps`` the box is subdivided.
    """
    params = params or ProjectionParams()
    domain = _as_domain(domain if domain is not None else (-6.0, 6.0), dim)
    dim = domain.shape[0]
    k = params.k
    f = MRAFunction(dim=dim, k=k, eps=params.eps, domain=domain, form=RECONSTRUCTED, nodes={})
    basis = f.basis
    hg = basis.filters.hg
    evaluate = _evaluator(func, dim, vectorized)
    jac = math.sqrt(f.volume)
    thresh = REFINE_SAFETY * params.eps
    c = corner(dim, k)

    n0 = params.initial_level
    active = [NodeKey(n0, l) for l in np.ndindex(*((1 << n0,) * dim))]
    active = [NodeKey(key.n, tuple(int(i) for i in key.l)) for key in active]
    leaves = {}
    while active:
        n = active[0].n
        if n + 1 > params.max_depth:
            raise RefinementError(
                f"projection did not converge by level {params.max_depth}; "
                f"box {active[0]} (and {len(active) - 1} others) still unresolved"
            )
        children = [ch for key in active for ch in key.children()]
        s_kids = _project_boxes(children, evaluate, basis, dim, domain)
        s_kids = s_kids.reshape((len(active), 2**dim) + (k,) * dim)
        big = transform(gather_children(s_kids, dim, k), hg)
        s = big[c].copy()
        big[c] = 0.0
        dnorm = np.sqrt(np.sum(big.reshape(len(active), -1) ** 2, axis=1)) * jac
        refine = []
        for i, key in enumerate(active):
            if dnorm[i] <= thresh:
                leaves[key] = s[i]
            else:
                refine.extend(key.children())
        active = refine
    return f.replace(nodes=leaves)


def constant(value, domain, *, dim=None, k=6, eps=1e-4):
    """The constant function, exactly (a single root leaf)."""
    domain = _as_domain(domain, dim)
    dim = domain.shape[0]
    block = np.zeros((k,) * dim)
    block[(0,) * dim] = value
    return MRAFunction(
        dim=dim, k=k, eps=eps, domain=domain, form=RECONSTRUCTED, nodes={NodeKey.root(dim): block}
    )


def _reconstructed(f):
    return reconstruct(f) if f.is_compressed else f


def _compressed(f):
    return f if f.is_compressed else compress(f)


def eval_points(f, points):
    """Evaluate ``f`` at an (N, dim) array of user-domain points."""
    f = _reconstructed(f)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != f.dim:
        raise ValueError(f"points must have {f.dim} coordinates")
    lo, hi = f.domain[:, 0], f.domain[:, 1]
    outside = np.any((pts < lo) | (pts > hi), axis=1)
    if np.any(outside):
        bad = pts[np.argmax(outside)]
        raise DomainError(f"point {bad.tolist()} outside domain {f.domain.tolist()}")
    u = f.to_unit(pts)
    owner = np.full(len(pts), -1)
    levels = sorted({key.n for key in f.nodes})
    out = np.empty(len(pts))
    for n in levels:
        todo = np.flatnonzero(owner < 0)
        if todo.size == 0:
            break
        cells = np.minimum(np.floor(u[todo] * (1 << n)).astype(np.int64), (1 << n) - 1)
        groups = {}
        for idx, cell in zip(todo, map(tuple, cells.tolist())):
            key = NodeKey(n, cell)
            if key in f.nodes:
                groups.setdefault(key, []).append(idx)
        for key, idx in groups.items():
            idx = np.asarray(idx)
            owner[idx] = 1
            xi = u[idx] * (1 << n) - np.asarray(key.l)
            val = np.broadcast_to(f.nodes[key], (len(idx),) + f.nodes[key].shape)
            for axis in range(f.dim):
                table = scaling_table(f.k, xi[:, axis])  # (k, npts)
                tail = (1,) * (val.ndim - 2)
                # fixed-order sum so a point's value does not depend on the batch
                acc = table[0].reshape((-1,) + tail) * val[:, 0]
                for i in range(1, f.k):
                    acc = acc + table[i].reshape((-1,) + tail) * val[:, i]
                val = acc
            out[idx] = val * 2.0 ** (0.5 * n * f.dim)
    if np.any(owner < 0):
        raise ValueError("tree does not cover the domain")
    return out


def eval_point(f, x):
    """Value of ``f`` at a single point."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return float(eval_points(f, x)[0])


def _embed(block, k, dim):
    big = np.zeros((2 * k,) * dim)
    big[(slice(0, k),) * dim] = block
    return big


def _compressed_nodes(f):
    """Compressed nodes with a root-only tree expressed as a (2k)^d block."""
    g = _compressed(f)
    nodes = dict(g.nodes)
    root = NodeKey.root(f.dim)
    if nodes[root].shape[0] == f.k:
        nodes[root] = _embed(nodes[root], f.k, f.dim)
        return nodes, True
    return nodes, False


def gaxpy(alpha, f, beta, g):
    """alpha * f + beta * g on the union of the two trees."""
    f.check_compatible(g)
    nf, f_flat = _compressed_nodes(f)
    ng, g_flat = _compressed_nodes(g)
    out = {}
    for key in nf.keys() | ng.keys():
        a = nf.get(key)
        b = ng.get(key)
        if a is None:
            out[key] = beta * b
        elif b is None:
            out[key] = alpha * a
        else:
            out[key] = alpha * a + beta * b
    root = NodeKey.root(f.dim)
    if f_flat and g_flat:
        out[root] = out[root][(slice(0, f.k),) * f.dim].copy()
    h = f.replace(eps=min(f.eps, g.eps), form=COMPRESSED, nodes=out)
    return h if (f.is_compressed and g.is_compressed) else reconstruct(h)


def scale(alpha, f):
    return f.replace(nodes={key: alpha * b for key, b in f.nodes.items()})


def inner(f, g):
    """L2 inner product over the domain."""
    f.check_compatible(g)
    nf, _ = _compressed_nodes(f)
    ng, _ = _compressed_nodes(g)
    common = sorted(nf.keys() & ng.keys())
    total = math.fsum(float(np.vdot(nf[key], ng[key])) for key in common)
    return total * f.volume


def trace(f):
    """Integral of ``f`` over its domain."""
    d = f.dim
    if f.is_compressed:
        root = f.nodes[NodeKey.root(d)]
        return float(root[(0,) * d]) * f.volume
    total = math.fsum(
        float(b[(0,) * d]) * 2.0 ** (-0.5 * key.n * d) for key, b in f.nodes.items()
    )
    return total * f.volume


def norm2(f):
    return norm_coeffs(f)


def _interior_keys(leaves):
    out = set()
    for key in leaves:
        while key.n > 0:
            key = key.parent()
            if key in out:
                break
            out.add(key)
    return out


def refine_to(f, interior):
    """Subdivide leaves of reconstructed ``f`` that are in ``interior`` (exactly)."""
    d, k = f.dim, f.k
    hgt = np.ascontiguousarray(f.basis.filters.hg.T)
    nodes = dict(f.nodes)
    pending = sorted(key for key in nodes if key in interior)
    while pending:
        big = np.zeros((len(pending),) + (2 * k,) * d)
        big[corner(d, k)] = np.stack([nodes.pop(key) for key in pending])
        kids = scatter_children(transform(big, hgt), d, k)
        nxt = []
        for i, key in enumerate(pending):
            for j, ch in enumerate(key.children()):
                nodes[ch] = kids[i, j]
                if ch in interior:
                    nxt.append(ch)
        pending = sorted(nxt)
    return f.replace(nodes=nodes)


def union_leaves(f, g):
    """Both functions (reconstructed) refined onto their common leaf set."""
    f = _reconstructed(f)
    g = _reconstructed(g)
    interior = _interior_keys(f.nodes) | _interior_keys(g.nodes)
    return refine_to(f, interior), refine_to(g, interior)


def _pointwise_product(sf, sg, basis, n, dim):
    to_vals = np.ascontiguousarray(basis.phi_at_nodes.T)
    vals = transform(sf, to_vals) * transform(sg, to_vals)
    return transform(vals, basis.quad_phi_w) * 2.0 ** (0.5 * n * dim)


def multiply(f, g):
    """Pointwise product via function values at the quadrature points.

    Products are formed on the union tree and on one further level; leaves
    whose finer product differs by more than the refinement threshold keep
    the finer level. The result is truncated at eps.
    """
    f.check_compatible(g)
    ff, gg = union_leaves(f, g)
    d, k = f.dim, f.k
    basis = f.basis
    hg = basis.filters.hg
    hgt = np.ascontiguousarray(hg.T)
    eps = min(f.eps, g.eps)
    thresh = REFINE_SAFETY * eps / math.sqrt(f.volume)
    c = corner(d, k)

    by_level = {}
    for key in ff.nodes:
        by_level.setdefault(key.n, []).append(key)
    out = {}
    for n in sorted(by_level):
        keys = sorted(by_level[n])
        sf = np.stack([ff.nodes[key] for key in keys])
        sg = np.stack([gg.nodes[key] for key in keys])
        # exact subdivision of both factors onto the children
        kid_f = np.zeros((len(keys),) + (2 * k,) * d)
        kid_g = np.zeros_like(kid_f)
        kid_f[c] = sf
        kid_g[c] = sg
        kid_f = scatter_children(transform(kid_f, hgt), d, k).reshape((-1,) + (k,) * d)
        kid_g = scatter_children(transform(kid_g, hgt), d, k).reshape((-1,) + (k,) * d)
        prod_kids = _pointwise_product(kid_f, kid_g, basis, n + 1, d)
        prod_kids = prod_kids.reshape((len(keys), 2**d) + (k,) * d)
        big = transform(gather_children(prod_kids, d, k), hg)
        s_parent = big[c].copy()
        big[c] = 0.0
        dnorm = np.sqrt(np.sum(big.reshape(len(keys), -1) ** 2, axis=1))
        for i, key in enumerate(keys):
            if dnorm[i] > thresh and n + 1 <= MAX_DEPTH:
                for j, ch in enumerate(key.children()):
                    out[ch] = prod_kids[i, j]
            else:
                out[key] = s_parent[i]
    h = ff.replace(eps=eps, nodes=out)
    return truncate(h, eps)
