"""Adaptive dyadic trees of multiwavelet coefficients.

A function lives on a box domain mapped affinely onto the unit cube. Its
coefficients are stored in a flat dict keyed by :class:`NodeKey`:

* reconstructed form: scaling blocks of shape ``(k,)*d`` at the leaves;
* compressed form: blocks of shape ``(2k,)*d`` at interior nodes holding the
  wavelet coefficients, with the scaling corner zero except at the root. A
  tree that is a single root leaf keeps a ``(k,)*d`` block at the root.

Coefficients are those of the unit-cube function ``u -> f(lo + (hi-lo) u)``;
norms and integrals pick up the domain volume where needed.
"""

from __future__ import annotations

import heapq
import io
import itertools
import json
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .basis import get_basis

__all__ = [
    "COMPRESSED",
    "FORMAT_MAGIC",
    "MAX_DEPTH",
    "RECONSTRUCTED",
    "IncompatibleFunctionsError",
    "MRAFunction",
    "NodeKey",
    "compress",
    "load_function",
    "norm_coeffs",
    "reconstruct",
    "save_function",
    "truncate",
]

RECONSTRUCTED = "reconstructed"
COMPRESSED = "compressed"
MAX_DEPTH = 30
FORMAT_MAGIC = b"MRAFUNC\x00"
FORMAT_VERSION = 1


class IncompatibleFunctionsError(ValueError):
    """Functions differ in dimension, order or domain."""


class NodeKey(NamedTuple):
    """Box ``l`` (one translation per dimension) at refinement level ``n``."""

    n: int
    l: tuple

    @classmethod
    def root(cls, dim):
        return cls(0, (0,) * dim)

    def parent(self):
        return NodeKey(self.n - 1, tuple(i >> 1 for i in self.l))

    def children(self):
        return [
            NodeKey(self.n + 1, tuple(2 * i + c for i, c in zip(self.l, off)))
            for off in child_offsets(len(self.l))
        ]

    def is_valid(self):
        return self.n >= 0 and all(0 <= i < (1 << self.n) for i in self.l)


@lru_cache(maxsize=None)
def child_offsets(dim):
    return tuple(itertools.product((0, 1), repeat=dim))


def transform(x, mat):
    """Apply ``mat`` along each of the trailing axes of a batch ``x`` (N, m, ..., m)."""
    for _ in range(x.ndim - 1):
        x = np.tensordot(x, mat, axes=([1], [1]))
    return x


def transform_dirs(x, mats):
    """Apply a different matrix along each trailing axis of a batch."""
    for mat in mats:
        x = np.tensordot(x, mat, axes=([1], [1]))
    return x


def gather_children(blocks, dim, k):
    """Stack children blocks (N, 2^d, k, ..., k) into (N, 2k, ..., 2k)."""
    n = blocks.shape[0]
    x = blocks.reshape((n,) + (2,) * dim + (k,) * dim)
    order = [0]
    for i in range(dim):
        order += [1 + i, 1 + dim + i]
    return x.transpose(order).reshape((n,) + (2 * k,) * dim)


def scatter_children(big, dim, k):
    """Inverse of :func:`gather_children`."""
    n = big.shape[0]
    x = big.reshape((n,) + (2, k) * dim)
    order = [0] + [1 + 2 * i for i in range(dim)] + [2 + 2 * i for i in range(dim)]
    return x.transpose(order).reshape((n, 2**dim) + (k,) * dim)


def corner(dim, k):
    return (slice(None),) + (slice(0, k),) * dim


@dataclass
class MRAFunction:
    """An adaptively refined function in the multiwavelet basis.

    Treat instances as immutable: every operation returns a new function.
    """

    dim: int
    k: int
    eps: float
    domain: np.ndarray
    form: str
    nodes: dict = field(repr=False)

    def __post_init__(self):
        dom = np.array(self.domain, dtype=float).reshape(self.dim, 2)
        if np.any(dom[:, 1] <= dom[:, 0]):
            raise ValueError(f"empty domain {dom.tolist()}")
        self.domain = dom
        if self.form not in (RECONSTRUCTED, COMPRESSED):
            raise ValueError(f"unknown form {self.form!r}")
        if self.dim not in (1, 2, 3):
            raise ValueError("dimension must be 1, 2 or 3")

    @property
    def widths(self):
        return self.domain[:, 1] - self.domain[:, 0]

    @property
    def volume(self):
        return float(np.prod(self.widths))

    @property
    def basis(self):
        return get_basis(self.k)

    @property
    def is_compressed(self):
        return self.form == COMPRESSED

    def replace(self, **changes):
        args = dict(
            dim=self.dim, k=self.k, eps=self.eps, domain=self.domain, form=self.form, nodes=self.nodes
        )
        args.update(changes)
        return MRAFunction(**args)

    def compatible_with(self, other):
        return (
            self.dim == other.dim
            and self.k == other.k
            and np.allclose(self.domain, other.domain, rtol=1e-14, atol=0.0)
        )

    def check_compatible(self, other):
        if not self.compatible_with(other):
            raise IncompatibleFunctionsError(
                f"incompatible functions: dim {self.dim}/{other.dim}, k {self.k}/{other.k}, "
                f"domain {self.domain.tolist()}/{other.domain.tolist()}"
            )

    def max_level(self):
        return max(key.n for key in self.nodes)

    def leaf_keys(self):
        """Leaf boxes (either form)."""
        if not self.is_compressed:
            return list(self.nodes)
        root = NodeKey.root(self.dim)
        if self.nodes[root].shape[0] == self.k:
            return [root]
        return [c for key in self.nodes for c in key.children() if c not in self.nodes]

    def __len__(self):
        return len(self.nodes)

    def to_unit(self, x):
        x = np.asarray(x, dtype=float)
        return (x - self.domain[:, 0]) / self.widths


def _root_only(f):
    root = NodeKey.root(f.dim)
    return len(f.nodes) == 1 and root in f.nodes and f.nodes[root].shape[0] == f.k


def compress(f):
    """Fast wavelet transform: leaves' scaling blocks -> root scaling + wavelets."""
    if f.is_compressed:
        raise ValueError("function is already compressed")
    d, k = f.dim, f.k
    hg = f.basis.filters.hg
    root = NodeKey.root(d)
    if root in f.nodes:
        if len(f.nodes) != 1:
            raise ValueError("reconstructed tree has a root leaf and other leaves")
        return f.replace(form=COMPRESSED, nodes={root: f.nodes[root].copy()})

    by_level = {}
    for key in f.nodes:
        parent = key.parent()
        by_level.setdefault(parent.n, set()).add(parent)
    # every ancestor of a leaf is interior
    for n in range(max(by_level), 0, -1):
        if n in by_level:
            by_level.setdefault(n - 1, set()).update(p.parent() for p in by_level[n])

    scaling = dict(f.nodes)
    out = {}
    c = corner(d, k)
    for n in sorted(by_level, reverse=True):
        parents = sorted(by_level[n])
        try:
            kids = np.stack(
                [np.stack([scaling.pop(ch) for ch in p.children()]) for p in parents]
            )
        except KeyError as exc:
            raise ValueError(f"reconstructed tree is not complete below {exc.args[0]}") from None
        big = transform(gather_children(kids, d, k), hg)
        s = big[c].copy()
        if n > 0:
            big[c] = 0.0
        for i, p in enumerate(parents):
            out[p] = big[i]
            scaling[p] = s[i]
    if len(scaling) != 1:
        raise ValueError("reconstructed tree is disconnected")
    return f.replace(form=COMPRESSED, nodes=out)


def reconstruct(f):
    """Inverse fast wavelet transform back to leaf scaling blocks."""
    if not f.is_compressed:
        raise ValueError("function is already reconstructed")
    d, k = f.dim, f.k
    root = NodeKey.root(d)
    if _root_only(f):
        return f.replace(form=RECONSTRUCTED, nodes={root: f.nodes[root].copy()})
    hgt = np.ascontiguousarray(f.basis.filters.hg.T)
    c = corner(d, k)
    by_level = {}
    for key in f.nodes:
        by_level.setdefault(key.n, []).append(key)
    if root not in f.nodes:
        raise ValueError("compressed tree has no root")
    scaling = {root: f.nodes[root][c[1:]].copy()}
    out = {}
    for n in sorted(by_level):
        keys = sorted(by_level[n])
        big = np.stack([f.nodes[key] for key in keys])
        try:
            big[c] = np.stack([scaling.pop(key) for key in keys])
        except KeyError as exc:
            raise ValueError(f"compressed tree has an orphan node {exc.args[0]}") from None
        kids = scatter_children(transform(big, hgt), d, k)
        for i, key in enumerate(keys):
            for j, ch in enumerate(key.children()):
                if ch in f.nodes:
                    scaling[ch] = kids[i, j]
                else:
                    out[ch] = kids[i, j].copy()
    return f.replace(form=RECONSTRUCTED, nodes=out)


def norm_coeffs(f):
    """L2 norm over the user domain, from the coefficients (Parseval)."""
    total = math.fsum(float(np.vdot(b, b)) for b in f.nodes.values())
    return math.sqrt(total * f.volume)


def truncate(f, eps):
    """Delete small wavelet blocks, removing at most ``eps`` of 2-norm in total.

    Blocks are candidates only when all their children are leaves and their
    norm is below ``eps``; candidates are removed smallest first while the
    accumulated squared norm stays within ``eps**2``. ``eps == 0`` returns
    an unchanged copy.
    """
    if eps < 0 or not math.isfinite(eps):
        raise ValueError(f"truncation threshold must be non-negative, got {eps!r}")
    if eps == 0:
        return f.replace(nodes={key: b.copy() for key, b in f.nodes.items()})
    was_compressed = f.is_compressed
    g = f if was_compressed else compress(f)
    nodes = {key: b for key, b in g.nodes.items()}
    if _root_only(g):
        out = g.replace(nodes=dict(nodes))
        return out if was_compressed else reconstruct(out)

    d, k = f.dim, f.k
    c = corner(d, k)[1:]
    jac = math.sqrt(g.volume)
    root = NodeKey.root(d)

    def wnorm(key):
        b = nodes[key]
        if key == root:
            b = b.copy()
            b[c] = 0.0
        return float(np.linalg.norm(b)) * jac

    def removable(key):
        return all(ch not in nodes for ch in key.children())

    heap = [(wnorm(key), key) for key in nodes if removable(key)]
    heapq.heapify(heap)
    budget = eps * eps
    while heap:
        nrm, key = heap[0]
        if nrm >= eps or nrm * nrm > budget:
            break
        heapq.heappop(heap)
        budget -= nrm * nrm
        if key == root:
            nodes[root] = nodes[root][c].copy()
            break
        del nodes[key]
        parent = key.parent()
        if removable(parent):
            heapq.heappush(heap, (wnorm(parent), parent))
    out = g.replace(nodes=nodes)
    return out if was_compressed else reconstruct(out)


def save_function(f, path_or_file):
    """Write a function: magic, header length, JSON header, float64 payload."""
    keys = sorted(f.nodes)
    header = {
        "version": FORMAT_VERSION,
        "dim": f.dim,
        "k": f.k,
        "eps": f.eps,
        "domain": f.domain.tolist(),
        "form": f.form,
        "keys": [[key.n, *key.l] for key in keys],
        "sizes": [int(f.nodes[key].shape[0]) for key in keys],
    }
    raw = json.dumps(header).encode()
    buf = io.BytesIO()
    buf.write(FORMAT_MAGIC)
    buf.write(struct.pack("<Q", len(raw)))
    buf.write(raw)
    for key in keys:
        buf.write(np.ascontiguousarray(f.nodes[key], dtype="<f8").tobytes())
    data = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        Path(path_or_file).write_bytes(data)


def load_function(path_or_file):
    data = path_or_file.read() if hasattr(path_or_file, "read") else Path(path_or_file).read_bytes()
    if data[: len(FORMAT_MAGIC)] != FORMAT_MAGIC:
        raise ValueError("not a multiwavelet function file (bad magic)")
    pos = len(FORMAT_MAGIC)
    (hlen,) = struct.unpack("<Q", data[pos : pos + 8])
    pos += 8
    header = json.loads(data[pos : pos + hlen])
    pos += hlen
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported function file version {header.get('version')!r}")
    dim = header["dim"]
    nodes = {}
    for entry, size in zip(header["keys"], header["sizes"]):
        count = size**dim
        block = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape((size,) * dim)
        pos += 8 * count
        nodes[NodeKey(int(entry[0]), tuple(int(i) for i in entry[1:]))] = block.astype(float)
    return MRAFunction(
        dim=dim,
        k=header["k"],
        eps=header["eps"],
        domain=np.array(header["domain"]),
        form=header["form"],
        nodes=nodes,
    )
