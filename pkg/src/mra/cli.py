"""Command-line front end: Gaussian demo, kernel fits, eigensolves, sampling.

Exit status: 0 when every advertised tolerance is met, 1 when a run
completes but misses a tolerance (or does not converge), 2 for usage
errors, 3 for numerical failures. Structured reports are JSON files with a
``format`` tag; timing lives under ``"timing"`` so reruns can be compared.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
from scipy import integrate
from scipy.special import erf

from .convolution import THREADS_ENV, apply, default_threads
from .funcops import DomainError, ProjectionParams, eval_points, inner, norm2, project, trace
from .kernels import fit_bsh, fit_coulomb
from .solvers import Harmonic, SmoothedCoulomb, solve_ground_state
from .tree import load_function, save_function

REPORT_FORMAT = "mra-report/1"
HISTORY_FORMAT = "mra-history/1"
SAMPLE_FORMAT = "mra-sample/1"

EXIT_OK = 0
EXIT_TOLERANCE = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

DEMO_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- references


def gaussian_box_trace(lo, hi):
    """Integral of exp(-|x|^2) over a box."""
    return math.prod(0.5 * math.sqrt(math.pi) * (erf(b) - erf(a)) for a, b in zip(lo, hi))


def gaussian_box_norm(lo, hi):
    """2-norm of exp(-|x|^2) over a box."""
    s = math.sqrt(2.0)
    sq = math.prod(
        0.5 * math.sqrt(math.pi / 2.0) * (erf(s * b) - erf(s * a)) for a, b in zip(lo, hi)
    )
    return math.sqrt(sq)


def gaussian_box_self_energy(lo, hi):
    """int int exp(-|x|^2 - |y|^2) / |x - y| over a box, by direct quadrature.

    Uses 1/r = 2/sqrt(pi) int_0^inf exp(-r^2 s^2) ds; the y integral of each
    one-dimensional factor is done in closed form, the rest by adaptive
    quadrature.
    """

    def factor(s, a, b):
        q = 1.0 + s * s

        def inner_x(x):
            m = s * s * x / q
            rq = math.sqrt(q)
            y_int = 0.5 * math.sqrt(math.pi / q) * (erf(rq * (b - m)) - erf(rq * (a - m)))
            return math.exp(-x * x * (1.0 + 2.0 * s * s) / q) * y_int

        return integrate.quad(inner_x, a, b, epsabs=1e-14, epsrel=1e-12, limit=200)[0]

    def integrand(s):
        return math.prod(factor(s, a, b) for a, b in zip(lo, hi))

    total = 0.0
    edges = [0.0, 1.0, 10.0, 100.0, 1e3, 1e4, math.inf]
    for a, b in zip(edges, edges[1:]):
        total += integrate.quad(integrand, a, b, epsabs=1e-13, epsrel=1e-11, limit=200)[0]
    return 2.0 / math.sqrt(math.pi) * total


# ------------------------------------------------------------------- helpers


def _domain_from(args, dim=3):
    lo = -args.domain if args.lo is None else args.lo
    hi = args.domain if args.hi is None else args.hi
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        raise UsageError(f"domain must satisfy lo < hi, got [{lo}, {hi}]")
    return [[lo, hi]] * dim


def _threads(args):
    if args.single_threaded:
        return 1
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be positive")
        return args.threads
    return default_threads()


def _write_json(path, payload):
    if path:
        Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _rel(value, ref):
    return abs(value - ref) / abs(ref)


def _positive(kind):
    def conv(text):
        v = kind(text)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v

    return conv


# ----------------------------------------------------------------- commands


def cmd_demo_gaussian(args):
    threads = _threads(args)
    domain = _domain_from(args)
    lo = [d[0] for d in domain]
    hi = [d[1] for d in domain]
    t0 = time.perf_counter()
    g = project(
        lambda x: np.exp(-np.sum(x * x, axis=1)),
        ProjectionParams(k=args.k, eps=args.eps),
        domain,
        vectorized=True,
    )
    t_project = time.perf_counter() - t0
    diameter = math.sqrt(sum((b - a) ** 2 for a, b in zip(lo, hi)))
    r_lo = min(args.finest_length, diameter / 2.0)
    op = fit_coulomb(args.op_eps, r_lo, diameter)
    t1 = time.perf_counter()
    v = apply(op, g, threads=threads)
    t_apply = time.perf_counter() - t1
    values = {"trace": trace(g), "norm2": norm2(g), "self_energy": inner(g, v)}
    refs = {
        "trace": gaussian_box_trace(lo, hi),
        "norm2": gaussian_box_norm(lo, hi),
        "self_energy": gaussian_box_self_energy(lo, hi),
    }
    tol = args.tolerance
    checks = {
        name: {
            "value": values[name],
            "reference": refs[name],
            "rel_error": _rel(values[name], refs[name]),
            "pass": bool(_rel(values[name], refs[name]) <= tol),
        }
        for name in values
    }
    ok = all(c["pass"] for c in checks.values())
    for name, c in checks.items():
        flag = "ok" if c["pass"] else "FAIL"
        print(f"{name:12s} {c['value']:.10f}  ref {c['reference']:.10f}  rel {c['rel_error']:.2e}  {flag}")
    report = {
        "format": REPORT_FORMAT,
        "command": "demo-gaussian",
        "config": {
            "k": args.k,
            "eps": args.eps,
            "domain": domain,
            "finest_length": r_lo,
            "op_eps": args.op_eps,
            "tolerance": tol,
            "threads": threads,
        },
        "nodes": len(g.nodes),
        "kernel_terms": op.M,
        "checks": checks,
        "pass": ok,
        "timing": {"project_s": t_project, "apply_s": t_apply},
    }
    _write_json(args.report, report)
    if args.save_function:
        save_function(g, args.save_function)
    return EXIT_OK if ok else EXIT_TOLERANCE


def cmd_fit_kernel(args):
    if not (0 < args.r_lo < args.r_hi):
        raise UsageError(f"need 0 < r_lo < r_hi, got r_lo={args.r_lo}, r_hi={args.r_hi}")
    try:
        if args.kind == "coulomb":
            kernel = fit_coulomb(args.eps, args.r_lo, args.r_hi)
        else:
            kernel = fit_bsh(args.mu, args.eps, args.r_lo, args.r_hi)
    except ValueError as exc:
        print(f"fit-kernel: {exc}", file=sys.stderr)
        _write_json(args.report, {
            "format": REPORT_FORMAT, "command": "fit-kernel", "pass": False, "error": str(exc),
        })
        return EXIT_TOLERANCE
    err, r_at = kernel.relative_error(npts=1000)
    ok = bool(err <= args.eps)
    if args.out:
        kernel.save(args.out)
    report = {
        "format": REPORT_FORMAT,
        "command": "fit-kernel",
        "config": {
            "kind": args.kind, "mu": args.mu, "eps": args.eps,
            "r_lo": args.r_lo, "r_hi": args.r_hi,
        },
        "terms": kernel.M,
        "max_rel_err": err,
        "max_rel_err_at": r_at,
        "pass": ok,
    }
    print(f"{args.kind}: M={kernel.M} max_rel_err={err:.3e} at r={r_at:.4g} {'ok' if ok else 'FAIL'}")
    _write_json(args.report, report)
    return EXIT_OK if ok else EXIT_TOLERANCE


def _guess(kind, exponent):
    if kind == "gaussian":
        return lambda x: np.exp(-exponent * np.sum(x * x, axis=1))
    if kind == "slater":
        return lambda x: np.exp(-exponent * np.sqrt(np.sum(x * x, axis=1)))
    if kind == "odd":
        return lambda x: x[:, 0] * np.exp(-exponent * np.sum(x * x, axis=1))
    raise UsageError(f"unknown guess {kind!r}")


SOLVE_DEFAULTS = {
    # box half-width, starting energy, guess, guess exponent
    "harmonic": (3.0, -1.0, "gaussian", 1.0),
    "hydrogen": (20.0, -0.4, "slater", 1.0),
}


def cmd_solve(args):
    threads = _threads(args)
    half, e0, guess_kind, expo = SOLVE_DEFAULTS[args.potential]
    if args.domain is not None:
        half = args.domain
    e0 = args.E0 if args.E0 is not None else e0
    guess_kind = args.guess or guess_kind
    expo = args.guess_exponent if args.guess_exponent is not None else expo
    if not half > 0:
        raise UsageError("--domain must be positive")
    if not e0 < 0:
        raise UsageError("--E0 must be negative")
    if args.potential == "harmonic":
        V = Harmonic(omega=args.omega, offset=args.shift)
        exact = V.exact_energy() if guess_kind != "odd" else V.exact_energy() + args.omega
    else:
        V = SmoothedCoulomb(charge=args.charge, smoothing_length=args.smoothing)
        exact = -0.5 * args.charge**2
    history = []

    def record(state):
        history.append(state.record())
        if args.verbose:
            h = state.record()
            print(
                f"iter {h['iteration']:3d}  E {h['energy']:.10f}  dE {h['delta_e']:.3e}"
                f"  residual {h['residual']:.3e}  nodes {h['nodes']}"
            )

    t0 = time.perf_counter()
    state = solve_ground_state(
        V,
        _guess(guess_kind, expo),
        e0,
        args.eps,
        args.max_iter,
        k=args.k,
        domain=(-half, half),
        threads=threads,
        callback=record,
    )
    elapsed = time.perf_counter() - t0
    payload = {"format": HISTORY_FORMAT, "potential": V.describe(), "history": state.history}
    _write_json(args.history, payload)
    if args.out:
        save_function(state.psi, args.out)
    report = {
        "format": REPORT_FORMAT,
        "command": "solve",
        "config": {
            "potential": V.describe(),
            "k": args.k,
            "eps": args.eps,
            "domain": [-half, half],
            "E0": e0,
            "guess": guess_kind,
            "guess_exponent": expo,
            "max_iter": args.max_iter,
            "threads": threads,
        },
        "energy": state.energy,
        "reference_energy": exact,
        "iterations": state.iteration,
        "residual": state.residual,
        "converged": state.converged,
        "stagnated": state.stagnated,
        "message": state.message,
        "pass": state.converged,
        "timing": {"solve_s": elapsed},
    }
    _write_json(args.report, report)
    print(f"E = {state.energy:.10f}  ({state.message})")
    return EXIT_OK if state.converged else EXIT_TOLERANCE


AXES = "xyz"


def cmd_sample(args):
    if args.resolution < 1:
        raise UsageError("--resolution must be at least 1")
    f = load_function(args.function)
    lo_dom = f.domain[:, 0]
    hi_dom = f.domain[:, 1]
    axes = [AXES.index(a) for a in args.axes]
    if len(set(axes)) != len(axes) or max(axes) >= f.dim:
        raise UsageError(f"--axes {args.axes!r} does not fit a {f.dim}-d function")
    at = np.zeros(f.dim) if args.at is None else np.asarray(args.at, dtype=float)
    if at.shape != (f.dim,):
        raise UsageError(f"--at needs {f.dim} coordinates")
    lo = np.array([lo_dom[a] if args.lo is None else args.lo for a in axes])
    hi = np.array([hi_dom[a] if args.hi is None else args.hi for a in axes])
    window = at.copy()
    for i, a in enumerate(axes):
        if lo[i] > hi[i] or lo[i] < lo_dom[a] or hi[i] > hi_dom[a]:
            raise DomainError(
                f"window [{lo[i]}, {hi[i]}] on axis {AXES[a]} outside domain "
                f"[{lo_dom[a]}, {hi_dom[a]}]"
            )
    fixed = [a for a in range(f.dim) if a not in axes]
    for a in fixed:
        if not lo_dom[a] <= window[a] <= hi_dom[a]:
            raise DomainError(
                f"--at coordinate {window[a]} on axis {AXES[a]} outside domain "
                f"[{lo_dom[a]}, {hi_dom[a]}]"
            )
    n = args.resolution
    grids = [np.linspace(lo[i], hi[i], n) if n > 1 else np.array([lo[i]]) for i in range(len(axes))]
    mesh = np.meshgrid(*grids, indexing="ij")
    pts = np.tile(window, (mesh[0].size, 1))
    for i, a in enumerate(axes):
        pts[:, a] = mesh[i].ravel()
    vals = eval_points(f, pts)
    header = ",".join([AXES[a] for a in range(f.dim)] + ["value"])
    lines = [f"# {SAMPLE_FORMAT}", header]
    lines += [",".join(repr(float(v)) for v in row) + f",{float(val)!r}" for row, val in zip(pts, vals)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (default from {THREADS_ENV}, else 1)")
    common.add_argument("--single-threaded", action="store_true",
                        help="deterministic single-threaded mode")
    common.add_argument("--report", help="write a JSON report here")

    p = argparse.ArgumentParser(prog="mra", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("demo-gaussian", parents=[common], help="trace, norm and self-energy of a Gaussian")
    d.add_argument("--k", type=int, default=6)
    d.add_argument("--eps", type=_positive(float), default=1e-4)
    d.add_argument("--domain", type=_positive(float), default=6.0, help="half-width of the cube")
    d.add_argument("--lo", type=float, default=None)
    d.add_argument("--hi", type=float, default=None)
    d.add_argument("--finest-length", type=_positive(float), default=1e-4,
                   help="smallest length the Coulomb fit resolves")
    d.add_argument("--op-eps", type=_positive(float), default=1e-6, help="operator accuracy")
    d.add_argument("--tolerance", type=_positive(float), default=DEMO_TOLERANCE)
    d.add_argument("--save-function", help="write the projected Gaussian here")
    d.set_defaults(func=cmd_demo_gaussian)

    f = sub.add_parser("fit-kernel", parents=[common], help="Gaussian-sum kernel fit")
    f.add_argument("--kind", choices=["coulomb", "bsh"], default="coulomb")
    f.add_argument("--mu", type=float, default=0.0)
    f.add_argument("--eps", type=_positive(float), default=1e-6)
    f.add_argument("--r-lo", type=float, default=1e-3)
    f.add_argument("--r-hi", type=float, default=20.0)
    f.add_argument("--out", help="write the kernel table here")
    f.set_defaults(func=cmd_fit_kernel)

    s = sub.add_parser("solve", parents=[common], help="lowest bound state by Green's-function iteration")
    s.add_argument("--potential", choices=sorted(SOLVE_DEFAULTS), default="harmonic")
    s.add_argument("--shift", type=float, default=5.0, help="harmonic energy offset")
    s.add_argument("--omega", type=_positive(float), default=1.0)
    s.add_argument("--charge", type=_positive(float), default=1.0)
    s.add_argument("--smoothing", type=_positive(float), default=1e-3)
    s.add_argument("--domain", type=float, default=None, help="half-width of the cube")
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--eps", type=_positive(float), default=1e-5)
    s.add_argument("--E0", type=float, default=None)
    s.add_argument("--guess", choices=["gaussian", "slater", "odd"], default=None)
    s.add_argument("--guess-exponent", type=_positive(float), default=None)
    s.add_argument("--max-iter", type=_positive(int), default=30)
    s.add_argument("--history", help="write the iteration history here")
    s.add_argument("--out", help="write the final wavefunction here")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_solve)

    m = sub.add_parser("sample", parents=[common], help="evaluate a saved function on a grid")
    m.add_argument("function", help="saved function file")
    m.add_argument("--axes", default="x", help="axes spanned by the grid, e.g. x or xy")
    m.add_argument("--at", type=float, nargs="+", default=None,
                   help="base point; coordinates of the fixed axes")
    m.add_argument("--lo", type=float, default=None)
    m.add_argument("--hi", type=float, default=None)
    m.add_argument("--resolution", type=int, default=101)
    m.add_argument("--out", help="write CSV here instead of stdout")
    m.set_defaults(func=cmd_sample)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mra: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DomainError, FileNotFoundError) as exc:
        print(f"mra: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"mra: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
