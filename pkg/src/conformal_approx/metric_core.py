"""Input length metrics and a lattice shortest-path oracle for them.

A :class:`MetricSpec` describes the metric through its length density
(Euclidean, conformal ``e^g``, or Riemannian ``sqrt(v^T M v)``). A
:class:`LatticeOracle` discretizes it on a box lattice with a neighbour
stencil; every lattice step is weighted by the density at the step midpoint.
"""
from __future__ import annotations

import math
import re
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path as FsPath
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import linprog, minimize_scalar

from . import _kernels as K
from .errors import ConfigError, OracleError, OutOfBoxError, ResourceBudgetError
from .formats import parse_kv, read_grid

DEFAULT_BUDGET_BYTES = 3.0e9
# buffers per lattice node: dist, pred, root, touched (8 bytes each) + tflag
SEARCH_BYTES_PER_NODE = 33


# --------------------------------------------------------------------------
# metric specifications


@dataclass(frozen=True)
class MetricSpec:
    kind: str
    R: float
    d: int
    density: Optional[Callable] = None   # g(points) for conformal, density e^g
    tensor: Optional[Callable] = None    # M(points) -> (n, d, d) for riemannian
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("euclidean", "conformal", "riemannian"):
            raise ConfigError(f"unknown metric kind {self.kind!r}")
        if not self.R > 0:
            raise ConfigError(f"box half-width R must be positive, got {self.R}")
        if self.d not in (2, 3):
            raise ConfigError(f"dimension must be 2 or 3, got {self.d}")
        if self.kind == "conformal" and self.density is None:
            raise ConfigError("conformal metric needs a density")
        if self.kind == "riemannian" and self.tensor is None:
            raise ConfigError("riemannian metric needs a tensor field")

    def sample_points(self, n=17):
        ax = np.linspace(-self.R, self.R, n)
        grids = np.meshgrid(*([ax] * self.d), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def check(self, n=17):
        """Validate boundedness / positive-definiteness on a sample grid."""
        pts = self.sample_points(n)
        if self.kind == "conformal":
            g = np.asarray(self.density(pts), dtype=float)
            if not np.all(np.isfinite(g)):
                bad = pts[np.argmax(~np.isfinite(g))]
                raise OracleError(f"conformal density not finite at {bad.tolist()}")
        elif self.kind == "riemannian":
            _check_spd(self.tensor(pts), pts)

    def density_bounds(self, n=33):
        """(min, max) of the length density over unit directions, on a sample grid."""
        if self.kind == "euclidean":
            return 1.0, 1.0
        pts = self.sample_points(n)
        if self.kind == "conformal":
            g = np.asarray(self.density(pts), dtype=float)
            return float(np.exp(g.min())), float(np.exp(g.max()))
        lam = np.linalg.eigvalsh(self.tensor(pts))
        return float(np.sqrt(lam.min())), float(np.sqrt(lam.max()))

    def unit_density(self, points, direction):
        """Length density at ``points`` along the unit vector ``direction``."""
        points = np.atleast_2d(points)
        if self.kind == "euclidean":
            return np.ones(len(points))
        if self.kind == "conformal":
            return np.exp(np.asarray(self.density(points), dtype=float))
        M = self.tensor(points)
        v = np.asarray(direction, dtype=float)
        return np.sqrt(np.einsum("i,nij,j->n", v, M, v))


def _check_spd(M, pts):
    lam = np.linalg.eigvalsh(M)
    bad = np.flatnonzero(~(lam[:, 0] > 0) | ~np.all(np.isfinite(lam), axis=1))
    if bad.size:
        raise OracleError(
            f"riemannian tensor not positive definite at {pts[bad[0]].tolist()}")


def _sin_bump(amplitude=0.5):
    def g(x):
        x = np.atleast_2d(x)
        return amplitude * np.prod(np.sin(np.pi * x), axis=1)
    return g


def _gaussian_bump(amplitude=1.0, width=0.3):
    def g(x):
        x = np.atleast_2d(x)
        return amplitude * np.exp(-np.sum(x * x, axis=1) / width ** 2)
    return g


def _constant(value=0.0):
    def g(x):
        return np.full(len(np.atleast_2d(x)), float(value))
    return g


def _diag_tensor(*entries):
    D = np.diag(np.asarray(entries, dtype=float))

    def M(x):
        return np.broadcast_to(D, (len(np.atleast_2d(x)),) + D.shape).copy()
    return M


DENSITIES = {"constant": _constant, "sin_bump": _sin_bump, "gaussian_bump": _gaussian_bump}
TENSORS = {"diag": _diag_tensor}

_CALL = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(?:\((.*)\))?\s*$")


def _parse_call(text):
    m = _CALL.match(text)
    if not m:
        raise ConfigError(f"cannot parse function reference {text!r}")
    name, args = m.group(1), m.group(2)
    values = [float(a) for a in args.split(",")] if args and args.strip() else []
    return name, values


def grid_density(path):
    """Density exponent g read from a GRID file, multilinearly interpolated."""
    values, h, origin, _ = read_grid(path)
    axes = [o + h * np.arange(n) for o, n in zip(origin, values.shape)]
    interp = RegularGridInterpolator(axes, values, method="linear", bounds_error=True)

    def g(x):
        return interp(np.atleast_2d(x))
    return g


def make_spec(kind, R, d, density=None, tensor=None, base_dir=None):
    """Build a MetricSpec from textual density / tensor references."""
    R = float(R)
    d = int(d)
    dens = tens = None
    name = kind
    if kind == "conformal":
        if density is None:
            raise ConfigError("conformal metric needs 'density'")
        if density.startswith("grid:"):
            p = FsPath(density[5:].strip())
            if base_dir is not None and not p.is_absolute():
                p = FsPath(base_dir) / p
            if not p.exists():
                raise ConfigError(f"density grid file not found: {p}")
            dens = grid_density(p)
        else:
            fn, args = _parse_call(density)
            if fn not in DENSITIES:
                raise ConfigError(f"unknown density {fn!r}; known: {sorted(DENSITIES)}")
            dens = DENSITIES[fn](*args)
        name = f"conformal:{density}"
    elif kind == "riemannian":
        if tensor is None:
            raise ConfigError("riemannian metric needs 'tensor'")
        fn, args = _parse_call(tensor)
        if fn not in TENSORS:
            raise ConfigError(f"unknown tensor {fn!r}; known: {sorted(TENSORS)}")
        if fn == "diag" and len(args) != d:
            raise ConfigError(f"diag tensor needs {d} entries, got {len(args)}")
        tens = TENSORS[fn](*args)
        name = f"riemannian:{tensor}"
    spec = MetricSpec(kind, R, d, density=dens, tensor=tens, name=name)
    spec.check()
    return spec


def load_spec(path):
    """Read a metric description (``metric``, ``R``, ``d``, ``density``/``tensor``)."""
    path = FsPath(path)
    kv = parse_kv(path.read_text(encoding="utf-8"), str(path))
    return spec_from_kv({k: v for k, (v, _) in kv.items()}, base_dir=path.parent)


def spec_from_kv(kv, base_dir=None):
    for key in ("metric", "R", "d"):
        if key not in kv:
            raise ConfigError(f"metric description lacks {key!r}")
    try:
        R = float(kv["R"])
        d = int(kv["d"])
    except ValueError as exc:
        raise ConfigError(f"bad R or d: {exc}") from exc
    return make_spec(kv["metric"], R, d, kv.get("density"), kv.get("tensor"), base_dir)


# --------------------------------------------------------------------------
# stencils and metrication bounds


def stencil(order, d):
    """Neighbour offsets: order 1 axis, order 2 axis+diagonal, order 3 16-neighbour (d=2)."""
    if order == 1:
        offs = [e for e in np.vstack([np.eye(d, dtype=int), -np.eye(d, dtype=int)])]
    elif order == 2:
        offs = [np.array(o) for o in np.ndindex(*([3] * d))]
        offs = [o - 1 for o in offs if np.any(o != 1)]
    elif order == 3 and d == 2:
        offs = [o for o in stencil(2, 2)]
        for a, b in ((1, 2), (2, 1)):
            for sa in (1, -1):
                for sb in (1, -1):
                    offs.append(np.array([sa * a, sb * b]))
    else:
        raise ConfigError(f"stencil order {order} not available in d={d}")
    offs = np.array(sorted(tuple(int(x) for x in o) for o in offs), dtype=np.int64)
    return offs


def split_stencil(offs):
    """Map each offset to its lexicographically positive representative."""
    pos = [tuple(o) for o in offs if _lex_positive(o)]
    index = {o: i for i, o in enumerate(pos)}
    half = np.empty(len(offs), np.int64)
    forward = np.empty(len(offs), np.bool_)
    for k, o in enumerate(offs):
        t = tuple(int(x) for x in o)
        if t in index:
            half[k], forward[k] = index[t], True
        else:
            half[k], forward[k] = index[tuple(-x for x in t)], False
    return np.array(pos, dtype=np.int64), half, forward


def _lex_positive(o):
    for x in o:
        if x != 0:
            return x > 0
    return False


def _conic_cost(offs, costs, v):
    res = linprog(costs, A_eq=offs.T.astype(float), b_eq=v, bounds=(0, None), method="highs")
    if res.status != 0:
        return np.inf
    return res.fun


@lru_cache(maxsize=64)
def _anisotropy(order, d, tensor_key):
    offs = stencil(order, d)
    M = np.array(tensor_key, dtype=float).reshape(d, d)
    costs = np.sqrt(np.einsum("ki,ij,kj->k", offs, M, offs))

    def ratio(v):
        v = np.asarray(v, dtype=float)
        return _conic_cost(offs, costs, v) / math.sqrt(v @ M @ v)

    if d == 2:
        th = np.linspace(0.0, 2 * np.pi, 721)[:-1]
        vals = np.array([ratio((math.cos(t), math.sin(t))) for t in th])
        best = vals.max()
        step = th[1] - th[0]
        for i in np.argsort(vals)[-6:]:
            r = minimize_scalar(lambda t: -ratio((math.cos(t), math.sin(t))),
                                bounds=(th[i] - step, th[i] + step), method="bounded",
                                options={"xatol": 1e-10})
            best = max(best, -r.fun)
        return best - 1.0
    n = 1500
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    th = np.pi * (1 + 5 ** 0.5) * k
    dirs = np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], axis=1)
    vals = np.array([ratio(v) for v in dirs])
    return vals.max() - 1.0


def lattice_tolerance(order, d, tensor=None):
    """Worst-case relative overestimate of straight-line length by lattice paths.

    ``tensor`` is a constant metric tensor (identity when None); the bound is the
    supremum over directions of (cheapest stencil decomposition) / (true length).
    """
    M = np.eye(d) if tensor is None else np.asarray(tensor, dtype=float)
    return float(_anisotropy(order, d, tuple(np.round(M, 12).ravel())))


def spec_tolerance(spec, order):
    """tol_lat of a stencil for a metric spec (worst over sampled tensors)."""
    if spec.kind != "riemannian":
        return lattice_tolerance(order, spec.d)
    pts = spec.sample_points(5)
    Ms = spec.tensor(pts)
    keys = {tuple(np.round(M / np.trace(M), 6).ravel()) for M in Ms}
    return max(lattice_tolerance(order, spec.d, np.array(k).reshape(spec.d, spec.d))
               for k in sorted(keys)[:16])


def quantize(W):
    """Round weights onto a dyadic grid so every path sum is exact in float64.

    The quantum is chosen so that any simple lattice path length stays below
    2**52 quanta; sums of quantized weights then commute and associate exactly.
    """
    finite = W[np.isfinite(W)]
    if finite.size == 0:
        return W, 1.0
    bound = float(finite.max()) * W.shape[1] * 2.0
    q = 2.0 ** (math.ceil(math.log2(bound)) - 52)
    out = np.where(np.isfinite(W), np.round(W / q) * q, np.inf)
    return out, q


# --------------------------------------------------------------------------
# paths


@dataclass
class Path:
    points: np.ndarray
    nodes: Optional[np.ndarray] = None
    metric_length: Optional[float] = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if len(self.points) == 0:
            raise ValueError("empty path")
        if len(self.points) > 1 and np.any(np.all(np.diff(self.points, axis=0) == 0, axis=1)):
            raise ValueError("consecutive path vertices must be distinct")

    @property
    def d0_length(self):
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())

    def __len__(self):
        return len(self.points)


def _segment_integral(density_at, a, b, rtol=1e-9, max_level=16):
    """Midpoint rule on [a, b] with doubling until the relative change < rtol."""
    L = float(np.linalg.norm(b - a))
    if L == 0.0:
        return 0.0
    n = 1
    prev = None
    for _ in range(max_level + 1):
        t = (np.arange(n) + 0.5) / n
        pts = a[None, :] + t[:, None] * (b - a)[None, :]
        val = L * float(np.mean(density_at(pts, (b - a) / L)))
        if prev is not None and abs(val - prev) <= rtol * abs(val):
            return val
        prev = val
        n *= 2
    return val


def path_length(spec, p, metric="dbar"):
    """Length of a polyline under D_0 (``"d0"``), the spec metric (``"dbar"``),
    or a conformal field (any object with ``interp(points)``: density e^f)."""
    if not isinstance(p, Path):
        p = Path(p)
    if len(p) < 2:
        if len(p) == 1:
            return 0.0
        raise ValueError("empty path")
    if isinstance(metric, str) and metric == "d0":
        return p.d0_length
    if isinstance(metric, str) and metric == "dbar":
        density_at = spec.unit_density
    elif hasattr(metric, "interp"):
        def density_at(pts, _v):
            return np.exp(metric.interp(pts))
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return float(sum(_segment_integral(density_at, a, b)
                     for a, b in zip(p.points[:-1], p.points[1:])))


# --------------------------------------------------------------------------
# lattice oracle


def lattice_shape(R, h, d):
    n = 2.0 * R / h
    ni = int(round(n))
    if ni < 1 or abs(n - ni) > 1e-9 * max(1.0, n):
        raise ConfigError(f"spacing h={h} does not divide 2R={2 * R}")
    return (ni + 1,) * d


def check_budget(n_nodes, bytes_per_node, budget, what):
    need = float(n_nodes) * bytes_per_node
    if need > budget:
        raise ResourceBudgetError(
            f"{what}: {n_nodes:.3g} lattice nodes need ~{need / 1e9:.3g} GB "
            f"> budget {budget / 1e9:.3g} GB")


class LatticeGraph:
    """Shortest paths on a box lattice with precomputed per-step weights.

    Searches share one set of scratch buffers; a lock serializes them, and
    cached distance maps are read-only once stored.
    """

    def __init__(self, R, d, h, order, W, tol_lat, quantum=None):
        self.R = float(R)
        self.d = int(d)
        self.h = float(h)
        self.order = int(order)
        self.shape = np.array(lattice_shape(R, h, d), dtype=np.int64)
        self.n_nodes = int(np.prod(self.shape))
        self.offsets = stencil(order, d)
        self.half_offsets, self.half, self.forward = split_stencil(self.offsets)
        self.W = np.ascontiguousarray(W, dtype=np.float64)
        self.tol_lat = float(tol_lat)
        self.quantum = quantum
        self.lo = np.full(self.d, -self.R)
        self._lock = threading.Lock()
        self._maps = OrderedDict()
        self._buf = None

    # buffers are allocated lazily and kept for reuse
    def _buffers(self):
        if self._buf is None:
            N = self.n_nodes
            self._buf = (np.full(N, np.inf), np.full(N, -1, np.int64),
                         np.full(N, -1, np.int64), np.empty(N, np.int64),
                         np.zeros(N, np.uint8))
        return self._buf

    @property
    def snap(self):
        return self.h * math.sqrt(self.d) / 2.0

    def node(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if np.any(np.abs(x) > self.R * (1 + 1e-12)):
            raise OutOfBoxError(f"point outside [-R, R]^d: {x[np.argmax(np.abs(x).max(axis=1))].tolist()}")
        idx = np.clip(np.rint((x - self.lo) / self.h).astype(np.int64), 0, self.shape - 1)
        flat = np.ravel_multi_index(tuple(idx.T), tuple(self.shape))
        return int(flat[0]) if single else flat

    def point(self, node):
        idx = np.array(np.unravel_index(np.asarray(node), tuple(self.shape)))
        if idx.ndim == 1:
            return self.lo + self.h * idx
        return (self.lo[:, None] + self.h * idx).T

    def _offset_lut(self):
        if getattr(self, "_lut", None) is None:
            lut = np.full(7 ** self.d, -1, np.int64)
            base = 7 ** np.arange(self.d)
            for k, o in enumerate(self.offsets):
                lut[int(((o + 3) * base).sum())] = k
            self._lut = lut
        return self._lut

    def step_weights(self, nodes):
        """Weights of consecutive steps along a node sequence."""
        nodes = np.asarray(nodes, dtype=np.int64)
        if len(nodes) < 2:
            return np.zeros(0)
        idx = np.array(np.unravel_index(nodes, tuple(self.shape))).T
        o = np.diff(idx, axis=0)
        if np.abs(o).max() > 3:
            raise ValueError("consecutive nodes are not stencil neighbours")
        k = self._offset_lut()[((o + 3) * 7 ** np.arange(self.d)).sum(axis=1)]
        if np.any(k < 0):
            raise ValueError("consecutive nodes are not stencil neighbours")
        src = np.where(self.forward[k], nodes[:-1], nodes[1:])
        return self.W[self.half[k], src]

    def step_weight(self, a, b):
        return float(self.step_weights([a, b])[0])

    def path_weight(self, nodes):
        # quantized weights make this sum exact in any order
        return float(np.sum(self.step_weights(nodes)))

    def _search(self, sources, targets=(), limit=np.inf):
        dist, pred, root, touched, tflag = self._buffers()
        src = np.asarray(sources, dtype=np.int64).reshape(-1)
        tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
        nt = K.lattice_search(self.shape, self.offsets, self.half, self.forward, self.W,
                              src, tgt, float(limit), dist, pred, root, touched, tflag)
        return nt

    def _reset(self, nt, targets=()):
        dist, pred, root, touched, tflag = self._buffers()
        K.reset_buffers(dist, pred, root, tflag, touched, nt)
        tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
        if tgt.size:
            tflag[tgt] = 0

    def distance_map(self, source):
        """Full single-source distance array (cached per source)."""
        source = int(source)
        with self._lock:
            if source in self._maps:
                self._maps.move_to_end(source)
                return self._maps[source]
            nt = self._search([source])
            out = self._buf[0].copy()
            self._reset(nt)
            out.setflags(write=False)
            self._maps[source] = out
            while len(self._maps) > 8:
                self._maps.popitem(last=False)
            return out

    def nearest_sources(self, sources, limit=np.inf):
        """Multi-source distances and the source node each lattice node is closest to."""
        with self._lock:
            nt = self._search(sources, limit=limit)
            dist = self._buf[0].copy()
            root = self._buf[2].copy()
            self._reset(nt)
        return dist, root

    def dists(self, source, targets, limit=np.inf):
        targets = np.asarray(targets, dtype=np.int64).reshape(-1)
        with self._lock:
            nt = self._search([int(source)], targets, limit)
            out = self._buf[0][targets].copy()
            self._reset(nt, targets)
        return out

    def paths(self, source, targets):
        """Shortest node paths from ``source`` to each target, with their lengths."""
        targets = np.asarray(targets, dtype=np.int64).reshape(-1)
        out = []
        with self._lock:
            nt = self._search([int(source)], targets)
            dist, pred = self._buf[0], self._buf[1]
            lengths = dist[targets].copy()
            for t in targets:
                if not np.isfinite(dist[t]):
                    self._reset(nt, targets)
                    raise OracleError(f"node {t} unreachable from {source}")
                seq = [int(t)]
                while seq[-1] != source:
                    seq.append(int(pred[seq[-1]]))
                out.append(np.array(seq[::-1], dtype=np.int64))
            self._reset(nt, targets)
        return out, lengths

    def pair_dists(self, us, vs, limits=None):
        us = np.asarray(us, dtype=np.int64)
        vs = np.asarray(vs, dtype=np.int64)
        lim = np.full(len(us), np.inf) if limits is None else np.asarray(limits, dtype=float)
        with self._lock:
            dist, pred, root, touched, tflag = self._buffers()
            return K.lattice_pair_dists(self.shape, self.offsets, self.half, self.forward,
                                        self.W, us, vs, lim, dist, pred, root, touched, tflag)

    def dist(self, x, y):
        a, b = self.node(x), self.node(y)
        if a == b:
            return 0.0
        # run from the smaller index so the value does not depend on argument order
        s, t = min(a, b), max(a, b)
        return float(self.dists(s, [t])[0])

    def geodesic(self, x, y):
        a, b = self.node(x), self.node(y)
        if a == b:
            return Path(self.point(a)[None, :], nodes=np.array([a]), metric_length=0.0)
        (nodes,), (length,) = self.paths(a, [b])
        return Path(self.point(nodes), nodes=nodes, metric_length=float(length))


def _midpoint_weights(spec, shape, h, half_offsets):
    d = spec.d
    lo = np.full(d, -spec.R)
    N = int(np.prod(shape))
    idx = np.array(np.unravel_index(np.arange(N), tuple(shape))).T
    pts = lo + h * idx
    W = np.full((len(half_offsets), N), np.inf)
    for k, o in enumerate(half_offsets):
        ok = np.all((idx + o >= 0) & (idx + o < shape), axis=1)
        mid = pts[ok] + 0.5 * h * o
        length = float(np.linalg.norm(o)) * h
        if spec.kind == "euclidean":
            W[k, ok] = length
        elif spec.kind == "conformal":
            W[k, ok] = length * np.exp(np.asarray(spec.density(mid), dtype=float))
        else:
            M = spec.tensor(mid)
            _check_spd(M, mid)
            W[k, ok] = h * np.sqrt(np.einsum("i,nij,j->n", o.astype(float), M, o.astype(float)))
    return W


class LatticeOracle(LatticeGraph):
    """Lattice discretization of a MetricSpec (see :func:`lattice_build`)."""

    def __init__(self, spec, h, order, budget=DEFAULT_BUDGET_BYTES):
        if not h > 0:
            raise ConfigError(f"lattice spacing must be positive, got {h}")
        shape = np.array(lattice_shape(spec.R, h, spec.d))
        _, _, _ = split_stencil(stencil(order, spec.d))
        n_half = len(split_stencil(stencil(order, spec.d))[0])
        check_budget(np.prod(shape), SEARCH_BYTES_PER_NODE + 8 * n_half + 8 * spec.d,
                     budget, "metric oracle")
        half_offsets = split_stencil(stencil(order, spec.d))[0]
        W, q = quantize(_midpoint_weights(spec, shape, h, half_offsets))
        super().__init__(spec.R, spec.d, h, order, W, spec_tolerance(spec, order), q)
        self.spec = spec


def lattice_build(spec, h, order=None, budget=DEFAULT_BUDGET_BYTES):
    if order is None:
        order = 3 if spec.d == 2 else 2
    return LatticeOracle(spec, h, order, budget)


# --------------------------------------------------------------------------
# moduli of continuity


@dataclass
class ModulusTable:
    scales: np.ndarray
    phi_values: np.ndarray
    n_sources: int = 0

    def phi(self, ell):
        """Upper-step lookup: phi at the first tabulated scale >= ell."""
        ell = np.asarray(ell, dtype=float)
        i = np.searchsorted(self.scales, ell - 1e-12 * self.scales[-1], side="left")
        i = np.minimum(i, len(self.scales) - 1)
        return self.phi_values[i]

    def psi(self, theta):
        """Largest tabulated scale whose phi does not exceed theta (0 if none)."""
        ok = self.phi_values <= theta
        if not np.any(ok):
            return 0.0
        return float(self.scales[np.flatnonzero(ok)[-1]])

    def scaled(self, factor):
        return ModulusTable(self.scales.copy(), self.phi_values * factor, self.n_sources)

    def sup_ratio(self, lo, hi, shift=0.0):
        """sup of phi(l) / (l - shift) over tabulated l in [lo, hi] (0 for an empty range)."""
        m = (self.scales >= lo) & (self.scales <= hi) & (self.scales > shift)
        if not np.any(m):
            return 0.0
        return float(np.max(self.phi_values[m] / (self.scales[m] - shift)))


def default_scales(oracle):
    top = 2 * oracle.R * math.sqrt(oracle.d)
    n = int(math.ceil(top / oracle.h))
    if n <= 512:
        return oracle.h * np.arange(1, n + 1)
    return np.unique(np.concatenate([oracle.h * np.arange(1, 65),
                                     np.geomspace(64 * oracle.h, top, 448)]))


def moduli(oracle, scales=None, max_sources=150):
    """Tabulate phi(l) = max D(x, y) over lattice pairs with |x - y| <= l.

    Every node is used as a source when the lattice has at most ``max_sources``
    nodes (exhaustive scan); otherwise a regular sub-lattice of sources.
    """
    if scales is None:
        scales = default_scales(oracle)
    scales = np.asarray(scales, dtype=float)
    if scales.size == 0:
        raise ValueError("empty scale list")
    if np.any(np.diff(scales) < 0):
        raise ValueError("scales must be sorted ascending")
    N = oracle.n_nodes
    if N <= max_sources:
        sources = np.arange(N)
    else:
        per_axis = max(2, int(round(max_sources ** (1.0 / oracle.d))))
        ax = np.unique(np.rint(np.linspace(0, oracle.shape[0] - 1, per_axis)).astype(int))
        grids = np.meshgrid(*([ax] * oracle.d), indexing="ij")
        sources = np.ravel_multi_index(tuple(g.ravel() for g in grids), tuple(oracle.shape))
    pts = oracle.point(np.arange(N))
    phi = np.zeros(len(scales))
    for s in sources:
        dm = oracle.distance_map(s)
        d0 = np.linalg.norm(pts - pts[s], axis=1)
        order = np.argsort(d0, kind="stable")
        run = np.maximum.accumulate(dm[order])
        j = np.searchsorted(d0[order], scales * (1 + 1e-12), side="right") - 1
        vals = np.where(j >= 0, run[np.maximum(j, 0)], 0.0)
        np.maximum(phi, vals, out=phi)
    return ModulusTable(scales, phi, len(sources))
