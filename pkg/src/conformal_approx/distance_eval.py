"""Distances and geodesics of e^f D_0 on the field lattice; geodesic trapping."""
from __future__ import annotations

import math

import numpy as np

from . import _kernels as K_
from .errors import ConfigError, OracleError
from .metric_core import (DEFAULT_BUDGET_BYTES, SEARCH_BYTES_PER_NODE, LatticeGraph,
                          Path, check_budget, quantize, spec_tolerance, split_stencil,
                          stencil, MetricSpec)


def _refine(field, k):
    """Field values on a lattice k times finer (multilinear interpolation)."""
    if k == 1:
        return field.values
    n = (np.array(field.shape) - 1) * k + 1
    axes = [field.lo[a] + field.h / k * np.arange(n[a]) for a in range(field.d)]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    return field.interp(pts).reshape(tuple(n))


def conformal_weights(values, h, half_offsets):
    """Step weight |o| h exp(f(midpoint)); the midpoint value averages the
    corner samples along the axes where the offset is odd."""
    shape = np.array(values.shape)
    d = len(shape)
    N = int(np.prod(shape))
    W = np.full((len(half_offsets), N), np.inf)
    for k, o in enumerate(half_offsets):
        lo = np.maximum(0, -o)
        hi = shape - np.maximum(0, o)            # exclusive
        odd = [a for a in range(d) if o[a] % 2]
        acc = None
        corners = list(np.ndindex(*([2] * len(odd)))) or [()]
        for bits in corners:
            c = o // 2                               # floor for negative odd too
            c = c.copy()
            for a, bit in zip(odd, bits):
                c[a] = (o[a] - 1) // 2 + bit
            block = values[tuple(slice(lo[a] + c[a], hi[a] + c[a]) for a in range(d))]
            acc = block.copy() if acc is None else acc + block
        fmid = acc / len(corners)
        Wk = W[k].reshape(tuple(shape))
        Wk[tuple(slice(lo[a], hi[a]) for a in range(d))] = float(np.linalg.norm(o)) * h * np.exp(fmid)
    return W


class ConformalOracle(LatticeGraph):
    """Shortest paths for e^f D_0 on a lattice of spacing h_e = h_f / refine."""

    def __init__(self, field, refine=1, order=None, budget=DEFAULT_BUDGET_BYTES):
        if int(refine) != refine or refine < 1:
            raise ConfigError("h_e must be h_f divided by a positive integer")
        refine = int(refine)
        d = field.d
        order = (3 if d == 2 else 2) if order is None else order
        offs = stencil(order, d)
        half_offsets = split_stencil(offs)[0]
        n_nodes = float(np.prod((np.array(field.shape) - 1) * refine + 1))
        check_budget(n_nodes, SEARCH_BYTES_PER_NODE + 8 * len(half_offsets) + 8, budget,
                     "conformal oracle")
        values = _refine(field, refine)
        h = field.h / refine
        W, q = quantize(conformal_weights(values, h, half_offsets))
        R = -float(field.lo[0])
        super().__init__(R, d, h, order, W, spec_tolerance(MetricSpec("euclidean", R, d), order), q)
        self.field = field
        self.values = values
        self.f_max = float(values.max())


def conformal_oracle(field, refine=1, order=None, budget=DEFAULT_BUDGET_BYTES):
    return ConformalOracle(field, refine, order, budget)


def ef_dist(oracle, x, y):
    return oracle.dist(x, y)


def ef_geodesic(oracle, x, y):
    return oracle.geodesic(x, y)


class EdgeIndex:
    """Uniform bin index over the straight edges for exact distance-to-E queries."""

    def __init__(self, G, reach):
        A, B = G.segments()
        self.A = np.ascontiguousarray(A)
        self.B = np.ascontiguousarray(B)
        self.reach = float(reach)
        lo = np.minimum(A, B) - reach
        hi = np.maximum(A, B) + reach
        self.bin_lo = np.full(G.d, -G.R - reach)
        self.bin_size = float(max(2 * reach, 1e-9))
        self.bin_shape = np.ceil((2 * G.R + 2 * reach) / self.bin_size).astype(np.int64) + 1
        self.bin_shape = np.full(G.d, self.bin_shape, np.int64)
        c0 = np.floor((lo - self.bin_lo) / self.bin_size).astype(np.int64)
        c1 = np.floor((hi - self.bin_lo) / self.bin_size).astype(np.int64)
        c0 = np.clip(c0, 0, self.bin_shape - 1)
        c1 = np.clip(c1, 0, self.bin_shape - 1)
        cells, segs = [], []
        for e in range(len(A)):
            rng = [np.arange(a, b + 1) for a, b in zip(c0[e], c1[e])]
            g = np.stack([x.ravel() for x in np.meshgrid(*rng, indexing="ij")], axis=1)
            cells.append(np.ravel_multi_index(tuple(g.T), tuple(self.bin_shape)))
            segs.append(np.full(len(g), e))
        cells = np.concatenate(cells)
        segs = np.concatenate(segs)
        order = np.lexsort((segs, cells))
        self.bin_items = segs[order].astype(np.int64)
        counts = np.bincount(cells, minlength=int(np.prod(self.bin_shape)))
        self.bin_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def distances(self, points):
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        return K_.points_to_segments(pts, self.A, self.B, self.bin_lo, self.bin_size,
                                     self.bin_shape, self.bin_ptr, self.bin_items, self.reach)


def check_trapped(path, index, eta, etabar, h_e):
    """Whether every vertex of ``path`` stays within eta + etabar/2 + h_e sqrt(d) of E."""
    pts = path.points if isinstance(path, Path) else np.atleast_2d(path)
    d = pts.shape[1]
    r, _ = index.distances(pts)
    slack = 1e-12 * max(1.0, eta)
    if r[0] > eta + slack or r[-1] > eta + slack:
        raise OracleError("path endpoints must lie within eta of the edge set")
    band = eta + etabar / 2 + h_e * math.sqrt(d)
    exc = float(np.max(r))
    return {"inside": bool(exc <= band), "max_excursion": exc, "band": band}


def write_path(fh_or_path, path, comments=()):
    lines = [f"# {c}" for c in comments]
    ml = path.metric_length if path.metric_length is not None else float("nan")
    lines.append(f"PATH {len(path)} {float(ml)!r} {path.d0_length!r}")
    for p in path.points:
        lines.append("P " + " ".join(repr(float(x)) for x in p))
    text = "\n".join(lines) + "\n"
    if hasattr(fh_or_path, "write"):
        fh_or_path.write(text)
    else:
        with open(fh_or_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def read_path(path):
    from .errors import FormatError
    pts, header = [], None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            try:
                if tok[0] == "PATH":
                    header = (int(tok[1]), float(tok[2]), float(tok[3]))
                elif tok[0] == "P":
                    pts.append([float(x) for x in tok[1:]])
                else:
                    raise ValueError(f"unknown record {tok[0]!r}")
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if header is None or header[0] != len(pts):
        raise FormatError(f"{path}: PATH header missing or count mismatch")
    return Path(np.array(pts), metric_length=header[1])
