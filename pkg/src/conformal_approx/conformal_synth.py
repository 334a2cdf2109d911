"""Parameter selection and synthesis of the conformal factor f.

f is the sum of an exterior term, built from distance bands around the edge
set E (0 near E, a wall C_0 at distance eta, a plateau C_1 far away), and
per-edge bumps log(w_e / l_e) on the tube cores that make every straight edge
cost exactly its weight.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import _kernels as K_
from .errors import ConfigError, ConstructionError, FormatError
from .formats import format_kv, parse_kv, read_grid, write_grid


@dataclass
class SynthParams:
    eps: float
    R: float
    d: int
    n: int
    m: int
    K: int
    tau: float
    eta: float
    etabar: float
    C0: float
    C1: float
    n_edges: int
    etasmol_bound: float = float("nan")
    psi_eps: float = float("nan")
    edge_sep: float = float("nan")
    param1_rhs: float = float("nan")
    preparam1_rhs: float = float("nan")
    max_w: float = float("nan")

    @property
    def nm(self):
        return self.n * self.m

    def constraints(self):
        """(name, lhs, rhs) with the requirement lhs < rhs (or <= for the weight bound)."""
        return [
            ("etabar_sufficient", self.etabar, 1.0 / (2 * self.nm)),
            ("C0C1", self.C1, self.C0),
            ("etasmol", self.eta, self.etasmol_bound),
            ("etabar_eta", self.etabar, self.eta),
            ("etabar_psi", self.etabar, self.psi_eps / 4),
            ("param1", self.param1_rhs, self.nm + 1e-300),
            ("preparam1", self.preparam1_rhs, self.nm + 1e-300),
            ("tube_separation", self.eta + self.etabar, self.edge_sep / 2),
            ("smallwe", self.max_w, self.eps / 128 * (1 + 1e-12)),
        ]

    def violations(self):
        return [(n, a, b) for n, a, b in self.constraints() if not a < b]

    def to_kv(self, comments=()):
        items = [(f.name, repr(getattr(self, f.name)) if isinstance(getattr(self, f.name), float)
                  else str(getattr(self, f.name))) for f in fields(self)]
        items += [(f"slack.{n}", repr(float(b - a))) for n, a, b in self.constraints()]
        return "".join(f"# {c}\n" for c in comments) + format_kv(items)

    @classmethod
    def from_kv(cls, text, source="<params>"):
        kv = parse_kv(text, source)
        vals = {}
        for f in fields(cls):
            if f.name not in kv:
                raise FormatError(f"{source}: missing parameter {f.name!r}")
            raw, lineno = kv[f.name]
            try:
                vals[f.name] = int(raw) if f.type in ("int", int) else float(raw)
            except ValueError:
                raise FormatError(f"{source}:{lineno}: bad value {raw!r}") from None
        return cls(**vals)


def wall_height(eps, etabar):
    """C_0 = log(eps / (128 etabar))."""
    return math.log(eps / (128 * etabar))


def plateau_height(eps, nm):
    """C_1 = log(eps n m / 64)."""
    return math.log(eps * nm / 64)


def shrink_etabar(eta, psi_eps, nm):
    return min(eta, psi_eps / 4, 1.0 / (4 * nm)) / 2


def choose_params(G, mods, eps, edge_sep, preparam1_rhs=0.0):
    """eta from the edge-ratio bound (capped by the tube separation rule), then
    etabar, C_0 and C_1; every constraint is checked before returning."""
    if not eps > 0:
        raise ConfigError(f"epsilon must be positive, got {eps}")
    ratio = G.ell0 / G.w
    etasmol = eps * float(ratio.min()) / 512
    eta = min(etasmol / 2, edge_sep / 4)
    nm = G.n * G.m
    psi = mods.psi(eps)
    etabar = shrink_etabar(eta, psi, nm)
    C0 = wall_height(eps, etabar)
    C1 = plateau_height(eps, nm)
    param1 = mods.sup_ratio(psi, 2 * G.R, shift=etabar) / (64 * eps)
    p = SynthParams(eps, G.R, G.d, G.n, G.m, G.K, G.tau, eta, etabar, C0, C1, G.n_edges,
                    etasmol, psi, edge_sep, param1, preparam1_rhs, float(G.w.max()))
    bad = p.violations()
    if bad:
        name, a, b = bad[0]
        raise ConstructionError(f"parameter constraint {name} fails: {a!r} !< {b!r}")
    return p


def field_steps(params, hf_factor, base_steps):
    """Steps per axis of the field lattice: h_f <= etabar / hf_factor, and a
    multiple of ``base_steps`` so the metric lattice nests in the field lattice."""
    need = math.ceil(2 * params.R * hf_factor / params.etabar)
    return base_steps * math.ceil(need / base_steps)


@dataclass
class EdgeDistanceField:
    shape: tuple
    h: float
    lo: np.ndarray
    cutoff: float
    r: np.ndarray          # D_0 distance to E, capped at cutoff
    nearest: np.ndarray    # nearest edge id (-1 beyond cutoff)
    end_dist: np.ndarray   # D_0 distance to the nearest edge's endpoints


def grid_points(shape, h, lo):
    idx = np.array(np.unravel_index(np.arange(int(np.prod(shape))), shape)).T
    return lo + h * idx


def edge_distance_field(G, steps, cutoff):
    """Exact point-to-segment distances on the field lattice, within ``cutoff``."""
    h = 2 * G.R / steps
    shape = (steps + 1,) * G.d
    lo = np.full(G.d, -G.R)
    N = int(np.prod(shape))
    r = np.full(N, float(cutoff))
    nearest = np.full(N, -1, np.int64)
    end = np.empty(N)
    A, B = G.segments()
    K_.rasterize_nearest(np.array(shape, np.int64), lo, h, np.ascontiguousarray(A),
                         np.ascontiguousarray(B), float(cutoff), r, nearest, end)
    return EdgeDistanceField(shape, h, lo, float(cutoff), r, nearest, end)


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def f_ext_profile(r, eta, etabar, C0, C1):
    """Exterior term as a function of r = D_0(z, E)."""
    r = np.asarray(r, dtype=float)
    out = np.full(r.shape, float(C1))
    a, b = eta - etabar, eta - etabar / 2
    c, e = eta + etabar / 2, eta + etabar
    out[r <= a] = 0.0
    m = (r > a) & (r < b)
    out[m] = C0 * _smoothstep((r[m] - a) / (etabar / 2))
    out[(r >= b) & (r <= c)] = C0
    m = (r > c) & (r < e)
    out[m] = C0 + (C1 - C0) * _smoothstep((r[m] - c) / (etabar / 2))
    return out


def bump_profile(r, eta):
    """1 on the tube core r <= eta/2, smoothstep down to 0 at r = eta."""
    return 1.0 - _smoothstep((np.asarray(r, dtype=float) - eta / 2) / (eta / 2))


def build_F_ext(params, edf):
    return f_ext_profile(edf.r, params.eta, params.etabar, params.C0, params.C1).reshape(edf.shape)


def edge_log_ratios(G):
    if np.any(~(G.w > 0)) or np.any(~(G.ell0 > 0)):
        raise ConstructionError("edge weights and lengths must be positive")
    return np.log(G.w / G.ell0)


def build_edge_bumps(G, params, edf):
    """Bump log(w_e / l_e) of the nearest edge, blended smoothly with edges
    whose tube distance is within eta/2 of the nearest one."""
    vals = edge_log_ratios(G)
    N = edf.r.size
    num = np.zeros(N)
    den = np.zeros(N)
    A, B = G.segments()
    K_.rasterize_blend(np.array(edf.shape, np.int64), edf.lo, edf.h, np.ascontiguousarray(A),
                       np.ascontiguousarray(B), vals, float(params.eta), params.eta / 2,
                       edf.r, num, den)
    core = np.zeros(N)
    ok = den > 0
    core[ok] = num[ok] / den[ok]
    return (bump_profile(edf.r, params.eta) * core).reshape(edf.shape)


@dataclass
class ConformalField:
    values: np.ndarray
    h: float
    lo: np.ndarray
    params: SynthParams
    graph_digest: str = ""
    edf: EdgeDistanceField = None

    @property
    def d(self):
        return self.values.ndim

    @property
    def shape(self):
        return self.values.shape

    def interp(self, points):
        if getattr(self, "_interp", None) is None:
            axes = [self.lo[a] + self.h * np.arange(n) for a, n in enumerate(self.shape)]
            self._interp = RegularGridInterpolator(axes, self.values, method="linear")
        pts = np.clip(np.atleast_2d(points), self.lo, self.lo + self.h * (np.array(self.shape) - 1))
        return self._interp(pts)

    def export(self, path, comments=(), binary=True):
        write_grid(path, self.values, self.h, self.lo, binary=binary, comments=comments)

    @classmethod
    def load(cls, path, params):
        values, h, lo, comments = read_grid(path)
        f = cls(values, h, lo, params)
        f.comments = comments
        return f


def synthesize(G, params, steps, graph_digest=""):
    """f = edge bumps + exterior term, sampled on a (steps+1)^d lattice."""
    h = 2 * G.R / steps
    if h > params.etabar / 4 * (1 + 1e-12):
        raise ConfigError(f"field spacing {h:.4g} exceeds etabar/4 = {params.etabar / 4:.4g}")
    cutoff = params.eta + params.etabar + 2 * h * math.sqrt(G.d)
    edf = edge_distance_field(G, steps, cutoff)
    F = build_F_ext(params, edf)
    bumps = build_edge_bumps(G, params, edf)
    if F.shape != bumps.shape:
        raise ConstructionError("component grids differ in shape")
    return ConformalField(F + bumps, h, edf.lo, params, graph_digest, edf)
