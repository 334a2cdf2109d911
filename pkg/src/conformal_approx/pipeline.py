"""Run configuration, resource preflight and the end-to-end stages."""
from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path as FsPath

import numpy as np

from .conformal_synth import SynthParams, choose_params, field_steps, synthesize, ConformalField
from .errors import ConfigError, FormatError, ResourceBudgetError
from .formats import parse_kv
from .geodesic_graph import WeightedGraph, build_graph, chain_separation, choose_grid
from .metric_core import (DEFAULT_BUDGET_BYTES, SEARCH_BYTES_PER_NODE, lattice_build, moduli,
                          spec_from_kv, split_stencil, stencil)
from .verify import run_checks

COMMANDS = ("synth", "verify", "export-field", "export-graph", "report")
PHI_SAFETY = 1.1
# per field node: f, distance, nearest id, endpoint distance, two blend buffers, two bands
FIELD_BYTES_PER_NODE = 8 * 8


@dataclass
class RunConfig:
    metric: str = "euclidean"
    R: float = 1.0
    d: int = 2
    density: str = ""
    tensor: str = ""
    eps: float = 0.25
    steps: int = 60               # metric lattice: h = R / steps
    order: int = 0                # 0 = 3 in d=2, 2 in d=3
    order_e: int = 0
    hf_factor: float = 8.0        # h_f <= etabar / hf_factor
    he_refine: int = 1            # h_e = h_f / he_refine
    c_pair: int = 2
    max_retries: int = 6
    graph_pairs: int = 1024
    trapped_sources: int = 25
    trapped_targets: int = 20
    highway_samples: int = 1024
    theorem_pairs: int = 1024
    seed: int = 0
    out: str = "out"
    budget_bytes: float = DEFAULT_BUDGET_BYTES
    threads: int = 0
    field_format: str = "binary"
    command: str = "synth"
    base_dir: str = field(default=".", repr=False)

    # keys that do not affect constructed artifacts
    RUNTIME_KEYS = ("seed", "out", "threads", "command", "base_dir", "graph_pairs",
                    "trapped_sources", "trapped_targets", "highway_samples", "theorem_pairs")

    def __post_init__(self):
        self.validate()

    @property
    def h(self):
        return self.R / self.steps

    def stencil_order(self):
        return self.order or (3 if self.d == 2 else 2)

    def stencil_order_e(self):
        return self.order_e or self.stencil_order()

    def validate(self):
        if not (isinstance(self.eps, (int, float)) and self.eps > 0 and math.isfinite(self.eps)):
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if not self.R > 0:
            raise ConfigError(f"R must be positive, got {self.R}")
        if self.d not in (2, 3):
            raise ConfigError(f"d must be 2 or 3, got {self.d}")
        if self.steps < 1:
            raise ConfigError("steps must be a positive integer")
        if self.hf_factor < 4:
            raise ConfigError("hf_factor must be at least 4 (h_f <= etabar/4)")
        if self.he_refine < 1:
            raise ConfigError("he_refine must be >= 1 (h_e <= h_f)")
        if self.c_pair < 1:
            raise ConfigError("c_pair must be >= 1")
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}; expected one of {COMMANDS}")
        if self.field_format not in ("binary", "text"):
            raise ConfigError("field_format must be 'binary' or 'text'")
        if self.metric not in ("euclidean", "conformal", "riemannian"):
            raise ConfigError(f"unknown metric {self.metric!r}")

    def spec(self):
        kv = {"metric": self.metric, "R": self.R, "d": self.d}
        if self.density:
            kv["density"] = self.density
        if self.tensor:
            kv["tensor"] = self.tensor
        return spec_from_kv(kv, base_dir=self.base_dir)

    def digest(self):
        items = [(f.name, getattr(self, f.name)) for f in fields(self)
                 if f.name not in self.RUNTIME_KEYS]
        text = "\n".join(f"{k}={v!r}" for k, v in items)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def sample_counts(self):
        src = max(1, int(round(math.sqrt(self.graph_pairs))))
        th = max(1, int(round(math.sqrt(self.theorem_pairs))))
        return {"graph_sources": src, "graph_targets": src, "theorem_sources": th,
                "theorem_targets": th, "trapped_sources": self.trapped_sources,
                "trapped_targets": self.trapped_targets,
                "highway_samples": self.highway_samples, "he_refine": self.he_refine,
                "order_e": self.stencil_order_e(), "budget": self.budget_bytes}


def _coerce(name, raw, lineno, source):
    types = {f.name: f.type for f in fields(RunConfig)}
    if name not in types or name == "base_dir":
        raise ConfigError(f"{source}:{lineno}: unknown key {name!r}")
    t = types[name]
    try:
        if t in ("int", int):
            return int(raw)
        if t in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{source}:{lineno}: {name} expects a number, got {raw!r}") from None
    return raw


def parse_config(text, source="<config>", base_dir="."):
    try:
        kv = parse_kv(text, source)
    except FormatError as exc:
        raise ConfigError(str(exc)) from None
    vals = {}
    lines = {}
    for k, (v, lineno) in kv.items():
        vals[k] = _coerce(k, v, lineno, source)
        lines[k] = lineno
    try:
        return RunConfig(**vals, base_dir=str(base_dir))
    except ConfigError as exc:
        for k, ln in lines.items():
            if str(exc).startswith(k + " "):
                raise ConfigError(f"{source}:{ln}: {exc}") from None
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path, **overrides):
    path = FsPath(path)
    text = path.read_text(encoding="utf-8")
    cfg = parse_config(text, str(path), path.parent)
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# preflight


def estimate(cfg, spec=None):
    """Lower bounds on the lattice sizes the construction will need.

    The coarse cube diameter bound forces n >= (sqrt(d) + 1) R rho_min 64 / eps;
    the tube width then satisfies eta <= eps / (1024 rho_min) and
    etabar <= min(eta, 1 / (4 n)) / 2, which fixes the field lattice spacing.
    """
    spec = spec or cfg.spec()
    rho_min, rho_max = spec.density_bounds()
    d, R, eps = cfg.d, cfg.R, cfg.eps
    n_min = (math.sqrt(d) + 1) * R * rho_min * 64 / eps
    eta_max = eps / (1024 * rho_min)
    etabar_max = min(eta_max, 1.0 / (4 * max(n_min, 1e-300))) / 2
    steps_f = math.ceil(2 * R * cfg.hf_factor / etabar_max) * cfg.he_refine
    nodes_f = float(steps_f + 1) ** d
    field_bytes = field_bytes_for(cfg, steps_f)
    n_half_m = len(split_stencil(stencil(cfg.stencil_order(), d))[0])
    nodes_m = float(2 * cfg.steps + 1) ** d
    metric_bytes = nodes_m * (SEARCH_BYTES_PER_NODE + 8 * n_half_m + 8 * d)
    return {"rho_min": rho_min, "rho_max": rho_max, "n_min": n_min, "eta_max": eta_max,
            "etabar_max": etabar_max, "field_steps_min": steps_f, "field_nodes_min": nodes_f,
            "field_bytes_min": field_bytes, "metric_nodes": nodes_m, "metric_bytes": metric_bytes,
            "lattice_ok": cfg.steps >= n_min}


def field_bytes_for(cfg, steps):
    """Memory for a field lattice with ``steps`` intervals per axis."""
    n_half = len(split_stencil(stencil(cfg.stencil_order_e(), cfg.d))[0])
    return float(steps + 1) ** cfg.d * (FIELD_BYTES_PER_NODE + SEARCH_BYTES_PER_NODE + 8 * n_half)


def check_field_budget(cfg, steps, params):
    need = field_bytes_for(cfg, steps)
    if need > cfg.budget_bytes:
        raise ResourceBudgetError(
            f"eps={cfg.eps}: etabar={params.etabar:.3g} needs a {steps + 1}^{cfg.d} field lattice, "
            f"about {need / 1e9:.3g} GB > budget {cfg.budget_bytes / 1e9:.3g} GB")


def preflight(cfg, spec=None):
    est = estimate(cfg, spec)
    need = max(est["field_bytes_min"], est["metric_bytes"])
    if need > cfg.budget_bytes:
        raise ResourceBudgetError(
            f"eps={cfg.eps}: the conformal factor needs a lattice of at least "
            f"{est['field_nodes_min']:.3g} nodes (spacing <= {2 * cfg.R / est['field_steps_min']:.3g}),"
            f" about {need / 1e9:.3g} GB > budget {cfg.budget_bytes / 1e9:.3g} GB")
    if not est["lattice_ok"]:
        raise ConfigError(
            f"steps={cfg.steps} is too coarse: the coarse grid needs n >= {est['n_min']:.1f} "
            "subdivisions, so steps must be at least that large")
    return est


# --------------------------------------------------------------------------
# stages


@dataclass
class Artifacts:
    cfg: RunConfig
    spec: object = None
    metric: object = None
    mods: object = None
    partition: object = None
    graph: WeightedGraph = None
    params: SynthParams = None
    field: ConformalField = None
    estimate: dict = None
    report: object = None


def build_metric(cfg, spec=None):
    spec = spec or cfg.spec()
    metric = lattice_build(spec, cfg.h, cfg.stencil_order(), cfg.budget_bytes)
    mods = moduli(metric).scaled(PHI_SAFETY)
    return spec, metric, mods


def synth(cfg):
    """Build the graph, the parameters and the conformal factor."""
    spec = cfg.spec()
    est = preflight(cfg, spec)
    spec, metric, mods = build_metric(cfg, spec)
    part = choose_grid(metric, mods, cfg.eps)
    G = build_graph(metric, part, cfg.eps, cfg.c_pair, max_retries=cfg.max_retries)
    sep = float(G.info["edge_sep_d0"])
    params = choose_params(G, mods, cfg.eps, sep, part.nm_required)
    steps = field_steps(params, cfg.hf_factor, 2 * cfg.steps)
    check_field_budget(cfg, steps * cfg.he_refine, params)
    field_ = synthesize(G, params, steps, G.digest())
    return Artifacts(cfg, spec, metric, mods, part, G, params, field_, est)


def artifact_paths(cfg):
    out = FsPath(cfg.out)
    return {"graph": out / "graph.txt", "field": out / "field.grid",
            "params": out / "params.txt", "report": out / "report.txt"}


def _tag(cfg):
    return f"config={cfg.digest()}"


def write_artifacts(art, which=("graph", "field", "params")):
    cfg = art.cfg
    paths = artifact_paths(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    tag = _tag(cfg)
    if "graph" in which:
        art.graph.export(paths["graph"], comments=[tag])
    if "field" in which:
        art.field.export(paths["field"], comments=[tag, f"graph={art.graph.digest()}"],
                         binary=cfg.field_format == "binary")
    if "params" in which:
        paths["params"].write_text(art.params.to_kv([tag]), encoding="utf-8")
    return paths


def _file_tag(path):
    with open(path, "rb") as fh:
        for raw in fh:
            line = raw.decode("utf-8", errors="replace").strip()
            if not line.startswith("#"):
                break
            if line[1:].strip().startswith("config="):
                return line[1:].strip()
    return None


def load_artifacts(cfg):
    """Read graph, field and params from the output directory; None if absent.

    All three must carry the configuration's tag."""
    paths = artifact_paths(cfg)
    present = [paths[k].exists() for k in ("graph", "field", "params")]
    if not any(present):
        return None
    if not all(present):
        raise ConfigError(f"{cfg.out}: incomplete artifact set (need graph, field and params)")
    want = _tag(cfg)
    tags = {k: _file_tag(paths[k]) for k in ("graph", "field", "params")}
    if len(set(tags.values())) != 1:
        raise ConfigError(f"{cfg.out}: graph, field and params come from different configurations: {tags}")
    if tags["graph"] != want:
        raise ConfigError(f"{cfg.out}: artifacts were built with {tags['graph']}, current {want}")
    G = WeightedGraph.load(paths["graph"])
    params = SynthParams.from_kv(paths["params"].read_text(encoding="utf-8"), str(paths["params"]))
    field_ = ConformalField.load(paths["field"], params)
    gtag = [c for c in field_.comments if c.startswith("graph=")]
    if gtag and gtag[0] != f"graph={G.digest()}":
        raise ConfigError(f"{cfg.out}: field was synthesized for a different graph")
    return G, params, field_


def verify(cfg, art=None):
    if art is None:
        loaded = load_artifacts(cfg)
        if loaded is None:
            art = synth(cfg)
            write_artifacts(art)
        else:
            spec, metric, mods = build_metric(cfg)
            G, params, field_ = loaded
            art = Artifacts(cfg, spec, metric, mods, None, G, params, field_)
    art.report = run_checks(art.graph, art.field, art.metric, art.params, cfg.seed,
                            samples=cfg.sample_counts())
    paths = artifact_paths(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    paths["report"].write_text(art.report.to_text([_tag(cfg)]), encoding="utf-8")
    return art
