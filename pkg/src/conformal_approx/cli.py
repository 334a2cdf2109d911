"""Command line driver: ``conformal-approx --config run.cfg --command verify``."""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConformalApproxError, ResourceBudgetError
from .pipeline import (COMMANDS, RunConfig, artifact_paths, load_artifacts, load_config,
                       synth, verify, write_artifacts)

log = logging.getLogger("conformal_approx")

EXIT_OK, EXIT_CHECKS, EXIT_CONFIG, EXIT_BUDGET = 0, 1, 2, 3


def _graph_and_field(cfg):
    loaded = load_artifacts(cfg)
    if loaded is not None:
        return loaded
    art = synth(cfg)
    write_artifacts(art)
    return art.graph, art.params, art.field


def cmd_synth(cfg):
    art = synth(cfg)
    paths = write_artifacts(art)
    for k in ("graph", "field", "params"):
        print(f"wrote {paths[k]}")
    return EXIT_OK


def cmd_verify(cfg):
    art = verify(cfg)
    rep = art.report
    for r in rep.records:
        tag = "info" if r.informational else ("PASS" if r.passed else "FAIL")
        print(f"{tag:4s} {r.name:18s} excess={r.excess:.6g} margin={r.margin:.6g}")
    print(rep.summary())
    if not rep.passed:
        print(f"worst failing check: {rep.worst().name}", file=sys.stderr)
        return EXIT_CHECKS
    return EXIT_OK


def cmd_export_field(cfg):
    """Text GRID copy of f plus per-node edge distances, for plotting."""
    G, params, field_ = _graph_and_field(cfg)
    out = artifact_paths(cfg)["field"].with_name("field_export.grid")
    field_.export(out, comments=[f"config={cfg.digest()}", f"graph={G.digest()}"], binary=False)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_export_graph(cfg):
    G, _, _ = _graph_and_field(cfg)
    out = artifact_paths(cfg)["graph"].with_name("graph_export.txt")
    G.export(out, comments=[f"config={cfg.digest()}"])
    seg = out.with_name("edges.tsv")
    A, B = G.segments()
    with open(seg, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join([f"a{i}" for i in range(G.d)] + [f"b{i}" for i in range(G.d)]
                           + ["w", "ell0"]) + "\n")
        for a, b, w, l in zip(A, B, G.w, G.ell0):
            fh.write("\t".join(repr(float(x)) for x in (*a, *b, w, l)) + "\n")
    print(f"wrote {out}")
    print(f"wrote {seg}")
    return EXIT_OK


def cmd_report(cfg):
    """Tabulate an existing report (running verification first if none exists)."""
    path = artifact_paths(cfg)["report"]
    if not path.exists():
        verify(cfg)
    from .formats import parse_kv
    kv = parse_kv(path.read_text(encoding="utf-8"), str(path))
    names = sorted({k.split(".")[1] for k in kv if k.startswith("check.")},
                   key=lambda n: min(ln for k, (_, ln) in kv.items() if k.startswith(f"check.{n}.")))
    cols = ("samples", "excess", "budget", "margin", "informational", "pass")
    tsv = path.with_name("report.tsv")
    rows = ["\t".join(("check",) + cols)]
    for n in names:
        rows.append("\t".join([n] + [kv.get(f"check.{n}.{c}", ("", 0))[0] for c in cols]))
    tsv.write_text("\n".join(rows) + "\n", encoding="utf-8")
    print("\n".join(rows))
    ok = all(kv.get(f"check.{n}.pass", ("false", 0))[0] == "true"
             or kv.get(f"check.{n}.informational", ("false", 0))[0] == "true" for n in names)
    return EXIT_OK if ok else EXIT_CHECKS


HANDLERS = {"synth": cmd_synth, "verify": cmd_verify, "export-field": cmd_export_field,
            "export-graph": cmd_export_graph, "report": cmd_report}


def build_parser():
    p = argparse.ArgumentParser(prog="conformal-approx",
                                description="Approximate a length metric by e^f times the Euclidean metric.")
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--command", choices=COMMANDS, help="overrides the config's command")
    p.add_argument("--seed", type=int, help="sampling seed (default 0)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="worker count (accepted; searches run sequentially)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(cfg):
    return HANDLERS[cfg.command](cfg)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = {"command": args.command, "seed": args.seed, "out": args.out, "threads": args.threads}
    try:
        if args.config:
            cfg = load_config(args.config, **overrides)
        else:
            cfg = RunConfig(**{k: v for k, v in overrides.items() if v is not None})
        return run(cfg)
    except ResourceBudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename}", file=sys.stderr)
        return EXIT_CONFIG
    except ConformalApproxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
