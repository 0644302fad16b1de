"""Command-line interface.

Subcommands: synth, mesh, pairs, refine, eval, pipeline, validate. The
exit status is 0 only when the command's validators pass, 1 when a
validator fails and 2 on bad input or a stage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .delaunay import Tetrahedralization
from .pairs import PairAssignment, canonical, vertex_visibility
from .pipeline import (PipelineError, RunConfig, assign_pairs, build_mesh, load_bundle, manifest,
                       run_pipeline, save_bundle, work_items, write_outputs)
from .metrics import evaluate
from .refine import refine_loop
from .synthetic import SHAPES, generate_synthetic
from .validation import delaunay_violations, mesh_audit

log = logging.getLogger("facetmvs")

EXIT_OK, EXIT_INVALID, EXIT_ERROR = 0, 1, 2


# ------------------------------------------------------------ config

def _config(args) -> RunConfig:
    base = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text())
        base = base.get("config", base)
    cfg = RunConfig.from_dict(base) if base else RunConfig()
    vis = cfg.vis
    for flag, name in (("alpha_vis", "alpha_vis"), ("quality_weight", "quality_weight"),
                       ("weight_mode", "weight_mode")):
        v = getattr(args, flag, None)
        if v is not None:
            vis = dataclasses.replace(vis, **{name: v})
    rc = cfg.refine
    for flag in ("iterations", "mode", "smooth_weight", "step_size", "classic_k", "window"):
        v = getattr(args, flag, None)
        if v is not None:
            rc = dataclasses.replace(rc, **{flag: v})
    upd = {"vis": vis, "refine": rc}
    if getattr(args, "seed", None) is not None:
        upd["seed"] = args.seed
    if getattr(args, "no_cleanup", False):
        upd["cleanup"] = False
    if getattr(args, "potts", None):
        upd["potts"] = args.potts
    if getattr(args, "no_tie_break", False):
        upd["pair_tie_break"] = False
    if getattr(args, "workers", None):
        upd["workers"] = args.workers
    return dataclasses.replace(cfg, **upd)


def _write_manifest(args, cfg, validators: dict, extra=None):
    if not getattr(args, "manifest", None):
        return
    doc = manifest(cfg, extra={"command": args.command, "validators": validators,
                               "arguments": {k: v for k, v in vars(args).items()
                                             if k not in ("func",) and not callable(v)}})
    if extra:
        doc.update(extra)
    fileio.write_json(args.manifest, doc)


# ---------------------------------------------------------- commands

def cmd_synth(args) -> int:
    cfg = _config(args)
    kwargs = {}
    b = generate_synthetic(args.shape, n_cameras=args.cameras, image_size=(args.width, args.height),
                           n_points=args.points, seed=cfg.seed, position_noise=args.noise,
                           texture_scale=args.texture_scale, **kwargs)
    save_bundle(args.out, b, image_format=args.image_format)
    log.info("wrote %d cameras and %d points to %s", len(b.cameras), len(b.samples), args.out)
    _write_manifest(args, cfg, {"bundle": True})
    return EXIT_OK


def _save_mesh_dir(out, t, mesh, report):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_ply(out / "mesh.ply", mesh, provenance=True)
    fileio.write_csv(out / "sample_vertex.csv", ["sample", "vertex"],
                     [(k, int(v)) for k, v in enumerate(t.input_to_vertex)])
    if report is not None:
        fileio.write_text(out / "singular.csv", report.to_csv())


def _load_mesh_dir(path):
    path = Path(path)
    mesh = fileio.read_ply(path / "mesh.ply")
    _, rows = fileio.read_csv(path / "sample_vertex.csv")
    return mesh, np.array([int(r[1]) for r in rows], dtype=np.int64)


def cmd_mesh(args) -> int:
    cfg = _config(args)
    bundle = load_bundle(args.scene)
    t, mesh, report, counts = build_mesh(bundle, cfg)
    _save_mesh_dir(args.out, t, mesh, report)
    audit = mesh_audit(mesh)
    print(f"singular vertices: {counts['singular_before']} before, "
          f"{counts['singular_after_cleanup']} after cleanup, "
          f"{counts['fallback_duplicates']} fallback duplicates; manifold={audit['manifold']}")
    _write_manifest(args, cfg, {"manifold": audit["manifold"], "outward": audit["outward"]}, {"counts": counts})
    return EXIT_OK if audit["passed"] else EXIT_INVALID


class _Stub:
    """Triangulation stand-in carrying only the sample-to-vertex map."""

    def __init__(self, input_to_vertex):
        self.input_to_vertex = input_to_vertex


def cmd_pairs(args) -> int:
    cfg = _config(args)
    bundle = load_bundle(args.scene)
    mesh, s2v = _load_mesh_dir(args.mesh_dir)
    a = assign_pairs(mesh, bundle, _Stub(s2v), cfg)
    fileio.write_text(args.out, a.to_csv())
    if args.trace:
        fileio.write_text(args.trace, a.trace_csv())
    total = len(a.labels) == mesh.n_faces
    print(f"{mesh.n_faces} facets over {len(set(a.labels.tolist()))} pairs; "
          f"ICM energy {a.energy:.6g} after {len(a.trace) - 1} sweeps")
    _write_manifest(args, cfg, {"total_assignment": total})
    return EXIT_OK if total else EXIT_INVALID


def read_assignment(path, mesh, bundle, s2v) -> PairAssignment:
    header, rows = fileio.read_csv(path)
    if header[:3] != ["facet", "cam_i", "cam_j"]:
        raise fileio.ParseError("expected header facet,cam_i,cam_j", path, line=1)
    pairs = {}
    for k, r in enumerate(rows, start=2):
        try:
            f = int(r[0])
            pair = canonical(int(r[1]), int(r[2]))
        except ValueError as e:
            raise fileio.ParseError(str(e), path, line=k) from None
        if f in pairs or not 0 <= f < mesh.n_faces:
            raise fileio.ParseError(f"facet {f} repeated or outside the mesh", path, line=k)
        pairs[f] = pair
    if len(pairs) != mesh.n_faces:
        missing = min(set(range(mesh.n_faces)) - set(pairs))
        raise fileio.ParseError(f"facet {missing} has no pair", path, line=len(rows) + 2)
    cands = sorted(set(pairs.values()))
    index = {c: i for i, c in enumerate(cands)}
    labels = np.array([index[pairs[f]] for f in range(mesh.n_faces)], dtype=np.int64)
    vis = vertex_visibility(mesh, bundle.samples, s2v)
    empty = np.array([not any(vis[v] for v in tri) for tri in mesh.faces], dtype=bool)
    return PairAssignment(cands, labels, float("nan"), [], empty)


def cmd_refine(args) -> int:
    cfg = _config(args)
    bundle = load_bundle(args.scene)
    mesh, s2v = _load_mesh_dir(args.mesh_dir)
    if cfg.refine.mode == "facetwise":
        if not args.pairs:
            raise SystemExit("refine --mode facetwise needs --pairs")
        a = read_assignment(args.pairs, mesh, bundle, s2v)
    else:
        a = None
    items = work_items(a, bundle, cfg)
    rc = dataclasses.replace(cfg.refine, workers=cfg.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hook = None
    if args.dump_every:
        def hook(k, m):
            if k % args.dump_every == 0:
                fileio.write_ply(out / f"iter_{k:04d}.ply", m)
    res = refine_loop(mesh, bundle.rig, rc, items, on_iteration=hook)
    fileio.write_ply(out / "refined.ply", res.mesh, provenance=True)
    fileio.write_text(out / "refine_trace.csv", res.trace_csv())
    audit = mesh_audit(res.mesh)
    if res.energy:
        print(f"energy {res.energy[0]:.6g} -> {res.energy[-1]:.6g}; "
              f"render events per iteration {res.render_events[0]}")
    _write_manifest(args, cfg, {"manifold": audit["manifold"]})
    return EXIT_OK if audit["manifold"] else EXIT_INVALID


def cmd_eval(args) -> int:
    cfg = _config(args)
    mesh = fileio.read_ply(args.mesh)
    if args.reference:
        ref = fileio.read_ply(args.reference)
        ref_mesh = ref
    else:
        bundle = load_bundle(args.scene)
        if bundle.shape is None:
            raise SystemExit("scene has no analytic shape; pass --reference")
        ref, ref_mesh = bundle.shape, bundle.shape.mesh()
    s = evaluate(mesh, ref, ref_mesh, args.samples, cfg.seed)
    rows = list(s.as_dict().items())
    if args.out:
        fileio.write_csv(args.out, ["metric", "value"], rows)
    for k, v in rows:
        print(f"{k},{v!r}")
    ok = s.accuracy >= 0 and s.completeness >= 0
    _write_manifest(args, cfg, {"metrics_finite": bool(np.isfinite(s.accuracy))})
    return EXIT_OK if ok else EXIT_INVALID


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    if args.scene:
        bundle = load_bundle(args.scene)
    else:
        bundle = generate_synthetic(args.shape, n_cameras=args.cameras, image_size=(args.width, args.height),
                                    n_points=args.points, seed=cfg.seed, position_noise=args.noise,
                                    texture_scale=args.texture_scale)
    res = run_pipeline(bundle, cfg)
    files = write_outputs(args.out, res)
    audit = mesh_audit(res.mesh)
    doc = manifest(cfg, res, extra={"command": "pipeline", "files": files,
                                    "validators": {"manifold": audit["manifold"], "outward": audit["outward"]}})
    fileio.write_json(Path(args.out) / "manifest.json", doc)
    if args.manifest:
        fileio.write_json(args.manifest, doc)
    m = res.metrics
    print(f"faces {m.n_faces}, singular {m.singular_before} -> {m.singular_after_cleanup}, "
          f"accuracy {m.initial_accuracy} -> {m.accuracy}")
    return EXIT_OK if audit["manifold"] else EXIT_INVALID


def cmd_validate(args) -> int:
    results = {}
    if args.mesh:
        audit = mesh_audit(fileio.read_ply(args.mesh))
        results["manifold"] = audit["manifold"]
        results["outward"] = audit["outward"]
        print(json.dumps(audit, sort_keys=True))
    if args.scene:
        bundle = load_bundle(args.scene)
        t = Tetrahedralization.build(bundle.points, seed=args.seed or 0)
        bad = delaunay_violations(t, limit=100)
        t.check_adjacency()
        results["delaunay"] = not bad
        print(f"delaunay: {t.n_cells} cells, {len(bad)} empty-sphere violations")
    if not results:
        raise SystemExit("validate needs --mesh and/or --scene")
    _write_manifest(args, RunConfig(), results)
    for k, v in results.items():
        print(f"{k}: {'pass' if v else 'FAIL'}")
    return EXIT_OK if all(results.values()) else EXIT_INVALID


# ------------------------------------------------------------ parser

def _add_synth_args(p, required_out=True):
    p.add_argument("--shape", choices=sorted(SHAPES), default="sphere")
    p.add_argument("--cameras", type=int, default=8)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--points", type=int, default=600)
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian point position noise")
    p.add_argument("--texture-scale", type=float, default=0.1)


def _add_mesh_args(p):
    p.add_argument("--alpha-vis", type=float)
    p.add_argument("--quality-weight", type=float)
    p.add_argument("--weight-mode", choices=["gaussian", "literal"])
    p.add_argument("--no-cleanup", action="store_true", help="skip the preemptive singular-vertex fixing")


def _add_pair_args(p):
    p.add_argument("--potts", choices=["smooth", "literal"])
    p.add_argument("--no-tie-break", action="store_true", help="break score ties by smallest pair only")


def _add_refine_args(p):
    p.add_argument("--mode", choices=["facetwise", "classic"])
    p.add_argument("--iterations", type=int)
    p.add_argument("--smooth-weight", type=float)
    p.add_argument("--step-size", type=float)
    p.add_argument("--classic-k", type=int)
    p.add_argument("--window", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="facetmvs", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--config", help="JSON RunConfig (or a manifest) to start from")
        p.add_argument("--manifest", help="write the resolved configuration and validator results here")

    p = sub.add_parser("synth", help="generate a synthetic scene")
    common(p)
    _add_synth_args(p)
    p.add_argument("--image-format", choices=["pfm", "png", "pgm"], default="pfm")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mesh", help="Delaunay, min-cut, cleanup, extraction and fallback")
    common(p)
    _add_mesh_args(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("pairs", help="assign a camera pair to every facet")
    common(p)
    _add_pair_args(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--mesh-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("refine", help="photometric refinement")
    common(p)
    _add_refine_args(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--mesh-dir", required=True)
    p.add_argument("--pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-every", type=int, default=0, help="write the mesh every k iterations")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="accuracy and completeness")
    common(p)
    p.add_argument("--mesh", required=True)
    p.add_argument("--scene")
    p.add_argument("--reference")
    p.add_argument("--samples", type=int, default=20000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="all stages end to end")
    common(p)
    _add_synth_args(p)
    _add_mesh_args(p)
    _add_pair_args(p)
    _add_refine_args(p)
    p.add_argument("--scene", help="scene directory; synthesized from the flags when omitted")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("validate", help="manifold, orientation and Delaunay audits")
    common(p)
    p.add_argument("--mesh")
    p.add_argument("--scene")
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except (fileio.ParseError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
