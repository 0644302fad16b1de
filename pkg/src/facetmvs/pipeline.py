"""End-to-end run: mesh, repair, assign pairs, refine, evaluate.

Stage order: Delaunay -> visibility graph -> min-cut -> cleanup ->
surface extraction -> vertex-split fallback -> pair selection ->
refinement -> evaluation. Every stage is timed; timings go to their own
file so the mesh and metrics outputs stay bitwise reproducible.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .delaunay import DelaunayError, Tetrahedralization
from .geometry import CameraRig
from .graphcut import VisParams, min_cut, visibility_graph
from .manifold import CleanupReport, cleanup, extract_surface, singular_vertices, vertex_split_fallback
from .mesh import SurfaceMesh, manifold_defects
from .metrics import evaluate
from .pairs import PairAssignment, Potts, build_candidates, select_pairs, vertex_visibility
from .refine import RefineConfig, RefineResult, classic_items, facetwise_items, refine_loop
from .synthetic import SceneBundle, make_shape

log = logging.getLogger(__name__)

STAGES = ("delaunay", "graph", "mincut", "cleanup", "extract", "fallback", "pairs", "refine", "eval")


class PipelineError(RuntimeError):
    """A stage failure; ``stage`` names where it happened."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


@dataclass
class RunConfig:
    """Every knob of a run; serialized verbatim into the run manifest."""

    seed: int = 0
    vis: VisParams = field(default_factory=VisParams)
    cleanup: bool = True
    potts: str = "smooth"
    mrf_sweeps: int = 50
    pair_tie_break: bool = True
    candidates_per_camera: int = 2
    refine: RefineConfig = field(default_factory=RefineConfig)
    eval_samples: int = 20000
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.vis, dict):
            self.vis = VisParams(**self.vis)
        if isinstance(self.refine, dict):
            self.refine = RefineConfig(**self.refine)
        if self.potts not in ("smooth", "literal"):
            raise ValueError(f"unknown potts variant {self.potts!r}")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    def potts_model(self) -> Potts:
        return Potts.literal() if self.potts == "literal" else Potts()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vis"]["sigma"] = self.vis.sigma
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Metrics:
    accuracy: float | None = None
    accuracy_median: float | None = None
    completeness: float | None = None
    completeness_median: float | None = None
    initial_accuracy: float | None = None
    singular_before: int = 0
    singular_after_cleanup: int = 0
    singular_after_fallback: int = 0
    fallback_duplicates: int = 0
    n_vertices: int = 0
    n_faces: int = 0
    render_events: int = 0
    refine_energy_first: float | None = None
    refine_energy_last: float | None = None
    stage_seconds: dict = field(default_factory=dict)

    def rows(self):
        """Deterministic (name, value) rows; timings are excluded."""
        out = []
        for f in dataclasses.fields(self):
            if f.name == "stage_seconds":
                continue
            v = getattr(self, f.name)
            out.append((f.name, "" if v is None else (repr(float(v)) if isinstance(v, float) else v)))
        return out

    def to_csv(self) -> str:
        return "metric,value\n" + "".join(f"{k},{v}\n" for k, v in self.rows())

    def timing_csv(self) -> str:
        lines = ["stage,seconds"] + [f"{k},{v:.6f}" for k, v in self.stage_seconds.items()]
        lines.append(f"total,{sum(self.stage_seconds.values()):.6f}")
        return "\n".join(lines) + "\n"


@dataclass
class PipelineResult:
    mesh: SurfaceMesh
    initial_mesh: SurfaceMesh
    metrics: Metrics
    cleanup_report: CleanupReport | None
    assignment: PairAssignment | None
    refinement: RefineResult | None
    triangulation: Tetrahedralization
    config: RunConfig
    defects: dict = field(default_factory=dict)

    @property
    def manifold(self) -> bool:
        d = self.defects
        return not (d.get("edges") or d.get("vertices") or d.get("degenerate_faces"))


class _Clock:
    def __init__(self, metrics: Metrics):
        self.metrics = metrics

    def run(self, stage, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except PipelineError:
            raise
        except (ValueError, RuntimeError, DelaunayError) as e:
            raise PipelineError(stage, f"{type(e).__name__}: {e}") from e
        finally:
            self.metrics.stage_seconds[stage] = self.metrics.stage_seconds.get(stage, 0.0) + (
                time.perf_counter() - t0)


def build_mesh(bundle: SceneBundle, cfg: RunConfig, clock: _Clock | None = None):
    """Meshing stages only; returns ``(triangulation, mesh, cleanup_report, counts)``."""
    clock = clock or _Clock(Metrics())
    pts = bundle.points
    t = clock.run("delaunay", Tetrahedralization.build, pts, seed=cfg.seed)
    vis = dataclasses.replace(cfg.vis)
    g = clock.run("graph", visibility_graph, t, {c.id: c for c in bundle.cameras}, bundle.samples, vis,
                  sample_vertices=t.input_to_vertex)
    clock.run("mincut", min_cut, g, t)
    report = None
    if cfg.cleanup:
        report = clock.run("cleanup", cleanup, t)
        before, after = report.before, report.after
    else:
        before = after = clock.run("cleanup", lambda: len(singular_vertices(t)))
    mesh = clock.run("extract", extract_surface, t)
    if mesh.n_faces == 0:
        raise PipelineError("extract", "min-cut labeled no matter cells; the surface is empty")
    fixed = clock.run("fallback", vertex_split_fallback, mesh)
    counts = {"singular_before": before, "singular_after_cleanup": after,
              "fallback_duplicates": fixed.n_vertices - mesh.n_vertices}
    return t, fixed, report, counts


def assign_pairs(mesh: SurfaceMesh, bundle: SceneBundle, t: Tetrahedralization, cfg: RunConfig):
    vis = vertex_visibility(mesh, bundle.samples, t.input_to_vertex)
    cands = build_candidates(bundle.samples, max(c.id for c in bundle.cameras) + 1,
                             cfg.candidates_per_camera)
    cams = bundle.cameras if cfg.pair_tie_break else None
    return select_pairs(mesh, vis, cands, cfg.potts_model(), cfg.mrf_sweeps, cameras=cams)


def work_items(assignment, bundle: SceneBundle, cfg: RunConfig):
    rc = cfg.refine
    if rc.mode == "facetwise":
        return facetwise_items(assignment, rc.symmetric)
    return classic_items(bundle.samples, [c.id for c in bundle.cameras], rc.classic_k)


def run_pipeline(bundle: SceneBundle, cfg: RunConfig | None = None, reference=None,
                 reference_mesh: SurfaceMesh | None = None) -> PipelineResult:
    """Run every stage on ``bundle``.

    ``reference`` (an analytic shape or mesh) enables the evaluation stage;
    by default the bundle's own shape is used when it has one.
    """
    cfg = cfg or RunConfig()
    metrics = Metrics()
    clock = _Clock(metrics)
    t, mesh, report, counts = build_mesh(bundle, cfg, clock)
    for k, v in counts.items():
        setattr(metrics, k, int(v))
    defects = manifold_defects(mesh)
    metrics.singular_after_fallback = len(defects["vertices"])
    if defects["edges"] or defects["vertices"] or defects["degenerate_faces"]:
        raise PipelineError("fallback", f"mesh is not a closed 2-manifold: "
                            f"{len(defects['edges'])} bad edges, {len(defects['vertices'])} bad vertices, "
                            f"{len(defects['degenerate_faces'])} degenerate facets")
    initial = mesh.copy()
    assignment = clock.run("pairs", assign_pairs, mesh, bundle, t, cfg)
    refinement = None
    if cfg.refine.iterations > 0:
        rc = dataclasses.replace(cfg.refine, workers=cfg.workers)
        items = work_items(assignment, bundle, cfg)
        refinement = clock.run("refine", refine_loop, mesh, bundle.rig, rc, items)
        mesh = refinement.mesh
        metrics.render_events = int(sum(refinement.render_events))
        metrics.refine_energy_first = refinement.energy[0]
        metrics.refine_energy_last = refinement.energy[-1]
    defects = manifold_defects(mesh)
    if defects["edges"] or defects["vertices"] or defects["degenerate_faces"]:
        raise PipelineError("refine", "refinement changed the mesh topology")
    metrics.n_vertices, metrics.n_faces = mesh.n_vertices, mesh.n_faces
    ref = reference if reference is not None else bundle.shape
    if ref is not None:
        ref_mesh = reference_mesh
        if ref_mesh is None:
            ref_mesh = ref if isinstance(ref, SurfaceMesh) else ref.mesh()
        scores = clock.run("eval", evaluate, mesh, ref, ref_mesh, cfg.eval_samples, cfg.seed)
        metrics.accuracy = scores.accuracy
        metrics.accuracy_median = scores.accuracy_median
        metrics.completeness = scores.completeness
        metrics.completeness_median = scores.completeness_median
        metrics.initial_accuracy = clock.run("eval", lambda: evaluate(
            initial, ref, ref_mesh, cfg.eval_samples, cfg.seed).accuracy)
    return PipelineResult(mesh, initial, metrics, report, assignment, refinement, t, cfg, defects)


# ------------------------------------------------------------- bundles

def save_bundle(path, bundle: SceneBundle, image_format: str = "pfm") -> None:
    """Write ``scene.json``, ``cameras.txt``, ``points.bin`` and ``images/``.

    PFM stores intensities as float32, so a reloaded scene matches the
    in-memory one to float32 precision; the generator settings in
    ``scene.json`` allow exact regeneration.
    """
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    fileio.write_cameras(root / "cameras.txt", bundle.cameras)
    fileio.write_points(root / "points.bin", bundle.samples)
    names = []
    for cam, img in zip(bundle.cameras, bundle.images):
        name = f"images/cam_{cam.id:04d}.{image_format}"
        fileio.write_image(root / name, img)
        names.append(name)
    meta = dict(bundle.meta)
    meta["images"] = names
    fileio.write_json(root / "scene.json", meta)


def load_bundle(path) -> SceneBundle:
    root = Path(path)
    meta_path = root / "scene.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    cams = fileio.read_cameras(root / "cameras.txt")
    pts_bin = root / "points.bin"
    samples = fileio.read_points(pts_bin) if pts_bin.exists() else fileio.read_points_text(root / "points.txt")
    names = meta.get("images") or [f"images/cam_{c.id:04d}.pfm" for c in cams]
    images = [fileio.read_image(root / n) for n in names]
    shape = None
    if "shape" in meta:
        shape = make_shape(meta["shape"], **meta.get("shape_params", {}))
    return SceneBundle(cams, images, samples, shape, None, meta)


def manifest(cfg: RunConfig, result: PipelineResult | None = None, extra: dict | None = None) -> dict:
    """Resolved configuration plus the interpretation flags of the run."""
    from . import __version__

    out = {
        "version": __version__,
        "config": cfg.to_dict(),
        "interpretations": {
            "potts": ("0.9 same / 0.1 different" if cfg.potts == "smooth"
                      else "literal 0.1 same / 0.9 different"),
            "visibility_weight": cfg.vis.weight_mode,
            "pair_tie_break": "view angle" if cfg.pair_tie_break else "smallest pair",
        },
    }
    if result is not None:
        out["validators"] = {"manifold": result.manifold}
        out["metrics"] = dict(result.metrics.rows())
    if extra:
        out.update(extra)
    return out


def write_outputs(out_dir, result: PipelineResult, write_initial: bool = True) -> dict:
    """Mesh PLY, metrics/timing CSVs and per-stage CSV reports."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    files = {}
    fileio.write_ply(root / "mesh.ply", result.mesh)
    files["mesh"] = "mesh.ply"
    if write_initial:
        fileio.write_ply(root / "initial.ply", result.initial_mesh)
        files["initial"] = "initial.ply"
    fileio.write_text(root / "metrics.csv", result.metrics.to_csv())
    fileio.write_text(root / "timing.csv", result.metrics.timing_csv())
    files.update(metrics="metrics.csv", timing="timing.csv")
    if result.cleanup_report is not None:
        fileio.write_text(root / "singular.csv", result.cleanup_report.to_csv())
        files["singular"] = "singular.csv"
    if result.assignment is not None:
        fileio.write_text(root / "pairs.csv", result.assignment.to_csv())
        fileio.write_text(root / "mrf_trace.csv", result.assignment.trace_csv())
        files.update(pairs="pairs.csv", mrf_trace="mrf_trace.csv")
    if result.refinement is not None:
        fileio.write_text(root / "refine_trace.csv", result.refinement.trace_csv())
        files["refine_trace"] = "refine_trace.csv"
    return files
