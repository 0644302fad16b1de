"""scikit-learn style wrappers around the reconstruction stages.

Each estimator keeps its hyperparameters as constructor arguments, so
``get_params``/``set_params``/``clone`` work, and stores fitted state in
attributes with a trailing underscore.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .delaunay import INF, Label, Tetrahedralization
from .geometry import Camera, CameraRig, PointSample
from .graphcut import VisParams, min_cut, visibility_graph
from .manifold import cleanup, extract_surface, singular_vertices, vertex_split_fallback
from .mesh import SurfaceMesh
from .pairs import Potts, build_candidates, select_pairs, vertex_visibility
from .refine import RefineConfig, classic_items, facetwise_items, refine_loop


def check_points(X) -> np.ndarray:
    """Finite float array of shape (n, 3)."""
    X = check_array(X, dtype=np.float64, ensure_all_finite=True, ensure_min_samples=1)
    if X.shape[1] != 3:
        raise ValueError(f"expected points of shape (n, 3), got {X.shape}")
    return X


def check_visibility(visibility, n_points: int, camera_ids) -> list[frozenset]:
    """One non-empty set of known camera ids per point."""
    if visibility is None or len(visibility) != n_points:
        raise ValueError("need one visibility set per point")
    ids = set(camera_ids)
    out = []
    for k, v in enumerate(visibility):
        s = frozenset(int(c) for c in v)
        if not s:
            raise ValueError(f"point {k} is seen by no camera")
        if not s <= ids:
            raise ValueError(f"point {k} references unknown cameras {sorted(s - ids)}")
        out.append(s)
    return out


def check_cameras(cameras) -> list[Camera]:
    cams = list(cameras or [])
    if not cams or not all(isinstance(c, Camera) for c in cams):
        raise ValueError("cameras must be a non-empty list of Camera")
    if len({c.id for c in cams}) != len(cams):
        raise ValueError("camera ids must be unique")
    return cams


def check_mesh(mesh) -> SurfaceMesh:
    if not isinstance(mesh, SurfaceMesh):
        raise TypeError("expected a SurfaceMesh")
    if mesh.n_faces == 0:
        raise ValueError("mesh has no facets")
    if not np.all(np.isfinite(mesh.vertices)):
        raise ValueError("mesh has non-finite vertices")
    return mesh


class DelaunayMesher(BaseEstimator):
    """Visibility min-cut surface over the Delaunay tetrahedralization.

    ``fit(X, visibility=..., cameras=...)`` builds the watertight manifold
    ``mesh_``; ``predict`` labels query points as matter (1) or free (0).
    """

    def __init__(self, alpha_vis=32.0, quality_weight=1.0, weight_mode="gaussian",
                 sink_offset_mult=3.0, cleanup=True, seed=0):
        self.alpha_vis = alpha_vis
        self.quality_weight = quality_weight
        self.weight_mode = weight_mode
        self.sink_offset_mult = sink_offset_mult
        self.cleanup = cleanup
        self.seed = seed

    def fit(self, X, y=None, visibility=None, cameras=None):
        X = check_points(X)
        cams = check_cameras(cameras)
        vis = check_visibility(visibility, len(X), [c.id for c in cams])
        samples = [PointSample(tuple(p), v) for p, v in zip(X, vis)]
        params = VisParams(alpha_vis=self.alpha_vis, quality_weight=self.quality_weight,
                           weight_mode=self.weight_mode, sink_offset_mult=self.sink_offset_mult)
        t = Tetrahedralization.build(X, seed=self.seed)
        g = visibility_graph(t, {c.id: c for c in cams}, samples, params,
                             sample_vertices=t.input_to_vertex)
        min_cut(g, t)
        self.singular_before_ = len(singular_vertices(t))
        self.cleanup_report_ = cleanup(t) if self.cleanup else None
        raw = extract_surface(t)
        if raw.n_faces == 0:
            raise ValueError("min-cut labeled no matter cells")
        self.mesh_ = vertex_split_fallback(raw)
        self.triangulation_ = t
        self.sample_vertices_ = np.asarray(t.input_to_vertex, dtype=np.int64)
        self.samples_ = samples
        self.n_features_in_ = 3
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "mesh_")
        X = check_points(X)
        t = self.triangulation_
        out = np.zeros(len(X), dtype=np.int64)
        for k, p in enumerate(X):
            c = t.locate(p)
            if c is not None and INF not in t.cells[c]:
                out[k] = int(t.labels[c] == Label.MATTER)
        return out


class PairSelector(BaseEstimator):
    """Facet-to-camera-pair assignment by ICM on a Potts MRF.

    ``fit(mesh, samples=..., sample_vertices=..., cameras=...)``;
    ``predict(facets)`` returns the (cam_i, cam_j) rows of those facets.
    """

    def __init__(self, potts="smooth", candidates_per_camera=2, max_sweeps=50, tie_break=True):
        self.potts = potts
        self.candidates_per_camera = candidates_per_camera
        self.max_sweeps = max_sweeps
        self.tie_break = tie_break

    def fit(self, mesh, y=None, samples=None, sample_vertices=None, cameras=None):
        mesh = check_mesh(mesh)
        cams = check_cameras(cameras)
        if samples is None or sample_vertices is None or len(samples) != len(sample_vertices):
            raise ValueError("need samples and their mesh vertex ids")
        if self.potts not in ("smooth", "literal"):
            raise ValueError("potts must be 'smooth' or 'literal'")
        n_cams = max(c.id for c in cams) + 1
        vis = vertex_visibility(mesh, samples, sample_vertices)
        cands = build_candidates(samples, n_cams, self.candidates_per_camera)
        model = Potts.literal() if self.potts == "literal" else Potts()
        self.assignment_ = select_pairs(mesh, vis, cands, model, self.max_sweeps,
                                        cameras=cams if self.tie_break else None)
        self.n_facets_ = mesh.n_faces
        return self

    def predict(self, facets=None) -> np.ndarray:
        check_is_fitted(self, "assignment_")
        a = self.assignment_
        f = np.arange(self.n_facets_) if facets is None else np.asarray(facets, dtype=np.int64)
        if f.size and (f.min() < 0 or f.max() >= self.n_facets_):
            raise IndexError("facet index out of range")
        cand = np.asarray(a.candidates, dtype=np.int64).reshape(-1, 2)
        return cand[a.labels[f]]


class MeshRefiner(TransformerMixin, BaseEstimator):
    """Photometric refinement as a transformer on meshes.

    ``fit`` records the rig and work items; ``transform(mesh)`` returns the
    refined mesh. Facetwise mode needs a pair ``assignment``; classic mode
    needs ``samples`` to rank camera neighbors.
    """

    def __init__(self, mode="facetwise", iterations=30, smooth_weight=0.3, step_size=None,
                 classic_k=2, window=5, symmetric=True, workers=1):
        self.mode = mode
        self.iterations = iterations
        self.smooth_weight = smooth_weight
        self.step_size = step_size
        self.classic_k = classic_k
        self.window = window
        self.symmetric = symmetric
        self.workers = workers

    def _config(self) -> RefineConfig:
        return RefineConfig(iterations=self.iterations, step_size=self.step_size,
                            smooth_weight=self.smooth_weight, mode=self.mode, classic_k=self.classic_k,
                            window=self.window, symmetric=self.symmetric, workers=self.workers)

    def fit(self, mesh=None, y=None, rig=None, assignment=None, samples=None):
        cfg = self._config()
        if not isinstance(rig, CameraRig):
            raise ValueError("rig must be a CameraRig")
        if cfg.mode == "facetwise":
            if assignment is None:
                raise ValueError("facetwise mode needs a pair assignment")
            if mesh is not None and len(assignment.labels) != check_mesh(mesh).n_faces:
                raise ValueError("assignment does not match the mesh")
            self.items_ = facetwise_items(assignment, cfg.symmetric)
        else:
            if samples is None:
                raise ValueError("classic mode needs samples")
            self.items_ = classic_items(samples, [c.id for c in rig.cameras], cfg.classic_k)
        self.rig_ = rig
        self.config_ = cfg
        return self

    def transform(self, mesh) -> SurfaceMesh:
        check_is_fitted(self, "items_")
        self.result_ = refine_loop(check_mesh(mesh), self.rig_, self.config_, self.items_)
        return self.result_.mesh
