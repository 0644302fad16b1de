"""Desk-scale synthetic scenes with analytic ground truth.

Images are ray traced directly from the analytic shape (no mesh, no
rasterizer) with a seeded value-noise albedo, so they can serve as an
independent reference for the rendering and refinement code.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, CameraRig, Image, PointSample, look_at


class ValueNoise:
    """Seeded 3D value noise with quintic interpolation, summed over octaves."""

    def __init__(self, seed=0, scale=0.1, octaves=2, persistence=0.5):
        rng = np.random.default_rng(seed)
        self.perm = rng.permutation(256)
        self.values = rng.random(256)
        self.scale = float(scale)
        self.octaves = int(octaves)
        self.persistence = float(persistence)

    def _hash(self, i, j, k):
        p = self.perm
        return p[(p[(p[i & 255] + j) & 255] + k) & 255]

    def _octave(self, x):
        x0 = np.floor(x).astype(np.int64)
        f = x - x0
        w = f * f * f * (f * (f * 6 - 15) + 10)
        out = np.zeros(x.shape[:-1])
        for dx in (0, 1):
            wx = w[..., 0] if dx else 1 - w[..., 0]
            for dy in (0, 1):
                wy = w[..., 1] if dy else 1 - w[..., 1]
                for dz in (0, 1):
                    wz = w[..., 2] if dz else 1 - w[..., 2]
                    h = self._hash(x0[..., 0] + dx, x0[..., 1] + dy, x0[..., 2] + dz)
                    out += wx * wy * wz * self.values[h]
        return out

    def __call__(self, pts):
        pts = np.asarray(pts, dtype=float)
        total = np.zeros(pts.shape[:-1])
        amp, norm, freq = 1.0, 0.0, 1.0 / self.scale
        for o in range(self.octaves):
            # offset octaves so lattice points do not line up
            total += amp * self._octave(pts * freq + 17.31 * o)
            norm += amp
            amp *= self.persistence
            freq *= 2.0
        return total / norm


@dataclass
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    name: str = "sphere"

    def intersect(self, origins, dirs):
        c = np.asarray(self.center, float)
        o = np.asarray(origins, float) - c
        d = np.asarray(dirs, float)
        a = np.einsum("...i,...i", d, d)
        b = 2 * np.einsum("...i,...i", o, d)
        cc = np.einsum("...i,...i", o, o) - self.radius ** 2
        disc = b * b - 4 * a * cc
        t = np.full(disc.shape, np.inf)
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(ok & (t0 > 0), t0, np.where(ok & (t1 > 0), t1, np.inf))
        return t

    def normal(self, p):
        n = np.asarray(p, float) - np.asarray(self.center, float)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def distance(self, p):
        return np.abs(np.linalg.norm(np.asarray(p, float) - self.center, axis=-1) - self.radius)

    def sample(self, n, rng):
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * v

    def bbox(self):
        c = np.asarray(self.center, float)
        return c - self.radius, c + self.radius

    def bounding_radius(self) -> float:
        return float(self.radius)

    def mesh(self, subdivisions=3):
        from .mesh import icosphere
        m = icosphere(subdivisions)
        return m.with_vertices(m.vertices * self.radius + np.asarray(self.center))


@dataclass
class Cube:
    center: tuple = (0.0, 0.0, 0.0)
    half: float = 0.8
    name: str = "cube"

    def intersect(self, origins, dirs):
        o = np.asarray(origins, float) - np.asarray(self.center, float)
        d = np.asarray(dirs, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-self.half - o) * inv
            t2 = (self.half - o) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
        hit = (tmax >= tmin) & (tmax > 0)
        t = np.where(tmin > 0, tmin, tmax)
        return np.where(hit, t, np.inf)

    def normal(self, p):
        q = np.asarray(p, float) - np.asarray(self.center, float)
        k = np.argmax(np.abs(q), axis=-1)
        n = np.zeros_like(q)
        np.put_along_axis(n, k[..., None], np.sign(np.take_along_axis(q, k[..., None], -1)), -1)
        return n

    def distance(self, p):
        q = np.abs(np.asarray(p, float) - np.asarray(self.center, float)) - self.half
        outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0)
        return np.abs(outside + inside)

    def sample(self, n, rng):
        face = rng.integers(0, 6, n)
        uv = rng.uniform(-self.half, self.half, (n, 2))
        pts = np.zeros((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        for a in range(3):
            others = [b for b in range(3) if b != a]
            sel = axis == a
            pts[sel, a] = sign[sel] * self.half
            pts[sel, others[0]] = uv[sel, 0]
            pts[sel, others[1]] = uv[sel, 1]
        return pts + np.asarray(self.center)

    def bbox(self):
        c = np.asarray(self.center, float)
        return c - self.half, c + self.half

    def bounding_radius(self) -> float:
        return float(self.half * np.sqrt(3.0))

    def mesh(self, subdivisions=8):
        from .mesh import grid_box
        return grid_box(self.center, self.half, subdivisions)


@dataclass
class WavyPlane:
    """Height field ``z = amplitude * sin(freq x) * sin(freq y)`` over a square."""

    half: float = 1.0
    amplitude: float = 0.15
    freq: float = 3.0
    name: str = "wavy-plane"

    def height(self, x, y):
        return self.amplitude * np.sin(self.freq * x) * np.sin(self.freq * y)

    def intersect(self, origins, dirs, steps=256):
        o = np.asarray(origins, float)
        d = np.asarray(dirs, float)
        o, d = np.broadcast_arrays(o, d)
        shape = o.shape[:-1]
        o = o.reshape(-1, 3)
        d = d.reshape(-1, 3)
        a = self.amplitude
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (a - o[:, 2]) / d[:, 2]
            tb = (-a - o[:, 2]) / d[:, 2]
        t_lo = np.clip(np.minimum(ta, tb), 0, None)
        t_hi = np.maximum(ta, tb)
        t_out = np.full(len(o), np.inf)
        valid = np.isfinite(t_lo) & np.isfinite(t_hi) & (t_hi > t_lo)

        def f(t):
            p = o + d * t[:, None]
            return p[:, 2] - self.height(p[:, 0], p[:, 1])

        ts = np.linspace(0, 1, steps + 1)
        prev_t = t_lo.copy()
        prev_f = np.where(valid, f(np.where(valid, prev_t, 0)), 0)
        found = np.zeros(len(o), bool)
        lo = np.zeros(len(o))
        hi = np.zeros(len(o))
        for s in ts[1:]:
            cur_t = t_lo + s * (t_hi - t_lo)
            cur_f = np.where(valid, f(np.where(valid, cur_t, 0)), 0)
            cross = valid & ~found & (np.sign(cur_f) != np.sign(prev_f))
            lo[cross], hi[cross] = prev_t[cross], cur_t[cross]
            found |= cross
            prev_t, prev_f = cur_t, cur_f
        flo = f(np.where(found, lo, 0))
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            fm = f(np.where(found, mid, 0))
            same = np.sign(fm) == np.sign(flo)
            lo = np.where(same, mid, lo)
            flo = np.where(same, fm, flo)
            hi = np.where(same, hi, mid)
        t = 0.5 * (lo + hi)
        p = o + d * t[:, None]
        inside = (np.abs(p[:, 0]) <= self.half) & (np.abs(p[:, 1]) <= self.half)
        t_out[found & inside] = t[found & inside]
        return t_out.reshape(shape)

    def normal(self, p):
        p = np.asarray(p, float)
        x, y = p[..., 0], p[..., 1]
        a, w = self.amplitude, self.freq
        dx = a * w * np.cos(w * x) * np.sin(w * y)
        dy = a * w * np.sin(w * x) * np.cos(w * y)
        n = np.stack([-dx, -dy, np.ones_like(dx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def sample(self, n, rng):
        # rejection sampling against the area element
        out = []
        a, w = self.amplitude, self.freq
        jmax = np.sqrt(1 + 2 * (a * w) ** 2)
        while sum(len(o) for o in out) < n:
            xy = rng.uniform(-self.half, self.half, (2 * n, 2))
            nn = self.normal(np.column_stack([xy, np.zeros(len(xy))]))
            keep = rng.random(len(xy)) < (1.0 / nn[:, 2]) / jmax
            xy = xy[keep]
            out.append(np.column_stack([xy, self.height(xy[:, 0], xy[:, 1])]))
        return np.concatenate(out)[:n]

    def bbox(self):
        return (np.array([-self.half, -self.half, -self.amplitude]),
                np.array([self.half, self.half, self.amplitude]))

    def bounding_radius(self) -> float:
        return float(np.hypot(self.half * np.sqrt(2.0), self.amplitude))

    def mesh(self, subdivisions=64):
        from .mesh import SurfaceMesh
        g = np.linspace(-self.half, self.half, subdivisions + 1)
        X, Y = np.meshgrid(g, g, indexing="ij")
        V = np.column_stack([X.ravel(), Y.ravel(), self.height(X, Y).ravel()])
        idx = np.arange(len(V)).reshape(X.shape)
        a, b = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
        c, d = idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
        F = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
        return SurfaceMesh(V, F)

    def distance(self, p):
        from .metrics import point_mesh_distance
        return point_mesh_distance(np.asarray(p, float), self.mesh(128))


SHAPES = {"sphere": Sphere, "cube": Cube, "wavy-plane": WavyPlane}


def make_shape(name: str, **kwargs):
    try:
        return SHAPES[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown shape {name!r}; expected one of {sorted(SHAPES)}") from None


@dataclass
class SceneBundle:
    cameras: list
    images: list
    samples: list
    shape: object = None
    texture: object = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = {c.id for c in self.cameras}
        for s in self.samples:
            if not s.visibility <= ids:
                raise ValueError("sample references an unknown camera id")
        for cam, img in zip(self.cameras, self.images):
            if (img.width, img.height) != cam.image_size:
                raise ValueError("image size does not match its camera")

    @property
    def rig(self) -> CameraRig:
        return CameraRig(self.cameras, self.images)

    @property
    def points(self) -> np.ndarray:
        return np.array([s.position for s in self.samples], dtype=float).reshape(-1, 3)


def camera_rig(shape, n_cameras, image_size, distance=None, fov_fill=0.75):
    """Cameras on a ring around the shape looking at its center.

    Elevations alternate so consecutive views are not coplanar; for the
    open wavy plane the ring is lifted into a cap above the surface.
    """
    lo, hi = shape.bbox()
    center = 0.5 * (lo + hi)
    radius = shape.bounding_radius()
    distance = 3.0 * radius if distance is None else distance
    W, H = image_size
    f = fov_fill * 0.5 * min(W, H) / np.tan(np.arcsin(min(radius / distance, 0.99)))
    K = np.array([[f, 0, W / 2.0], [0, f, H / 2.0], [0, 0, 1.0]])
    cams = []
    for k in range(n_cameras):
        az = 2 * np.pi * k / n_cameras
        if isinstance(shape, WavyPlane):
            el = np.deg2rad(50.0 + 15.0 * (k % 2))
        else:
            el = np.deg2rad(20.0 if k % 2 == 0 else -10.0)
        eye = center + distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        R = look_at(eye, center)
        cams.append(Camera(K, R, eye, (W, H), k))
    return cams


def render_image(cam: Camera, shape, texture, background=0.2):
    """Ray trace the textured analytic shape at pixel centers."""
    W, H = cam.image_size
    u, v = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    dirs = cam.pixel_rays(np.stack([u, v], axis=-1))
    t = shape.intersect(np.broadcast_to(cam.center, dirs.shape), dirs)
    img = np.full((H, W), float(background))
    hit = np.isfinite(t)
    pts = cam.center + dirs[hit] * t[hit][:, None]
    img[hit] = texture(pts)
    return Image(img)


def visible_from(cam: Camera, shape, pts, rel_eps=1e-6):
    """Mask of surface points seen by ``cam``: in frame, facing, unoccluded."""
    pts = np.asarray(pts, float)
    y = cam.to_camera_frame(pts)
    in_front = y[:, 2] > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        h = y @ cam.intrinsics.T
        uv = h[:, :2] / h[:, 2:3]
    W, H = cam.image_size
    in_frame = in_front & (uv[:, 0] >= 0) & (uv[:, 0] < W) & (uv[:, 1] >= 0) & (uv[:, 1] < H)
    to_pt = pts - cam.center
    dist = np.linalg.norm(to_pt, axis=1)
    facing = np.einsum("ij,ij->i", shape.normal(pts), -to_pt) > 0
    t = shape.intersect(np.broadcast_to(cam.center, pts.shape), to_pt / dist[:, None])
    unoccluded = t >= dist * (1 - rel_eps) - rel_eps
    return in_frame & facing & unoccluded


def generate_synthetic(shape="sphere", n_cameras=8, image_size=(128, 128), n_points=500,
                       seed=0, position_noise=0.0, texture_scale=0.1, texture_octaves=2,
                       background=0.2, **shape_kwargs) -> SceneBundle:
    """Build cameras, ray-traced images and visibility-annotated samples.

    ``position_noise`` is the Gaussian standard deviation added to sample
    positions after visibility has been decided on the true surface.
    """
    if n_cameras < 2:
        raise ValueError("need at least two cameras")
    shp = make_shape(shape, **shape_kwargs) if isinstance(shape, str) else shape
    rng = np.random.default_rng(seed)
    texture = ValueNoise(seed=seed + 1, scale=texture_scale, octaves=texture_octaves)
    cams = camera_rig(shp, n_cameras, image_size)
    images = [render_image(c, shp, texture, background) for c in cams]
    pts = shp.sample(n_points, rng)
    vis = np.stack([visible_from(c, shp, pts) for c in cams], axis=1)
    keep = vis.any(axis=1)
    pts, vis = pts[keep], vis[keep]
    if position_noise > 0:
        pts = pts + rng.normal(scale=position_noise, size=pts.shape)
    samples = [PointSample(tuple(p), frozenset(np.flatnonzero(v).tolist())) for p, v in zip(pts, vis)]
    meta = dict(shape=shp.name, n_cameras=n_cameras, image_size=list(image_size),
                n_points=n_points, seed=seed, position_noise=position_noise,
                texture_scale=texture_scale, texture_octaves=texture_octaves,
                background=background, shape_params=shape_kwargs)
    return SceneBundle(cams, images, samples, shp, texture, meta)


@dataclass
class RefinementFixture:
    """Scene plus a ground-truth mesh and a noisy copy of it to refine."""

    bundle: SceneBundle
    truth: object
    noisy: object
    vertex_visibility: list

    @property
    def shape(self):
        return self.bundle.shape


REFINE_SUBDIVISIONS = {"sphere": 4, "cube": 16, "wavy-plane": 48}


def refinement_fixture(shape="sphere", n_cameras=8, image_size=(256, 256), noise_frac=0.01,
                       seed=1, subdivisions=None, texture_scale=0.1, n_points=300,
                       **shape_kwargs) -> RefinementFixture:
    """Ground-truth mesh of ``shape`` with isotropic vertex noise.

    The noise has per-vertex RMS ``noise_frac`` times the bounding radius.
    Vertex visibility is decided on the true vertex positions.
    """
    bundle = generate_synthetic(shape, n_cameras=n_cameras, image_size=image_size,
                                n_points=n_points, seed=seed, texture_scale=texture_scale,
                                **shape_kwargs)
    shp = bundle.shape
    sub = REFINE_SUBDIVISIONS.get(shp.name, 4) if subdivisions is None else subdivisions
    truth = shp.mesh(sub)
    rng = np.random.default_rng(seed + 1000)
    sigma = noise_frac * shp.bounding_radius() / np.sqrt(3.0)
    noisy = truth.with_vertices(truth.vertices + rng.normal(scale=sigma, size=truth.vertices.shape))
    vis = np.stack([visible_from(c, shp, truth.vertices) for c in bundle.cameras], axis=1)
    ids = [c.id for c in bundle.cameras]
    vv = [frozenset(ids[k] for k in np.flatnonzero(row)) for row in vis]
    return RefinementFixture(bundle, truth, noisy, vv)
