"""Geometric primitives shared by the meshing and refinement stages.

Orientation and in-sphere predicates follow the floating-point filter
approach: a fast double evaluation is accepted when its magnitude exceeds a
forward error bound, otherwise the determinant is recomputed exactly with
rational arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

_EPS = 2.0 ** -53
# Shewchuk's static bounds, padded by 4x because the evaluation order here is
# not bit-identical to his reference code.
_O3D_BOUND = 4.0 * (7.0 + 56.0 * _EPS) * _EPS
_ISP_BOUND = 4.0 * (16.0 + 224.0 * _EPS) * _EPS

# exact fallbacks taken; useful when profiling near-degenerate inputs
exact_calls = {"orient3d": 0, "insphere": 0}


@dataclass(frozen=True)
class Camera:
    """Pinhole camera without lens distortion.

    ``rotation`` maps world to camera coordinates: ``y = R (x - center)``.
    Pixel coordinates are continuous, pixel ``(c, r)`` covers
    ``[c, c+1) x [r, r+1)`` and its center sits at ``(c + 0.5, r + 0.5)``.
    """

    intrinsics: np.ndarray
    rotation: np.ndarray
    center: np.ndarray
    image_size: tuple[int, int]
    id: int = 0

    def __post_init__(self):
        K = np.array(self.intrinsics, dtype=float).reshape(3, 3)
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        C = np.array(self.center, dtype=float).reshape(3)
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(R)) and np.all(np.isfinite(C))):
            raise ValueError("camera parameters must be finite")
        if abs(K[1, 0]) > 0 or abs(K[2, 0]) > 0 or abs(K[2, 1]) > 0 or K[2, 2] != 1.0:
            raise ValueError("intrinsics must be upper triangular with K[2,2] = 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        w, h = self.image_size
        for name, arr in (("intrinsics", K), ("rotation", R), ("center", C)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "image_size", (int(w), int(h)))
        object.__setattr__(self, "id", int(self.id))

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    def to_camera_frame(self, X):
        return (np.asarray(X, dtype=float) - self.center) @ self.rotation.T

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.intrinsics)

    def pixel_rays(self, uv):
        """World-space ray directions with unit camera-frame depth."""
        uv = np.asarray(uv, dtype=float)
        hom = np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)
        local = hom @ self.K_inv.T
        return local @ self.rotation


@dataclass
class Image:
    """Single-channel image with intensities in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 3:
            # luminance average over color channels
            self.values = self.values.mean(axis=2)
        if self.values.ndim != 2:
            raise ValueError("image must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("image values must be finite")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class PointSample:
    position: tuple
    visibility: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        pos = tuple(float(c) for c in self.position)
        if len(pos) != 3 or not all(np.isfinite(pos)):
            raise ValueError("position must be 3 finite coordinates")
        vis = frozenset(int(c) for c in self.visibility)
        if not vis:
            raise ValueError("visibility must be non-empty")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "visibility", vis)


def make_camera(K, R, C, image_size, id=0) -> Camera:
    return Camera(np.asarray(K, float), np.asarray(R, float), np.asarray(C, float), tuple(image_size), id)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Rotation whose camera z-axis points from ``eye`` to ``target`` (y down in image)."""
    eye = np.asarray(eye, float)
    z = np.asarray(target, float) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, float)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [1.0, 0.0, 0.0] if abs(z[0]) < 0.9 else [0.0, 1.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def project(cam: Camera, p):
    """Project a world point; returns ``((u, v), depth)`` or ``None`` behind the camera."""
    y = cam.rotation @ (np.asarray(p, dtype=float) - cam.center)
    if not y[2] > 0:
        return None
    h = cam.intrinsics @ y
    return (h[0] / h[2], h[1] / h[2]), float(y[2])


def project_many(cam: Camera, pts):
    """Vectorized projection. Returns ``(uv, depth)``; ``uv`` is NaN where depth <= 0."""
    y = cam.to_camera_frame(pts)
    depth = y[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        h = y @ cam.intrinsics.T
        uv = h[..., :2] / h[..., 2:3]
    uv[depth <= 0] = np.nan
    return uv, depth


def backproject(cam: Camera, px, depth: float) -> np.ndarray:
    if not depth > 0:
        raise ValueError("depth must be positive")
    ray = cam.pixel_rays(np.asarray(px, dtype=float))
    return cam.center + depth * ray


def backproject_many(cam: Camera, uv, depth):
    rays = cam.pixel_rays(uv)
    return cam.center + rays * np.asarray(depth)[..., None]


def _orient3d_exact(a, b, c, d) -> int:
    exact_calls["orient3d"] += 1
    F = Fraction
    ax, ay, az = F(a[0]) - F(d[0]), F(a[1]) - F(d[1]), F(a[2]) - F(d[2])
    bx, by, bz = F(b[0]) - F(d[0]), F(b[1]) - F(d[1]), F(b[2]) - F(d[2])
    cx, cy, cz = F(c[0]) - F(d[0]), F(c[1]) - F(d[1]), F(c[2]) - F(d[2])
    det = az * (bx * cy - by * cx) + bz * (cx * ay - cy * ax) + cz * (ax * by - ay * bx)
    return -1 if det > 0 else (1 if det < 0 else 0)


def orient3d(a, b, c, d) -> int:
    """Sign of ``det[b - a, c - a, d - a]``: +1 when d is on the side of the
    plane (a, b, c) that the normal ``(b - a) x (c - a)`` points to."""
    adx = a[0] - d[0]
    bdx = b[0] - d[0]
    cdx = c[0] - d[0]
    ady = a[1] - d[1]
    bdy = b[1] - d[1]
    cdy = c[1] - d[1]
    adz = a[2] - d[2]
    bdz = b[2] - d[2]
    cdz = c[2] - d[2]
    bdxcdy = bdx * cdy
    cdxbdy = cdx * bdy
    cdxady = cdx * ady
    adxcdy = adx * cdy
    adxbdy = adx * bdy
    bdxady = bdx * ady
    det = adz * (bdxcdy - cdxbdy) + bdz * (cdxady - adxcdy) + cdz * (adxbdy - bdxady)
    permanent = ((abs(bdxcdy) + abs(cdxbdy)) * abs(adz)
                 + (abs(cdxady) + abs(adxcdy)) * abs(bdz)
                 + (abs(adxbdy) + abs(bdxady)) * abs(cdz))
    bound = _O3D_BOUND * permanent
    # det here is Shewchuk's orientation, which has the opposite sign
    if det > bound:
        return -1
    if -det > bound:
        return 1
    return _orient3d_exact(a, b, c, d)


def orient3d_naive(a, b, c, d) -> int:
    """Unfiltered double-precision orientation. Benchmarking only, not robust."""
    m = np.array([np.subtract(b, a), np.subtract(c, a), np.subtract(d, a)], dtype=float)
    det = np.linalg.det(m)
    return int(np.sign(det))


def _insphere_det_exact(a, b, c, d, e):
    F = Fraction
    rows = []
    for p in (a, b, c, d):
        x, y, z = F(p[0]) - F(e[0]), F(p[1]) - F(e[1]), F(p[2]) - F(e[2])
        rows.append((x, y, z, x * x + y * y + z * z))
    (ax, ay, az, al), (bx, by, bz, bl), (cx, cy, cz, cl), (dx, dy, dz, dl) = rows
    ab = ax * by - bx * ay
    bc = bx * cy - cx * by
    cd = cx * dy - dx * cy
    da = dx * ay - ax * dy
    ac = ax * cy - cx * ay
    bd = bx * dy - dx * by
    abc = az * bc - bz * ac + cz * ab
    bcd = bz * cd - cz * bd + dz * bc
    cda = cz * da + dz * ac + az * cd
    dab = dz * ab + az * bd + bz * da
    return (dl * abc - cl * dab) + (bl * cda - al * bcd)


def _insphere_det(a, b, c, d, e):
    """Shewchuk's in-sphere determinant (positive inside when his orient3d is positive)."""
    aex = a[0] - e[0]
    bex = b[0] - e[0]
    cex = c[0] - e[0]
    dex = d[0] - e[0]
    aey = a[1] - e[1]
    bey = b[1] - e[1]
    cey = c[1] - e[1]
    dey = d[1] - e[1]
    aez = a[2] - e[2]
    bez = b[2] - e[2]
    cez = c[2] - e[2]
    dez = d[2] - e[2]

    aexbey = aex * bey
    bexaey = bex * aey
    ab = aexbey - bexaey
    bexcey = bex * cey
    cexbey = cex * bey
    bc = bexcey - cexbey
    cexdey = cex * dey
    dexcey = dex * cey
    cd = cexdey - dexcey
    dexaey = dex * aey
    aexdey = aex * dey
    da = dexaey - aexdey
    aexcey = aex * cey
    cexaey = cex * aey
    ac = aexcey - cexaey
    bexdey = bex * dey
    dexbey = dex * bey
    bd = bexdey - dexbey

    abc = aez * bc - bez * ac + cez * ab
    bcd = bez * cd - cez * bd + dez * bc
    cda = cez * da + dez * ac + aez * cd
    dab = dez * ab + aez * bd + bez * da

    alift = aex * aex + aey * aey + aez * aez
    blift = bex * bex + bey * bey + bez * bez
    clift = cex * cex + cey * cey + cez * cez
    dlift = dex * dex + dey * dey + dez * dez

    det = (dlift * abc - clift * dab) + (blift * cda - alift * bcd)

    aezp, bezp, cezp, dezp = abs(aez), abs(bez), abs(cez), abs(dez)
    aexbeyp, bexaeyp = abs(aexbey), abs(bexaey)
    bexceyp, cexbeyp = abs(bexcey), abs(cexbey)
    cexdeyp, dexceyp = abs(cexdey), abs(dexcey)
    dexaeyp, aexdeyp = abs(dexaey), abs(aexdey)
    aexceyp, cexaeyp = abs(aexcey), abs(cexaey)
    bexdeyp, dexbeyp = abs(bexdey), abs(dexbey)
    permanent = (((cexdeyp + dexceyp) * bezp + (dexbeyp + bexdeyp) * cezp
                  + (bexceyp + cexbeyp) * dezp) * alift
                 + ((dexaeyp + aexdeyp) * cezp + (aexceyp + cexaeyp) * dezp
                    + (cexdeyp + dexceyp) * aezp) * blift
                 + ((aexbeyp + bexaeyp) * dezp + (bexdeyp + dexbeyp) * aezp
                    + (dexaeyp + aexdeyp) * bezp) * clift
                 + ((bexceyp + cexbeyp) * aezp + (cexaeyp + aexceyp) * bezp
                    + (aexbeyp + bexaeyp) * cezp) * dlift)
    return det, _ISP_BOUND * permanent


def insphere(a, b, c, d, e, orientation: int | None = None) -> int:
    """+1 if ``e`` is strictly inside the circumsphere of tetrahedron abcd,
    -1 if strictly outside, 0 if on it. ``orientation`` may pass a known
    ``orient3d(a, b, c, d)`` to skip recomputing it."""
    o = orient3d(a, b, c, d) if orientation is None else orientation
    if o == 0:
        raise ValueError("degenerate tetrahedron")
    det, bound = _insphere_det(a, b, c, d, e)
    if det > bound:
        s = 1
    elif -det > bound:
        s = -1
    else:
        exact_calls["insphere"] += 1
        ex = _insphere_det_exact(a, b, c, d, e)
        s = 1 if ex > 0 else (-1 if ex < 0 else 0)
    # Shewchuk's orientation is the negation of ours
    return -s * o


def tet_volume(a, b, c, d) -> float:
    a = np.asarray(a, float)
    return float(np.dot(np.subtract(b, a), np.cross(np.subtract(c, a), np.subtract(d, a))) / 6.0)


def barycentric(facet, x, tol: float = 1e-6):
    """Barycentric weights of ``x`` with respect to triangle ``facet``.

    ``x`` must lie on the facet plane up to ``tol`` times the facet scale.
    """
    v0, v1, v2 = (np.asarray(v, dtype=float) for v in facet)
    x = np.asarray(x, dtype=float)
    e1, e2 = v1 - v0, v2 - v0
    n = np.cross(e1, e2)
    area2 = float(np.dot(n, n))
    scale = max(np.dot(e1, e1), np.dot(e2, e2))
    if area2 <= (1e-14 * scale) ** 2 or area2 == 0.0:
        raise ValueError("degenerate facet")
    r = x - v0
    off = abs(np.dot(r, n)) / np.sqrt(area2)
    if off > tol * np.sqrt(scale):
        raise ValueError("point is not on the facet plane")
    w1 = np.dot(np.cross(r, e2), n) / area2
    w2 = np.dot(np.cross(e1, r), n) / area2
    return (1.0 - w1 - w2, float(w1), float(w2))


def triangle_normals(vertices, faces) -> np.ndarray:
    v = np.asarray(vertices, float)
    f = np.asarray(faces, int)
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    return n / norm


def triangle_areas(vertices, faces) -> np.ndarray:
    v = np.asarray(vertices, float)
    f = np.asarray(faces, int)
    return 0.5 * np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)


@dataclass
class CameraRig:
    """Cameras with their images, addressed by camera id."""

    cameras: list
    images: list

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError("one image per camera is required")
        self._index = {}
        for k, (cam, img) in enumerate(zip(self.cameras, self.images)):
            if cam.id in self._index:
                raise ValueError(f"duplicate camera id {cam.id}")
            if (img.width, img.height) != cam.image_size:
                raise ValueError(f"image of camera {cam.id} does not match its size")
            self._index[cam.id] = k

    def __len__(self) -> int:
        return len(self.cameras)

    def __getitem__(self, cam_id: int):
        k = self._index[int(cam_id)]
        return self.cameras[k], self.images[k]

    @property
    def ids(self) -> list[int]:
        return [c.id for c in self.cameras]
