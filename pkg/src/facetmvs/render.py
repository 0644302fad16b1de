"""Software rendering services: depth maps, reprojection, ZNCC and masks.

Pixel ``(c, r)`` is sampled at its center ``(c + 0.5, r + 0.5)``. Coverage
on shared edges follows a top-left style rule so that every pixel center on
an edge belongs to exactly one of the two triangles.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from .geometry import Camera, Image
from .mesh import SurfaceMesh


@dataclass
class DepthMap:
    """Nearest-surface depth per pixel (``inf`` where empty) and its facet id."""

    depth: np.ndarray
    facet: np.ndarray

    @property
    def covered(self) -> np.ndarray:
        return self.facet >= 0

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]


@dataclass
class ReprojectedImage:
    """Image ``j`` seen through the surface from camera ``i``."""

    values: np.ndarray
    mask: np.ndarray
    uv: np.ndarray
    depth_j: np.ndarray


@dataclass
class ErrorMap:
    error: np.ndarray
    valid: np.ndarray


@numba.njit(cache=True)
def _raster_kernel(su, sv, sz, faces, W, H, depth, facet):
    for f in range(faces.shape[0]):
        a, b, c = faces[f, 0], faces[f, 1], faces[f, 2]
        za, zb, zc = sz[a], sz[b], sz[c]
        if za <= 0.0 or zb <= 0.0 or zc <= 0.0:
            continue
        ax, ay = su[a], sv[a]
        bx, by = su[b], sv[b]
        cx, cy = su[c], sv[c]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        if area < 0.0:
            bx, by, cx, cy = cx, cy, bx, by
            zb, zc = zc, zb
            area = -area
        x0 = max(int(np.floor(min(ax, bx, cx) - 0.5)), 0)
        x1 = min(int(np.ceil(max(ax, bx, cx) - 0.5)), W - 1)
        y0 = max(int(np.floor(min(ay, by, cy) - 0.5)), 0)
        y1 = min(int(np.ceil(max(ay, by, cy) - 0.5)), H - 1)
        # edge k is opposite vertex k; ownership of points exactly on it
        e0x, e0y = cx - bx, cy - by
        e1x, e1y = ax - cx, ay - cy
        e2x, e2y = bx - ax, by - ay
        own0 = e0y > 0.0 or (e0y == 0.0 and e0x < 0.0)
        own1 = e1y > 0.0 or (e1y == 0.0 and e1x < 0.0)
        own2 = e2y > 0.0 or (e2y == 0.0 and e2x < 0.0)
        for r in range(y0, y1 + 1):
            py = r + 0.5
            for col in range(x0, x1 + 1):
                px = col + 0.5
                w0 = e0x * (py - by) - e0y * (px - bx)
                w1 = e1x * (py - cy) - e1y * (px - cx)
                w2 = e2x * (py - ay) - e2y * (px - ax)
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                if (w0 == 0.0 and not own0) or (w1 == 0.0 and not own1) or (w2 == 0.0 and not own2):
                    continue
                inv = (w0 / za + w1 / zb + w2 / zc) / area
                z = 1.0 / inv
                if z < depth[r, col]:
                    depth[r, col] = z
                    facet[r, col] = f


def screen_coords(cam: Camera, X):
    """Continuous pixel coordinates and camera depth of world points."""
    y = cam.to_camera_frame(X)
    z = y[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        h = y @ cam.intrinsics.T
        u = h[..., 0] / h[..., 2]
        v = h[..., 1] / h[..., 2]
    return u, v, z


def rasterize(cam: Camera, mesh: SurfaceMesh, faces=None) -> DepthMap:
    """Z-buffer of ``mesh`` (or of the listed facet ids) seen from ``cam``.

    Triangles with a vertex at or behind the camera plane are skipped.
    Depth ties keep the lower facet id.
    """
    W, H = cam.image_size
    depth = np.full((H, W), np.inf)
    facet = np.full((H, W), -1, dtype=np.int64)
    if mesh.n_faces == 0:
        return DepthMap(depth, facet)
    u, v, z = screen_coords(cam, mesh.vertices)
    F = mesh.faces if faces is None else mesh.faces[np.asarray(faces, dtype=np.int64)]
    _raster_kernel(u, v, z, np.ascontiguousarray(F, dtype=np.int64), W, H, depth, facet)
    if faces is not None:
        ids = np.asarray(faces, dtype=np.int64)
        facet[facet >= 0] = ids[facet[facet >= 0]]
    return DepthMap(depth, facet)


def pixel_centers(W: int, H: int) -> np.ndarray:
    u, v = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    return np.stack([u, v], axis=-1)


def depth_points(cam: Camera, dm: DepthMap) -> np.ndarray:
    """World points of every pixel center (NaN where uncovered)."""
    rays = cam.pixel_rays(pixel_centers(dm.width, dm.height))
    d = np.where(dm.covered, dm.depth, np.nan)
    return cam.center + rays * d[..., None]


def bilinear(img: np.ndarray, u, v):
    """Sample ``img`` at continuous pixel coordinates (values live at centers).

    Coordinates must satisfy ``0.5 <= u <= W - 0.5`` and likewise for ``v``.
    """
    H, W = img.shape
    x = np.clip(np.asarray(u, float) - 0.5, 0.0, W - 1.0)
    y = np.clip(np.asarray(v, float) - 0.5, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), W - 2) if W > 1 else np.zeros_like(x, dtype=np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), H - 2) if H > 1 else np.zeros_like(y, dtype=np.int64)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    return ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x1]
            + (1 - fx) * fy * img[y1, x0] + fx * fy * img[y1, x1])


def bilinear_grad(img: np.ndarray, u, v) -> np.ndarray:
    """Exact derivative of :func:`bilinear` with respect to ``(u, v)``, shape (n, 2)."""
    H, W = img.shape
    x = np.clip(np.asarray(u, float) - 0.5, 0.0, W - 1.0)
    y = np.clip(np.asarray(v, float) - 0.5, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(H - 2, 0))
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    a, b, c, d = img[y0, x0], img[y0, x1], img[y1, x0], img[y1, x1]
    du = (1 - fy) * (b - a) + fy * (d - c)
    dv = (1 - fx) * (c - a) + fx * (d - b)
    return np.stack([du, dv], axis=-1)


def nearest(img: np.ndarray, u, v):
    H, W = img.shape
    c = np.clip(np.floor(np.asarray(u)).astype(np.int64), 0, W - 1)
    r = np.clip(np.floor(np.asarray(v)).astype(np.int64), 0, H - 1)
    return img[r, c]


def _surface_depth_at(cam: Camera, mesh: SurfaceMesh, facet_map, u, v):
    """Camera depth of the front surface along the pixel ray through ``(u, v)``.

    Candidate facets are those the depth map shows in the 3x3 pixel block
    around ``(u, v)``; the nearest one the exact ray passes through wins.
    Where none does, the plane of the facet at the containing pixel is used.
    """
    H, W = facet_map.shape
    V = mesh.vertices
    rays = cam.pixel_rays(np.stack([u, v], axis=-1))
    c0 = np.floor(u).astype(np.int64)
    r0 = np.floor(v).astype(np.int64)
    best = np.full(len(u), np.inf)
    fallback = np.full(len(u), np.inf)
    for dr in (0, -1, 1):
        for dc in (0, -1, 1):
            f = facet_map[np.clip(r0 + dr, 0, H - 1), np.clip(c0 + dc, 0, W - 1)]
            has = f >= 0
            tri = mesh.faces[np.maximum(f, 0)]
            p0, p1, p2 = V[tri[:, 0]], V[tri[:, 1]], V[tri[:, 2]]
            n = np.cross(p1 - p0, p2 - p0)
            denom = np.einsum("ij,ij->i", n, rays)
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.einsum("ij,ij->i", n, p0 - cam.center) / denom
                X = cam.center + rays * t[:, None]
                nn = np.einsum("ij,ij->i", n, n)
                w1 = np.einsum("ij,ij->i", np.cross(X - p0, p2 - p0), n) / nn
                w2 = np.einsum("ij,ij->i", np.cross(p1 - p0, X - p0), n) / nn
            eps = 1e-9
            inside = has & (denom != 0) & (t > 0) & (w1 >= -eps) & (w2 >= -eps) & (w1 + w2 <= 1 + eps)
            best = np.where(inside & (t < best), t, best)
            if dr == 0 and dc == 0:
                fallback = np.where(has & (denom != 0), t, np.inf)
    return np.where(np.isfinite(best), best, fallback)


def reproject(cam_i: Camera, cam_j: Camera, img_j, depth_i: DepthMap, depth_j: DepthMap,
              mesh: SurfaceMesh, tol: float, sampling: str = "bilinear") -> ReprojectedImage:
    """Warp image ``j`` into camera ``i`` through the rendered surface.

    A pixel is kept when its surface point is in front of ``j``, inside
    ``j``'s sampling domain and not occluded there. The occlusion test
    compares against the depth ``j`` sees at the exact reprojected coordinates (see
    :func:`_surface_depth_at`), with tolerance ``tol``; facets sharing a
    vertex with the pixel's own facet never occlude it.
    """
    vals_j = img_j.values if isinstance(img_j, Image) else np.asarray(img_j, float)
    H, W = depth_i.depth.shape
    X = depth_points(cam_i, depth_i)
    u, v, z = screen_coords(cam_j, X)
    Wj, Hj = cam_j.image_size
    ok = depth_i.covered & (z > 0)
    ok &= (u >= 0.5) & (u <= Wj - 0.5) & (v >= 0.5) & (v <= Hj - 0.5)
    idx = np.flatnonzero(ok)
    uu, vv, zz = u.ravel()[idx], v.ravel()[idx], z.ravel()[idx]
    cj = np.clip(np.floor(uu).astype(np.int64), 0, Wj - 1)
    rj = np.clip(np.floor(vv).astype(np.int64), 0, Hj - 1)
    fj = depth_j.facet[rj, cj]
    seen = fj >= 0
    zs = np.full(len(idx), np.inf)
    if np.any(seen):
        zs[seen] = _surface_depth_at(cam_j, mesh, depth_j.facet, uu[seen], vv[seen])
    # a facet never hides itself or a facet sharing one of its vertices
    fi = depth_i.facet.ravel()[idx]
    ti = mesh.faces[fi]
    tj = mesh.faces[np.maximum(fj, 0)]
    near = (ti[:, :, None] == tj[:, None, :]).any(axis=(1, 2)) & seen
    visible = seen & (near | (zz <= zs + tol))
    keep = idx[visible]
    mask = np.zeros(H * W, dtype=bool)
    mask[keep] = True
    mask = mask.reshape(H, W)
    out = np.zeros(H * W)
    sampler = bilinear if sampling == "bilinear" else nearest
    out[keep] = sampler(vals_j, uu[visible], vv[visible])
    uv = np.full((H, W, 2), np.nan)
    uv[mask] = np.stack([uu[visible], vv[visible]], axis=-1)
    zj = np.full((H, W), np.nan)
    zj[mask] = zz[visible]
    return ReprojectedImage(out.reshape(H, W), mask, uv, zj)


def box_sum(a: np.ndarray, window: int) -> np.ndarray:
    """Sum over the ``window x window`` neighborhood, zero outside the image."""
    r = window // 2
    p = np.pad(a, ((r + 1, r), (r + 1, r)))
    c = p.cumsum(axis=0).cumsum(axis=1)
    return c[window:, window:] - c[:-window, window:] - c[window:, :-window] + c[:-window, :-window]


def _window_stats(I, R, valid_px, window):
    n = window * window
    m = valid_px.astype(float)
    Iz = np.where(valid_px, I, 0.0)
    Rz = np.where(valid_px, R, 0.0)
    full = box_sum(m, window) >= n - 0.5
    mu_i = box_sum(Iz, window) / n
    mu_r = box_sum(Rz, window) / n
    var_i = np.maximum(box_sum(Iz * Iz, window) / n - mu_i ** 2, 0.0)
    var_r = np.maximum(box_sum(Rz * Rz, window) / n - mu_r ** 2, 0.0)
    cov = box_sum(Iz * Rz, window) / n - mu_i * mu_r
    return full, mu_i, mu_r, np.sqrt(var_i), np.sqrt(var_r), cov


STD_EPS = 1e-6


def zncc_error(I, R, mask=None, window: int = 5) -> ErrorMap:
    """Negative ZNCC of the window around every pixel.

    Only windows lying entirely inside ``mask`` count; windows where either
    image is flat (std below 1e-6) have error 0.
    """
    I = I.values if isinstance(I, Image) else np.asarray(I, float)
    if isinstance(R, ReprojectedImage):
        mask = R.mask if mask is None else mask & R.mask
        R = R.values
    R = np.asarray(R, float)
    if I.shape != R.shape:
        raise ValueError("images must have equal size")
    mask = np.ones(I.shape, bool) if mask is None else np.asarray(mask, bool)
    full, mu_i, mu_r, sd_i, sd_r, cov = _window_stats(I, R, mask, window)
    informative = full & (sd_i >= STD_EPS) & (sd_r >= STD_EPS)
    err = np.zeros(I.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        ncc = cov / (sd_i * sd_r)
    err[informative] = -np.clip(ncc[informative], -1.0, 1.0)
    return ErrorMap(err, full)


def zncc_error_grad(I, R, mask, window: int = 5, centers=None):
    """``(error_map, dE/dR)`` where ``E`` is the sum of the error map.

    Derivative per window: with ``n`` pixels,
    ``d ncc / d R_q = (I_q - mu_I) / (n sd_I sd_R) - ncc (R_q - mu_R) / (n sd_R^2)``;
    contributions of all windows covering ``q`` are gathered with box sums.
    With ``centers`` given, ``E`` sums only the errors of windows centered
    there, while windows may still reach into the rest of ``mask``.
    """
    I = np.asarray(I, float)
    R = np.asarray(R, float)
    mask = np.asarray(mask, bool)
    n = window * window
    full, mu_i, mu_r, sd_i, sd_r, cov = _window_stats(I, R, mask, window)
    informative = full & (sd_i >= STD_EPS) & (sd_r >= STD_EPS)
    A = np.zeros(I.shape)
    B = np.zeros(I.shape)
    err = np.zeros(I.shape)
    s = informative
    ncc = cov[s] / (sd_i[s] * sd_r[s])
    err[s] = -ncc
    A[s] = 1.0 / (n * sd_i[s] * sd_r[s])
    B[s] = ncc / (n * sd_r[s] ** 2)
    if centers is not None:
        centers = np.asarray(centers, bool)
        A[~centers] = 0.0
        B[~centers] = 0.0
        full = full & centers
    C = mu_i * A
    D = mu_r * B
    grad = -(I * box_sum(A, window) - box_sum(C, window) - R * box_sum(B, window) + box_sum(D, window))
    grad[~mask] = 0.0
    return ErrorMap(err, full), grad


def zncc_window(Iw, Rw) -> float:
    """ZNCC of two equal-size windows (0 when either is flat)."""
    Iw = np.asarray(Iw, float).ravel()
    Rw = np.asarray(Rw, float).ravel()
    di, dr = Iw - Iw.mean(), Rw - Rw.mean()
    si, sr = np.sqrt(np.mean(di * di)), np.sqrt(np.mean(dr * dr))
    if si < STD_EPS or sr < STD_EPS:
        return 0.0
    return float(np.mean(di * dr) / (si * sr))


def zncc_window_grad(Iw, Rw) -> np.ndarray:
    """Gradient of :func:`zncc_window` with respect to ``Rw``."""
    shape = np.shape(Rw)
    Iw = np.asarray(Iw, float).ravel()
    Rw = np.asarray(Rw, float).ravel()
    n = len(Iw)
    di, dr = Iw - Iw.mean(), Rw - Rw.mean()
    si, sr = np.sqrt(np.mean(di * di)), np.sqrt(np.mean(dr * dr))
    if si < STD_EPS or sr < STD_EPS:
        return np.zeros(shape)
    ncc = np.mean(di * dr) / (si * sr)
    return (di / (n * si * sr) - ncc * dr / (n * sr * sr)).reshape(shape)


def image_gradient(I) -> np.ndarray:
    """Central differences with clamped borders, as an (H, W, 2) array of (d/du, d/dv)."""
    I = I.values if isinstance(I, Image) else np.asarray(I, float)
    H, W = I.shape
    c = np.arange(W)
    r = np.arange(H)
    gx = (I[:, np.minimum(c + 1, W - 1)] - I[:, np.maximum(c - 1, 0)]) / 2.0
    gy = (I[np.minimum(r + 1, H - 1), :] - I[np.maximum(r - 1, 0), :]) / 2.0
    return np.stack([gx, gy], axis=-1)


def occlusion_mask(dm, threshold_mult: float = 10.0, size: int = 9) -> np.ndarray:
    """Pixels next to a depth discontinuity.

    A jump between 4-neighbors counts as a discontinuity when it exceeds
    ``threshold_mult`` times the local median of depth jumps (median over a
    ``size x size`` window); both pixels of the jump are masked. Covered
    pixels bordering empty ones are masked too.
    """
    depth = dm.depth if isinstance(dm, DepthMap) else np.asarray(dm, float)
    defined = np.isfinite(depth)
    H, W = depth.shape
    jump = np.zeros((H, W))
    with np.errstate(invalid="ignore"):
        dx = np.abs(np.diff(depth, axis=1))
        dy = np.abs(np.diff(depth, axis=0))
    both_x = defined[:, 1:] & defined[:, :-1]
    both_y = defined[1:, :] & defined[:-1, :]
    dx = np.where(both_x, dx, 0.0)
    dy = np.where(both_y, dy, 0.0)
    jump[:, 1:] = np.maximum(jump[:, 1:], dx)
    jump[:, :-1] = np.maximum(jump[:, :-1], dx)
    jump[1:, :] = np.maximum(jump[1:, :], dy)
    jump[:-1, :] = np.maximum(jump[:-1, :], dy)
    if np.any(defined):
        fill = float(np.median(jump[defined]))
    else:
        fill = 0.0
    med = ndimage.median_filter(np.where(defined, jump, fill), size=size, mode="nearest")
    out = np.zeros((H, W), bool)
    thr_x = threshold_mult * np.maximum(med[:, 1:], med[:, :-1])
    thr_y = threshold_mult * np.maximum(med[1:, :], med[:-1, :])
    hx = both_x & (dx > thr_x)
    hy = both_y & (dy > thr_y)
    out[:, 1:] |= hx
    out[:, :-1] |= hx
    out[1:, :] |= hy
    out[:-1, :] |= hy
    # silhouette: covered pixels with an uncovered 4-neighbor
    sil = np.zeros((H, W), bool)
    sil[:, 1:] |= defined[:, 1:] & ~defined[:, :-1]
    sil[:, :-1] |= defined[:, :-1] & ~defined[:, 1:]
    sil[1:, :] |= defined[1:, :] & ~defined[:-1, :]
    sil[:-1, :] |= defined[:-1, :] & ~defined[1:, :]
    return out | sil
