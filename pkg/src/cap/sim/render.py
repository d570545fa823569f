"""Software ray-cast renderer over geometric primitives.

Rays are cast with unnormalized directions whose camera-frame z equals
1, so the ray parameter at a hit IS the z-depth. Shading is flat: one
fixed directional light plus ambient, body-id segmentation, and a
vertical-gradient background. No-hit pixels carry depth 0 (the episode
store's no-depth sentinel) and segmentation id 0.

The light direction has a zero x component and every intersection
routine is built from sign-symmetric IEEE operations, so rendering a
scene whose poses are conjugated by the x-mirror produces exactly the
horizontally flipped image, bit for bit.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from ..geometry import CameraIntrinsics, RigidTransform

__all__ = ["RenderSettings", "render_bodies", "DEFAULT_LIGHT"]

_MISS = 1.0e30

# directional light: x component exactly 0 to keep mirrored shading exact
DEFAULT_LIGHT = (0.0, 0.45121546870854359, -0.89240392200134372)

BG_TOP = (0.52, 0.58, 0.66)
BG_BOT = (0.26, 0.27, 0.30)
AMBIENT = 0.34
DIFFUSE = 0.66


class RenderSettings:
    __slots__ = ("light", "ambient", "diffuse", "bg_top", "bg_bot")

    def __init__(self, light=DEFAULT_LIGHT, ambient=AMBIENT, diffuse=DIFFUSE,
                 bg_top=BG_TOP, bg_bot=BG_BOT):
        light = np.asarray(light, dtype=float)
        n = math.sqrt(float(light @ light))
        self.light = light / n
        self.ambient = float(ambient)
        self.diffuse = float(diffuse)
        self.bg_top = np.asarray(bg_top, dtype=float)
        self.bg_bot = np.asarray(bg_bot, dtype=float)


@njit(cache=True)
def _hit_box(ox, oy, oz, dx, dy, dz, hx, hy, hz):
    tmin = -_MISS
    tmax = _MISS
    axis = -1
    # slab test per axis; entry face gives the normal
    for i in range(3):
        if i == 0:
            o, d, h = ox, dx, hx
        elif i == 1:
            o, d, h = oy, dy, hy
        else:
            o, d, h = oz, dz, hz
        if d == 0.0:
            if o < -h or o > h:
                return _MISS, 0.0, 0.0, 0.0
        else:
            t1 = (-h - o) / d
            t2 = (h - o) / d
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tmin:
                tmin = t1
                axis = i
            if t2 < tmax:
                tmax = t2
    if tmin > tmax or tmin <= 1.0e-6 or axis < 0:
        return _MISS, 0.0, 0.0, 0.0
    nx = 0.0
    ny = 0.0
    nz = 0.0
    if axis == 0:
        nx = -1.0 if dx > 0.0 else 1.0
    elif axis == 1:
        ny = -1.0 if dy > 0.0 else 1.0
    else:
        nz = -1.0 if dz > 0.0 else 1.0
    return tmin, nx, ny, nz


@njit(cache=True)
def _hit_sphere(ox, oy, oz, dx, dy, dz, r):
    a = dx * dx + dy * dy + dz * dz
    b = ox * dx + oy * dy + oz * dz
    c = ox * ox + oy * oy + oz * oz - r * r
    disc = b * b - a * c
    if disc < 0.0:
        return _MISS, 0.0, 0.0, 0.0
    t = (-b - math.sqrt(disc)) / a
    if t <= 1.0e-6:
        return _MISS, 0.0, 0.0, 0.0
    return t, (ox + t * dx) / r, (oy + t * dy) / r, (oz + t * dz) / r


@njit(cache=True)
def _hit_cylinder(ox, oy, oz, dx, dy, dz, r, hz):
    best = _MISS
    nx = 0.0
    ny = 0.0
    nz = 0.0
    a = dx * dx + dy * dy
    if a > 0.0:
        b = ox * dx + oy * dy
        c = ox * ox + oy * oy - r * r
        disc = b * b - a * c
        if disc >= 0.0:
            t = (-b - math.sqrt(disc)) / a
            z = oz + t * dz
            if t > 1.0e-6 and -hz <= z <= hz:
                best = t
                nx = (ox + t * dx) / r
                ny = (oy + t * dy) / r
                nz = 0.0
    if dz != 0.0:
        for s in (-1.0, 1.0):
            t = (s * hz - oz) / dz
            if 1.0e-6 < t < best:
                x = ox + t * dx
                y = oy + t * dy
                if x * x + y * y <= r * r:
                    best = t
                    nx = 0.0
                    ny = 0.0
                    nz = s
    return best, nx, ny, nz


@njit(cache=True)
def _render_kernel(fx, fy, cx, cy, cam_r, kinds, inv_r, cam_local, halfs, colors,
                   ids, bboxes, light, ambient, diffuse, bg_top, bg_bot,
                   rgb, depth, seg):
    height, width = depth.shape
    n = kinds.shape[0]
    for v in range(height):
        gv = v / (height - 1.0)
        bg_r = bg_top[0] * (1.0 - gv) + bg_bot[0] * gv
        bg_g = bg_top[1] * (1.0 - gv) + bg_bot[1] * gv
        bg_b = bg_top[2] * (1.0 - gv) + bg_bot[2] * gv
        for u in range(width):
            dcx = (u - cx) / fx
            dcy = (v - cy) / fy
            dwx = cam_r[0, 0] * dcx + cam_r[0, 1] * dcy + cam_r[0, 2]
            dwy = cam_r[1, 0] * dcx + cam_r[1, 1] * dcy + cam_r[1, 2]
            dwz = cam_r[2, 0] * dcx + cam_r[2, 1] * dcy + cam_r[2, 2]
            best = _MISS
            best_b = -1
            bnx = 0.0
            bny = 0.0
            bnz = 0.0
            for b in range(n):
                if (u < bboxes[b, 0] or u > bboxes[b, 1]
                        or v < bboxes[b, 2] or v > bboxes[b, 3]):
                    continue
                ox = cam_local[b, 0]
                oy = cam_local[b, 1]
                oz = cam_local[b, 2]
                ldx = inv_r[b, 0, 0] * dwx + inv_r[b, 0, 1] * dwy + inv_r[b, 0, 2] * dwz
                ldy = inv_r[b, 1, 0] * dwx + inv_r[b, 1, 1] * dwy + inv_r[b, 1, 2] * dwz
                ldz = inv_r[b, 2, 0] * dwx + inv_r[b, 2, 1] * dwy + inv_r[b, 2, 2] * dwz
                if kinds[b] == 0:
                    t, nx, ny, nz = _hit_box(
                        ox, oy, oz, ldx, ldy, ldz, halfs[b, 0], halfs[b, 1], halfs[b, 2]
                    )
                elif kinds[b] == 1:
                    t, nx, ny, nz = _hit_sphere(ox, oy, oz, ldx, ldy, ldz, halfs[b, 0])
                else:
                    t, nx, ny, nz = _hit_cylinder(
                        ox, oy, oz, ldx, ldy, ldz, halfs[b, 0], halfs[b, 2]
                    )
                if t < best:
                    best = t
                    best_b = b
                    bnx = nx
                    bny = ny
                    bnz = nz
            if best_b < 0:
                rgb[v, u, 0] = np.uint8(bg_r * 255.0 + 0.5)
                rgb[v, u, 1] = np.uint8(bg_g * 255.0 + 0.5)
                rgb[v, u, 2] = np.uint8(bg_b * 255.0 + 0.5)
                depth[v, u] = 0.0
                seg[v, u] = 0
            else:
                # local normal back to world: rows of inv_r are world axes
                wx = inv_r[best_b, 0, 0] * bnx + inv_r[best_b, 1, 0] * bny + inv_r[best_b, 2, 0] * bnz
                wy = inv_r[best_b, 0, 1] * bnx + inv_r[best_b, 1, 1] * bny + inv_r[best_b, 2, 1] * bnz
                wz = inv_r[best_b, 0, 2] * bnx + inv_r[best_b, 1, 2] * bny + inv_r[best_b, 2, 2] * bnz
                norm = math.sqrt(wx * wx + wy * wy + wz * wz)
                if norm > 0.0:
                    wx /= norm
                    wy /= norm
                    wz /= norm
                d = -(wx * light[0] + wy * light[1] + wz * light[2])
                s = ambient
                if d > 0.0:
                    s = ambient + diffuse * d
                for ch in range(3):
                    val = colors[best_b, ch] * s
                    if val > 1.0:
                        val = 1.0
                    if val < 0.0:
                        val = 0.0
                    rgb[v, u, ch] = np.uint8(val * 255.0 + 0.5)
                depth[v, u] = best
                seg[v, u] = ids[best_b]


def _bounding_radius(kind: int, half: np.ndarray) -> float:
    if kind == 1:
        return float(half[0])
    if kind == 2:
        return math.hypot(half[0], half[2])
    return float(np.linalg.norm(half))


def _screen_bboxes(kinds, rotations, origins, halfs, cam: RigidTransform,
                   k: CameraIntrinsics) -> np.ndarray:
    """Conservative integer pixel bounds per body; (1,0,1,0) marks off-screen."""
    n = len(kinds)
    out = np.zeros((n, 4), dtype=np.int64)
    cam_r = cam.rotation_matrix()
    for b in range(n):
        r = _bounding_radius(kinds[b], halfs[b])
        c_cam = cam_r.T @ (origins[b] - cam.trans)
        z_near = c_cam[2] - r
        if c_cam[2] + r <= 1e-3:
            out[b] = (1, 0, 1, 0)
            continue
        if z_near < 0.02:
            out[b] = (0, k.width - 1, 0, k.height - 1)
            continue
        umin = k.cx + k.fx * (c_cam[0] - r) / z_near
        umax = k.cx + k.fx * (c_cam[0] + r) / z_near
        vmin = k.cy + k.fy * (c_cam[1] - r) / z_near
        vmax = k.cy + k.fy * (c_cam[1] + r) / z_near
        u0 = max(0, int(math.floor(umin)) - 2)
        u1 = min(k.width - 1, int(math.ceil(umax)) + 2)
        v0 = max(0, int(math.floor(vmin)) - 2)
        v1 = min(k.height - 1, int(math.ceil(vmax)) + 2)
        if u0 > u1 or v0 > v1:
            out[b] = (1, 0, 1, 0)
        else:
            out[b] = (u0, u1, v0, v1)
    return out


def render_bodies(
    bodies: list,
    cam: RigidTransform,
    k: CameraIntrinsics,
    settings: RenderSettings | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cast one ray per pixel against (kind, pose, half, color, id) tuples.

    Returns (rgb uint8 HxWx3, depth float64 meters with 0 = no hit,
    segmentation int32 with 0 = background).
    """
    settings = settings or RenderSettings()
    n = len(bodies)
    kinds = np.zeros(n, dtype=np.int64)
    inv_r = np.zeros((n, 3, 3))
    origins = np.zeros((n, 3))
    cam_local = np.zeros((n, 3))
    halfs = np.zeros((n, 3))
    colors = np.zeros((n, 3))
    ids = np.zeros(n, dtype=np.int32)
    rotations = []
    for i, (kind, pose, half, color, body_id) in enumerate(bodies):
        kinds[i] = int(kind)
        rot = pose.rotation_matrix()
        rotations.append(rot)
        inv_r[i] = rot.T
        origins[i] = pose.trans
        cam_local[i] = rot.T @ (cam.trans - pose.trans)
        halfs[i] = np.asarray(half, dtype=float)
        colors[i] = np.asarray(color, dtype=float)
        ids[i] = int(body_id)

    bboxes = _screen_bboxes(kinds, rotations, origins, halfs, cam, k)
    rgb = np.empty((k.height, k.width, 3), dtype=np.uint8)
    depth = np.empty((k.height, k.width), dtype=np.float64)
    seg = np.empty((k.height, k.width), dtype=np.int32)
    _render_kernel(
        float(k.fx), float(k.fy), float(k.cx), float(k.cy),
        cam.rotation_matrix(), kinds, inv_r, cam_local, halfs, colors, ids,
        bboxes, settings.light, settings.ambient, settings.diffuse,
        settings.bg_top, settings.bg_bot, rgb, depth, seg,
    )
    return rgb, depth, seg
