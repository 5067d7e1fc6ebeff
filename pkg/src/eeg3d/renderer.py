"""Six-view software rasterizer and camera export.

Conventions: right-handed world, +y up, the front camera sits on +z. A view
at azimuth ``az`` and elevation ``el`` places the camera at
``distance * (cos el sin az, sin el, cos el cos az)`` looking at the origin,
so azimuth 90 is on +x. Pixel rows grow downward.

The rasterizer projects every vertex, then tests pixel centers against the
three edge functions of each triangle in image-centered coordinates. All of
that is plain elementwise float64 arithmetic in a fixed order, so a scalar
per-pixel loop using the same formulas reproduces it bit for bit. Depth is
perspective-correct (barycentric interpolation of 1/z); ties keep the earlier
triangle. Shading is flat: the triangle color times ``max(0, n . l)`` where
``n`` is the winding normal and ``l`` points at the camera (a headlight), so
back-facing triangles render black rather than vanishing.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import TriMesh
from .pixmap import encode_ppm

VIEW_LABELS = ("front", "front-left", "left", "back", "right", "front-right")
NEAR = 1e-2
DEFAULT_COLOR = (0.7, 0.7, 0.7)


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class ViewSpec:
    label: str
    azimuth: float
    elevation: float = 20.0
    distance: float = 2.5
    fov: float = 40.0
    resolution: tuple[int, int] = (512, 512)  # (width, height)

    def __post_init__(self):
        if self.label not in VIEW_LABELS:
            raise RenderError(f"unknown view label {self.label!r}")
        if not self.distance > 0:
            raise RenderError(f"camera distance must be positive, got {self.distance}")
        if not 0 < self.fov < 180:
            raise RenderError(f"fov must lie in (0, 180), got {self.fov}")
        if not -90 < self.elevation < 90:
            raise RenderError(f"elevation must lie in (-90, 90), got {self.elevation}")
        w, h = self.resolution
        if w <= 0 or h <= 0:
            raise RenderError(f"resolution must be positive, got {self.resolution}")
        object.__setattr__(self, "azimuth", float(self.azimuth) % 360.0)
        object.__setattr__(self, "resolution", (int(w), int(h)))


@dataclass(frozen=True)
class ViewConfig:
    azimuth_step: float = 60.0
    elevation: float = 20.0
    distance: float = 2.5
    fov: float = 40.0
    width: int = 512
    height: int = 512


# the literal 30 degree step; six views then span 150 degrees only
THIRTY_DEGREE_PRESET = ViewConfig(azimuth_step=30.0)


def canonical_views(config: ViewConfig = ViewConfig()) -> list[ViewSpec]:
    return [ViewSpec(label, k * config.azimuth_step, config.elevation, config.distance, config.fov,
                     (config.width, config.height))
            for k, label in enumerate(VIEW_LABELS)]


@dataclass(frozen=True, eq=False)
class RenderedView:
    pixels: np.ndarray
    view: ViewSpec
    object_id: str = ""

    def to_ppm(self) -> bytes:
        return encode_ppm(self.pixels)


# -- camera ----------------------------------------------------------------------

def _sincos_deg(angle: float) -> tuple[float, float]:
    """sin and cos of an angle in degrees; exact at multiples of 90 and odd in the angle."""
    a = math.fmod(angle, 360.0)
    if a >= 180.0:
        a -= 360.0
    elif a < -180.0:
        a += 360.0
    sign = -1.0 if a < 0 else 1.0
    a = abs(a)  # now in [0, 180]
    if a == 0.0:
        s, c = 0.0, 1.0
    elif a == 90.0:
        s, c = 1.0, 0.0
    elif a == 180.0:
        s, c = 0.0, -1.0
    elif a > 90.0:
        r = math.radians(180.0 - a)
        s, c = math.sin(r), -math.cos(r)
    else:
        r = math.radians(a)
        s, c = math.sin(r), math.cos(r)
    return sign * s, c


def _norm3(v):
    n = math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    return (v[0] / n, v[1] / n, v[2] / n)


def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


@dataclass(frozen=True)
class CameraFrame:
    position: tuple[float, float, float]
    right: tuple[float, float, float]
    up: tuple[float, float, float]
    forward: tuple[float, float, float]
    focal: float  # pixels per unit of x/z and y/z


def camera_frame(view: ViewSpec) -> CameraFrame:
    sa, ca = _sincos_deg(view.azimuth)
    se, ce = _sincos_deg(view.elevation)
    d = float(view.distance)
    pos = (d * (ce * sa), d * se, d * (ce * ca))
    fwd = _norm3((-pos[0], -pos[1], -pos[2]))
    right = _norm3(_cross(fwd, (0.0, 1.0, 0.0)))
    up = _cross(right, fwd)
    focal = (view.resolution[1] / 2.0) / math.tan(math.radians(view.fov) / 2.0)
    return CameraFrame(pos, right, up, fwd, focal)


def project(vertices: np.ndarray, frame: CameraFrame) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Image-centered screen coordinates (X right, Y down) and camera depth z."""
    v = np.asarray(vertices, dtype=np.float64)
    dx = v[:, 0] - frame.position[0]
    dy = v[:, 1] - frame.position[1]
    dz = v[:, 2] - frame.position[2]
    r, u, f = frame.right, frame.up, frame.forward
    xc = dx * r[0] + dy * r[1] + dz * r[2]
    yc = dx * u[0] + dy * u[1] + dz * u[2]
    zc = dx * f[0] + dy * f[1] + dz * f[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = frame.focal * xc / zc
        sy = frame.focal * (-yc) / zc
    return sx, sy, zc


def pixel_centers(n: int) -> np.ndarray:
    """Image-centered coordinates of the n pixel centers along one axis."""
    return np.arange(n) + 0.5 - n / 2.0


def edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def rasterize(mesh: TriMesh, view: ViewSpec) -> np.ndarray:
    """Index of the visible triangle per pixel, shape (height, width); -1 is background."""
    w, h = view.resolution
    frame = camera_frame(view)
    sx, sy, zc = project(mesh.vertices, frame)
    cx, cy = pixel_centers(w), pixel_centers(h)
    index = np.full((h, w), -1, dtype=np.int64)
    best = np.zeros((h, w))  # 1/z of the nearest hit; 0 means nothing yet
    for k, (a, b, c) in enumerate(mesh.triangles):
        if zc[a] <= NEAR or zc[b] <= NEAR or zc[c] <= NEAR:
            continue
        ax, ay, bx, by, qx, qy = sx[a], sy[a], sx[b], sy[b], sx[c], sy[c]
        area = edge(ax, ay, bx, by, qx, qy)
        if area == 0.0:
            continue
        # candidate pixel window; membership is decided by the edge tests alone
        i0 = max(int(math.floor(min(ax, bx, qx) + w / 2.0 - 0.5)) - 1, 0)
        i1 = min(int(math.ceil(max(ax, bx, qx) + w / 2.0 - 0.5)) + 1, w - 1)
        j0 = max(int(math.floor(min(ay, by, qy) + h / 2.0 - 0.5)) - 1, 0)
        j1 = min(int(math.ceil(max(ay, by, qy) + h / 2.0 - 0.5)) + 1, h - 1)
        if i0 > i1 or j0 > j1:
            continue
        px = cx[i0:i1 + 1][None, :]
        py = cy[j0:j1 + 1][:, None]
        e0 = edge(bx, by, qx, qy, px, py)
        e1 = edge(qx, qy, ax, ay, px, py)
        e2 = edge(ax, ay, bx, by, px, py)
        inside = ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
        if not inside.any():
            continue
        inv_z = (e0 / area) * (1.0 / zc[a]) + (e1 / area) * (1.0 / zc[b]) + (e2 / area) * (1.0 / zc[c])
        win = best[j0:j1 + 1, i0:i1 + 1]
        hit = inside & (inv_z > win)
        win[hit] = inv_z[hit]
        index[j0:j1 + 1, i0:i1 + 1][hit] = k
    return index


def triangle_shades(mesh: TriMesh, view: ViewSpec) -> np.ndarray:
    """Flat-shaded uint8 color per triangle, shape (F, 3)."""
    v = mesh.vertices
    a, b, c = v[mesh.triangles[:, 0]], v[mesh.triangles[:, 1]], v[mesh.triangles[:, 2]]
    n = np.cross(b - a, c - a)
    length = np.linalg.norm(n, axis=1)
    n = n / np.where(length > 0, length, 1.0)[:, None]
    light = np.array(_norm3(camera_frame(view).position))
    lam = np.maximum(n[:, 0] * light[0] + n[:, 1] * light[1] + n[:, 2] * light[2], 0.0)
    if mesh.vertex_colors is None:
        base = np.tile(DEFAULT_COLOR, (len(mesh.triangles), 1))
    else:
        vc = mesh.vertex_colors
        t = mesh.triangles
        base = (vc[t[:, 0]] + vc[t[:, 1]] + vc[t[:, 2]]) / 3.0
    shade = base * lam[:, None]
    return np.rint(np.clip(shade, 0.0, 1.0) * 255.0).astype(np.uint8)


def render(mesh: TriMesh, view: ViewSpec, object_id: str = "") -> RenderedView:
    index = rasterize(mesh, view)
    w, h = view.resolution
    pixels = np.full((h, w, 3), 255, dtype=np.uint8)
    covered = index >= 0
    pixels[covered] = triangle_shades(mesh, view)[index[covered]]
    return RenderedView(pixels, view, object_id)


def render_all(mesh: TriMesh, views: Sequence[ViewSpec], object_id: str = "", workers: int = 1) -> list[RenderedView]:
    """Render every view, in order; per-view failures name the view label."""

    def one(view):
        try:
            return render(mesh, view, object_id)
        except Exception as exc:
            raise RenderError(f"view {view.label!r}: {exc}") from exc

    if workers <= 1:
        return [one(v) for v in views]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, views))


# -- camera export -----------------------------------------------------------------

def _g9(x: float) -> str:
    s = "%.9g" % x
    return "0" if s == "-0" else s


def camera_record(view: ViewSpec) -> str:
    """One JSON line: label, position, look_at, up, fov, resolution (in that order)."""
    f = camera_frame(view)
    vec = lambda t: "[" + ", ".join(_g9(x) for x in t) + "]"  # noqa: E731
    w, h = view.resolution
    return (f'{{"label": "{view.label}", "position": {vec(f.position)}, "look_at": [0, 0, 0], '
            f'"up": {vec(f.up)}, "fov": {_g9(view.fov)}, "resolution": [{w}, {h}]}}')


def export_camera_config(views: Sequence[ViewSpec], path: str | os.PathLike) -> None:
    Path(path).write_text("".join(camera_record(v) + "\n" for v in views), encoding="utf-8")
