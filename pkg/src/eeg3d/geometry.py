"""Text-to-image and image-to-mesh stages, the triangle mesh model and OBJ I/O.

Both stages talk to untrusted external providers through byte-oriented
contracts: the text-to-image provider returns P6 bytes for a request dict,
the reconstruction provider returns OBJ text for an image. Everything that
comes back is decoded and validated before it reaches downstream code.
"""

from __future__ import annotations

import base64
import hashlib
import os
import threading
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .cache import config_hash, image_digest, sha256_hex
from .dataset import StimulusImage
from .pixmap import NAMED_COLORS, PixmapError, decode_ppm, encode_ppm
from .providers import DEFAULT_IN_FLIGHT, JsonEndpoint, ProviderError, call_with_backoff, reply_field

PPM_MIME = "image/x-portable-pixmap"
GENERATED_LABEL = -1  # class label carried by generated images


class GeometryError(ValueError):
    pass


class MeshError(GeometryError):
    """A mesh breaks one of its invariants; ``invariant`` names which."""

    def __init__(self, invariant: str, message: str):
        self.invariant = invariant
        super().__init__(f"{invariant}: {message}")


class ObjFormatError(GeometryError):
    def __init__(self, line: int | None, message: str):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class GenerationFailed(ProviderError):
    pass


# -- mesh model ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    vertex_colors: np.ndarray | None = None
    provenance: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError("vertex_shape", f"vertices must be (V, 3), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise MeshError("finite_vertices", "vertex coordinates must be finite")
        t = np.array(self.triangles, dtype=np.int64)
        if t.size == 0:
            t = t.reshape(0, 3)
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError("triangle_shape", f"triangles must be (F, 3), got {t.shape}")
        if len(t) == 0:
            raise MeshError("min_triangles", "a mesh needs at least one triangle")
        if t.min() < 0 or t.max() >= len(v):
            bad = int(t.max()) if t.max() >= len(v) else int(t.min())
            raise MeshError("index_bound", f"triangle index {bad} outside [0, {len(v)})")
        rep = (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
        if rep.any():
            raise MeshError("distinct_indices", f"triangle {int(np.argmax(rep))} repeats a vertex index")
        c = None
        if self.vertex_colors is not None:
            c = np.array(self.vertex_colors, dtype=np.float64)
            if c.shape != v.shape:
                raise MeshError("color_count", f"{len(c)} vertex colors for {len(v)} vertices")
            if not np.all(np.isfinite(c)):
                raise MeshError("finite_colors", "vertex colors must be finite")
        for arr in (v, t, c):
            if arr is not None:
                arr.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "vertex_colors", c)

    def __eq__(self, other):
        if not isinstance(other, TriMesh):
            return NotImplemented
        if (self.vertex_colors is None) != (other.vertex_colors is None):
            return False
        return (
            np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.triangles, other.triangles)
            and (self.vertex_colors is None or np.array_equal(self.vertex_colors, other.vertex_colors))
        )

    def with_provenance(self, provenance: dict) -> "TriMesh":
        return TriMesh(self.vertices, self.triangles, self.vertex_colors, provenance)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def digest(self) -> str:
        return sha256_hex(format_obj(self).encode("utf-8"))


def normalize_mesh(mesh: TriMesh) -> TriMesh:
    """Translate the vertex centroid to the origin and scale uniformly into the unit sphere."""
    centered = mesh.vertices - mesh.vertices.mean(axis=0)
    radius = float(np.sqrt((centered * centered).sum(axis=1)).max())
    if radius > 0:
        centered = centered / radius
    return TriMesh(centered, mesh.triangles, mesh.vertex_colors, mesh.provenance)


def cube_mesh(edge: float = 1.0, color: tuple[float, float, float] | None = None) -> TriMesh:
    """Axis-aligned cube centered at the origin, 8 vertices and 12 outward-facing triangles."""
    h = edge / 2.0
    v = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
    # vertex index = 4*ix + 2*iy + iz
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]
    colors = None if color is None else np.tile(np.asarray(color, dtype=np.float64), (8, 1))
    return TriMesh(v, tris, colors)


# -- OBJ -------------------------------------------------------------------------

def parse_obj(text: str) -> tuple[TriMesh, int]:
    """Parse the ``v``/``f`` subset of OBJ; returns (mesh, ignored record count).

    Polygons are fan-triangulated from their first vertex. Face entries may
    use ``v/vt/vn`` syntax (only ``v`` is used) and negative relative
    indices. ``v x y z r g b`` supplies vertex colors, which must then be
    given for every vertex.
    """
    verts, colors, vlines, tris = [], [], [], []
    ignored = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) not in (4, 7):
                raise ObjFormatError(lineno, f"vertex needs 3 or 6 numbers, got {len(parts) - 1}")
            try:
                nums = [float(p) for p in parts[1:]]
            except ValueError:
                raise ObjFormatError(lineno, "non-numeric vertex value") from None
            verts.append(nums[:3])
            colors.append(nums[3:] if len(nums) == 6 else None)
            vlines.append(lineno)
        elif tag == "f":
            if len(parts) < 4:
                raise ObjFormatError(lineno, "face needs at least 3 vertices")
            idx = []
            for p in parts[1:]:
                try:
                    k = int(p.split("/", 1)[0])
                except ValueError:
                    raise ObjFormatError(lineno, f"bad face index {p!r}") from None
                if k == 0:
                    raise ObjFormatError(lineno, "face index 0 is not valid in OBJ")
                idx.append(k - 1 if k > 0 else len(verts) + k)
                if not 0 <= idx[-1] < len(verts) and k < 0:
                    raise ObjFormatError(lineno, f"relative face index {k} points before the first vertex")
            tris.extend((idx[0], idx[i], idx[i + 1]) for i in range(1, len(idx) - 1))
        else:
            ignored += 1
    if not tris:
        raise ObjFormatError(None, "no faces")
    has = [c is not None for c in colors]
    odd = [i for i, h in enumerate(has) if h != has[0]]
    if odd:
        raise ObjFormatError(vlines[odd[0]], "vertex colors must be given for every vertex or none")
    vc = np.array(colors, dtype=np.float64) if has and has[0] else None
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), tris, vc), ignored


def load_obj(path: str | os.PathLike) -> TriMesh:
    mesh, ignored = parse_obj(Path(path).read_text(encoding="utf-8"))
    if ignored:
        warnings.warn(f"{path}: ignored {ignored} unsupported OBJ records", stacklevel=2)
    return mesh


def format_obj(mesh: TriMesh) -> str:
    lines = []
    for i, v in enumerate(mesh.vertices):
        vals = list(v) if mesh.vertex_colors is None else [*v, *mesh.vertex_colors[i]]
        lines.append("v " + " ".join("%.17g" % x for x in vals))
    lines.extend("f %d %d %d" % (a + 1, b + 1, c + 1) for a, b, c in mesh.triangles)
    return "\n".join(lines) + "\n"


def write_obj(mesh: TriMesh, path: str | os.PathLike) -> None:
    Path(path).write_text(format_obj(mesh), encoding="utf-8")


# -- stage config and provenance -------------------------------------------------

@dataclass(frozen=True)
class GenStageConfig:
    t2i_steps: int = 30
    t2i_guidance: float = 4.5
    texture_resolution: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.t2i_steps < 1:
            raise GeometryError("t2i_steps must be >= 1")
        if self.t2i_guidance < 0:
            raise GeometryError("t2i_guidance must be >= 0")
        if self.texture_resolution < 1:
            raise GeometryError("texture_resolution must be >= 1")


def provenance(stage: str, provider_id: str, config, seed: int, upstream_hash: str, mode: str) -> dict:
    return {"stage": stage, "provider_id": provider_id, "config_hash": config_hash(config), "seed": int(seed),
            "upstream_hash": upstream_hash, "mode": mode}


# -- provider contracts ----------------------------------------------------------

class ImageGenerator(Protocol):
    provider_id: str

    def generate_image(self, request: dict) -> bytes:
        ...


class MeshReconstructor(Protocol):
    provider_id: str

    def reconstruct(self, request: dict) -> bytes:
        ...


def t2i_request(prompt: str, config: GenStageConfig) -> dict:
    return {"prompt": prompt, "steps": config.t2i_steps, "guidance": config.t2i_guidance, "seed": config.seed}


def to3d_request(image: StimulusImage, config: GenStageConfig) -> dict:
    return {"image": encode_ppm(image.pixels), "mime": PPM_MIME,
            "texture_resolution": config.texture_resolution, "seed": config.seed}


def text_to_image(description, config: GenStageConfig, provider: ImageGenerator, *,
                  sleep: Callable[[float], None] | None = None) -> StimulusImage:
    """Render a description to an image; provenance records the prompt hash, seed and config."""
    prompt = getattr(description, "text", description)
    if not isinstance(prompt, str) or not prompt.strip():
        raise GeometryError("text-to-image needs a non-empty prompt")
    request = t2i_request(prompt, config)
    data = call_with_backoff(lambda: provider.generate_image(request), provider, sleep=sleep)
    if not data:
        raise GenerationFailed("provider returned an empty image")
    try:
        pixels = decode_ppm(data)
    except PixmapError as exc:
        raise GenerationFailed(f"provider returned an unreadable image: {exc}") from None
    prompt_hash = sha256_hex(prompt.encode("utf-8"))
    prov = provenance("t2i", provider.provider_id, config, config.seed, prompt_hash, "full")
    return StimulusImage(f"t2i-{sha256_hex(data)[:16]}", GENERATED_LABEL, pixels, prov)


def image_to_mesh(image: StimulusImage, config: GenStageConfig, provider: MeshReconstructor, *,
                  mode: str = "full", sleep: Callable[[float], None] | None = None) -> TriMesh:
    """Lift one image to a validated mesh.

    The mesh is returned in the provider's own units; renderers normalize
    on ingest (see ``normalize_mesh``).
    """
    request = to3d_request(image, config)
    data = call_with_backoff(lambda: provider.reconstruct(request), provider, sleep=sleep)
    try:
        text = data.decode("utf-8")
    except (UnicodeDecodeError, AttributeError):
        raise ObjFormatError(0, "provider reply is not UTF-8 OBJ text") from None
    mesh, _ = parse_obj(text)  # validation happens in TriMesh itself
    return mesh.with_provenance(provenance("to3d", provider.provider_id, config, config.seed,
                                           image_digest(image), mode))


def ablation_bypass(decoded: StimulusImage, config: GenStageConfig, provider: MeshReconstructor, *,
                    sleep: Callable[[float], None] | None = None) -> TriMesh:
    """Lift the decoded image straight to 3D, skipping description and text-to-image."""
    return image_to_mesh(decoded, config, provider, mode="direct", sleep=sleep)


# -- remote adapters -------------------------------------------------------------

class RemoteImageGenerator:
    """Reply: ``{"image": <base64 P6>}``."""

    def __init__(self, endpoint: JsonEndpoint, provider_id: str, *, max_in_flight: int = DEFAULT_IN_FLIGHT):
        self.endpoint = endpoint
        self.provider_id = provider_id
        self.max_in_flight = max_in_flight

    def generate_image(self, request: dict) -> bytes:
        return base64.b64decode(reply_field(self.endpoint.request(request), "image"))


class RemoteMeshReconstructor:
    """Reply: ``{"obj": <OBJ text>}``; the request image travels base64-encoded."""

    def __init__(self, endpoint: JsonEndpoint, provider_id: str, *, max_in_flight: int = DEFAULT_IN_FLIGHT):
        self.endpoint = endpoint
        self.provider_id = provider_id
        self.max_in_flight = max_in_flight

    def reconstruct(self, request: dict) -> bytes:
        wire = dict(request, image=base64.b64encode(request["image"]).decode("ascii"))
        return reply_field(self.endpoint.request(wire), "obj").encode("utf-8")


# -- deterministic mocks -----------------------------------------------------------

class _Counting:
    max_in_flight = DEFAULT_IN_FLIGHT

    def __init__(self, provider_id: str):
        self.provider_id = provider_id
        self.calls = 0
        self.requests: list[dict] = []
        self._lock = threading.Lock()

    def _record(self, request: dict) -> None:
        with self._lock:
            self.calls += 1
            self.requests.append(request)


def _foreground_color(pixels: np.ndarray) -> np.ndarray:
    px = pixels.reshape(-1, 3).astype(np.float64)
    mask = px.min(axis=1) < 235
    return (px[mask] if mask.any() else px).mean(axis=0) / 255.0


class ProceduralImageGenerator(_Counting):
    """Prompt hash + seed -> a white-background image with one colored shape.

    A palette color named in the prompt sets the shape color; otherwise the
    color comes from the hash.
    """

    def __init__(self, side: int = 64, provider_id: str = "mock-t2i"):
        super().__init__(provider_id)
        self.side = side

    def generate_image(self, request: dict) -> bytes:
        self._record(request)
        prompt = request["prompt"]
        digest = hashlib.sha256(f"{prompt}\x00{request['seed']}".encode("utf-8")).digest()
        rng = np.random.default_rng(np.frombuffer(digest[:16], dtype=np.uint32))
        words = {w.strip(".,;:!").lower() for w in prompt.split()}
        named = [n for n in NAMED_COLORS if n in words and n != "white"]
        color = np.array(NAMED_COLORS[named[0]] if named else rng.integers(0, 200, 3), dtype=np.uint8)
        n = self.side
        yy, xx = np.mgrid[0:n, 0:n] + 0.5
        cx, cy = n / 2 + rng.uniform(-0.08, 0.08, 2) * n
        r = n * rng.uniform(0.22, 0.36)
        shape = int(rng.integers(0, 3))
        if shape == 0:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        elif shape == 1:
            mask = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
        else:
            mask = (yy >= cy - r) & (yy <= cy + r) & (np.abs(xx - cx) <= (yy - (cy - r)) / 2)
        px = np.full((n, n, 3), 255, dtype=np.uint8)
        px[mask] = color
        return encode_ppm(px)


class CubeReconstructor(_Counting):
    """A cube whose edge grows with image brightness: 0.5 * 4**b for mean brightness b in [0, 1].

    So b = 0, 0.5, 1 give edges 0.5, 1 and 2. Vertices take the mean
    non-white color.
    """

    def __init__(self, provider_id: str = "mock-cube"):
        super().__init__(provider_id)

    def reconstruct(self, request: dict) -> bytes:
        self._record(request)
        px = decode_ppm(request["image"])
        b = float(px.astype(np.float64).mean() / 255.0)
        return format_obj(cube_mesh(0.5 * 4.0 ** b, tuple(_foreground_color(px)))).encode("utf-8")


class ExtrusionReconstructor(_Counting):
    """Extrude the image silhouette on a coarse grid into a slab of colored boxes.

    Each non-white cell of a ``grid`` x ``grid`` downsample becomes a box of
    its mean color; faces shared by two filled cells are dropped. The result
    has view-dependent appearance, which is all the hermetic pipeline needs.
    """

    def __init__(self, grid: int = 8, depth: float = 0.5, provider_id: str = "mock-extrude"):
        super().__init__(provider_id)
        self.grid = grid
        self.depth = depth

    def reconstruct(self, request: dict) -> bytes:
        self._record(request)
        px = decode_ppm(request["image"]).astype(np.float64)
        g = self.grid
        h, w = px.shape[:2]
        rows = np.minimum((np.arange(h) * g) // h, g - 1)
        cols = np.minimum((np.arange(w) * g) // w, g - 1)
        cell_sum = np.zeros((g, g, 3))
        cell_fg = np.zeros((g, g))
        fg = px.min(axis=2) < 235
        np.add.at(cell_sum, (rows[:, None], cols[None, :]), px * fg[..., None])
        np.add.at(cell_fg, (rows[:, None], cols[None, :]), fg)
        counts = np.zeros((g, g))
        np.add.at(counts, (rows[:, None], cols[None, :]), 1)
        filled = cell_fg * 2 >= counts
        if not filled.any():
            filled[g // 2, g // 2] = True
        verts, colors, tris = [], [], []
        size = 1.0 / g
        z0, z1 = -self.depth / 2, self.depth / 2
        for i in range(g):
            for j in range(g):
                if not filled[i, j]:
                    continue
                col = cell_sum[i, j] / max(cell_fg[i, j], 1.0) / 255.0
                x0, x1 = j * size - 0.5, (j + 1) * size - 0.5
                y1, y0 = 0.5 - i * size, 0.5 - (i + 1) * size  # image rows grow downward
                faces = [((x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1)),   # front (+z)
                         ((x1, y0, z0), (x0, y0, z0), (x0, y1, z0), (x1, y1, z0))]   # back
                if i == 0 or not filled[i - 1, j]:
                    faces.append(((x0, y1, z1), (x1, y1, z1), (x1, y1, z0), (x0, y1, z0)))
                if i == g - 1 or not filled[i + 1, j]:
                    faces.append(((x0, y0, z0), (x1, y0, z0), (x1, y0, z1), (x0, y0, z1)))
                if j == 0 or not filled[i, j - 1]:
                    faces.append(((x0, y0, z0), (x0, y0, z1), (x0, y1, z1), (x0, y1, z0)))
                if j == g - 1 or not filled[i, j + 1]:
                    faces.append(((x1, y0, z1), (x1, y0, z0), (x1, y1, z0), (x1, y1, z1)))
                for quad in faces:
                    base = len(verts)
                    verts.extend(quad)
                    colors.extend([col] * 4)
                    tris.extend([(base, base + 1, base + 2), (base, base + 2, base + 3)])
        return format_obj(TriMesh(verts, tris, colors)).encode("utf-8")


class FixedReconstructor(_Counting):
    """Returns the same OBJ bytes for every request."""

    def __init__(self, obj: bytes | str, provider_id: str = "mock-fixed-mesh"):
        super().__init__(provider_id)
        self.obj = obj.encode("utf-8") if isinstance(obj, str) else obj

    def reconstruct(self, request: dict) -> bytes:
        self._record(request)
        return self.obj
