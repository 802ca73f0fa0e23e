"""Synthetic scenes, the skewed-slice image former, and the slow oracle.

Everything geometric in the test suite bottoms out here: scenes are
analytic (sphere / cylinder / point primitives with an optional soft
edge), the camera model samples them on the tilted sheet planes, and two
deliberately brute-force references exist to check the fast path against:

* :func:`reference_deskew` materializes the whole enlarged canvas and
  takes one max over it, no streaming;
* :func:`oracle_project` rotates a dense voxel grid in the (scan, height)
  plane and projects along the viewing ray, no shear-warp shortcut.

Scene and grid objects are immutable after construction; all rendering
functions are pure.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
from PIL import Image
from scipy import ndimage

from . import geometry
from .errors import ParameterError
from .geometry import SheetGeometry
from .pipeline import RawFrame

KINDS = ("sphere", "cylinder", "point")
MAX_INTENSITY = 65535


@dataclass(frozen=True)
class Primitive:
    """One analytic shape: value = intensity inside, 0 outside.

    soft_edge_um widens the boundary into a linear ramp (full intensity
    at radius - edge/2, zero at radius + edge/2) so that sampled images
    are smooth enough to compare across interpolation schemes.
    """

    kind: str
    center_um: tuple[float, float, float]
    radius_um: float
    intensity: float
    axis: tuple[float, float, float] | None = None
    soft_edge_um: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown primitive kind {self.kind!r}")
        if len(self.center_um) != 3:
            raise ParameterError("center_um must have 3 components")
        if self.radius_um <= 0:
            raise ParameterError("radius_um must be > 0")
        if not 0 <= self.intensity <= MAX_INTENSITY:
            raise ParameterError(
                f"intensity {self.intensity} outside 16-bit range"
            )
        if self.soft_edge_um < 0:
            raise ParameterError("soft_edge_um must be >= 0")
        if self.kind == "cylinder":
            if self.axis is None or not any(self.axis):
                raise ParameterError("cylinder needs a nonzero axis")
        object.__setattr__(self, "center_um", tuple(float(v) for v in self.center_um))
        if self.axis is not None:
            object.__setattr__(self, "axis", tuple(float(v) for v in self.axis))

    def distance_um(self, pts: np.ndarray) -> np.ndarray:
        """Distance field of the primitive's surface generator."""
        rel = pts - np.asarray(self.center_um)
        if self.kind == "cylinder":
            a = np.asarray(self.axis, dtype=float)
            a = a / np.linalg.norm(a)
            along = rel @ a
            return np.linalg.norm(rel - along[..., None] * a, axis=-1)
        return np.linalg.norm(rel, axis=-1)

    def evaluate(self, pts: np.ndarray) -> np.ndarray:
        d = self.distance_um(pts)
        e = self.soft_edge_um
        if e > 0:
            w = np.clip((self.radius_um + e / 2 - d) / e, 0.0, 1.0)
        else:
            w = (d <= self.radius_um).astype(float)
        return self.intensity * w


def sphere(center_um, radius_um, intensity, soft_edge_um=0.0) -> Primitive:
    return Primitive("sphere", tuple(center_um), radius_um, intensity,
                     soft_edge_um=soft_edge_um)


def cylinder(center_um, radius_um, intensity, axis, soft_edge_um=0.0) -> Primitive:
    return Primitive("cylinder", tuple(center_um), radius_um, intensity,
                     axis=tuple(axis), soft_edge_um=soft_edge_um)


def point(center_um, intensity, radius_um=0.05) -> Primitive:
    """Point emitter: a tiny hard sphere, compact by construction so it
    lights up at most one sheet plane when the radius is below half the
    plane spacing."""
    return Primitive("point", tuple(center_um), radius_um, intensity)


@dataclass(frozen=True)
class PhantomScene:
    """Max-combined primitives inside a [0, extent] box (um).

    Outside the extent the scene is identically zero; primitive centers
    must lie inside it.
    """

    primitives: tuple[Primitive, ...]
    extent_um: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "extent_um", tuple(float(v) for v in self.extent_um))
        if len(self.extent_um) != 3 or any(v <= 0 for v in self.extent_um):
            raise ParameterError("extent_um must be 3 positive sizes")
        for prim in self.primitives:
            for c, e in zip(prim.center_um, self.extent_um):
                if not 0 <= c <= e:
                    raise ParameterError(
                        f"{prim.kind} center {prim.center_um} outside extent "
                        f"{self.extent_um}"
                    )

    def evaluate(self, pts: np.ndarray) -> np.ndarray:
        """Scene intensity at sample points (..., 3) in um, float64."""
        pts = np.asarray(pts, dtype=float)
        out = np.zeros(pts.shape[:-1])
        for prim in self.primitives:
            np.maximum(out, prim.evaluate(pts), out=out)
        extent = np.asarray(self.extent_um)
        inside = np.all((pts >= 0.0) & (pts <= extent), axis=-1)
        out[~inside] = 0.0
        return out


# ---------------------------------------------------------------------------
# scene file format


def _scene_schema() -> dict:
    with resources.files("skewstream").joinpath(
        "schemas/phantom_scene.schema.json"
    ).open("r") as fh:
        return json.load(fh)


def scene_to_dict(scene: PhantomScene) -> dict:
    prims = []
    for prim in scene.primitives:
        d = {
            "kind": prim.kind,
            "center_um": list(prim.center_um),
            "radius_um": prim.radius_um,
            "intensity": prim.intensity,
        }
        if prim.axis is not None:
            d["axis"] = list(prim.axis)
        if prim.soft_edge_um:
            d["soft_edge_um"] = prim.soft_edge_um
        prims.append(d)
    return {"extent_um": list(scene.extent_um), "primitives": prims}


def scene_from_dict(data: dict) -> PhantomScene:
    import jsonschema

    try:
        jsonschema.validate(data, _scene_schema())
    except jsonschema.ValidationError as exc:
        raise ParameterError(f"bad scene description: {exc.message}") from exc
    prims = []
    for d in data["primitives"]:
        prims.append(
            Primitive(
                kind=d["kind"],
                center_um=tuple(d["center_um"]),
                radius_um=d.get("radius_um", 0.05),
                intensity=d["intensity"],
                axis=tuple(d["axis"]) if "axis" in d else None,
                soft_edge_um=d.get("soft_edge_um", 0.0),
            )
        )
    return PhantomScene(primitives=tuple(prims), extent_um=tuple(data["extent_um"]))


def load_scene(path) -> PhantomScene:
    with open(path) as fh:
        return scene_from_dict(json.load(fh))


def save_scene(scene: PhantomScene, path) -> None:
    with open(path, "w") as fh:
        json.dump(scene_to_dict(scene), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# voxel grid + oracle


@dataclass(frozen=True)
class VoxelGrid:
    """Dense 16-bit scalar field; voxel (ix, iy, iz) sits at
    origin + index * pitch.  Storage is (nz, ny, nx)."""

    intensities: np.ndarray
    voxel_pitch_um: float
    origin_um: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.voxel_pitch_um <= 0:
            raise ParameterError("voxel pitch must be > 0")
        if self.intensities.ndim != 3 or min(self.intensities.shape) < 1:
            raise ParameterError("grid must be 3-D with all dims >= 1")
        if self.intensities.dtype != np.uint16:
            raise ParameterError("grid intensities must be uint16")

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.intensities.shape
        return nx, ny, nz


def voxelize(scene: PhantomScene, voxel_pitch_um: float,
             extent_um=None) -> VoxelGrid:
    """Sample the scene on a regular grid covering [0, extent]."""
    if voxel_pitch_um <= 0:
        raise ParameterError("voxel pitch must be > 0")
    extent = scene.extent_um if extent_um is None else tuple(extent_um)
    dims = [int(math.floor(e / voxel_pitch_um)) + 1 for e in extent]
    iz, iy, ix = np.meshgrid(
        np.arange(dims[2]), np.arange(dims[1]), np.arange(dims[0]),
        indexing="ij",
    )
    pts = np.stack([ix, iy, iz], axis=-1) * voxel_pitch_um
    vals = scene.evaluate(pts)
    vox = np.clip(np.rint(vals), 0, MAX_INTENSITY).astype(np.uint16)
    return VoxelGrid(intensities=vox, voxel_pitch_um=voxel_pitch_um)


def oracle_project(grid: VoxelGrid, view_angle_deg: float,
                   t_um: np.ndarray | None = None,
                   supersample: int = 2) -> np.ndarray:
    """Brute-force view: rotate the grid in the (scan, height) plane and
    take the maximum along the viewing ray.

    Each output row sits at view-plane coordinate t = y sin(theta)
    + z cos(theta); the ray coordinate v = y cos(theta) - z sin(theta) is
    walked densely (``supersample`` steps per voxel) with trilinear
    interpolation, so no shear/warp machinery is shared with the fast
    path.  By default rows cover the whole rotated grid; passing ``t_um``
    samples at those absolute view-plane coordinates instead (how the
    equivalence tests line the oracle up with display rows).

    Returns float64 (len(t), nx).
    """
    th = math.radians(view_angle_deg)
    st, ct = math.sin(th), math.cos(th)
    nz, ny, nx = grid.intensities.shape
    pitch = grid.voxel_pitch_um
    oy, oz = grid.origin_um[1], grid.origin_um[2]
    ys = np.array([oy, oy + (ny - 1) * pitch])
    zs = np.array([oz, oz + (nz - 1) * pitch])
    corners = np.array([(y, z) for y in ys for z in zs])
    if t_um is None:
        tc = corners[:, 0] * st + corners[:, 1] * ct
        t_um = np.arange(tc.min(), tc.max() + pitch / 2, pitch)
    else:
        t_um = np.asarray(t_um, dtype=float)
    vc = corners[:, 0] * ct - corners[:, 1] * st
    v = np.arange(vc.min(), vc.max() + pitch / (2 * supersample),
                  pitch / supersample)
    tt, vv = np.meshgrid(t_um, v, indexing="ij")
    y = tt * st + vv * ct
    z = tt * ct - vv * st
    # snap away IEEE dust so coordinates meant to hit grid nodes do
    iy = np.round((y - oy) / pitch, 9)
    iz = np.round((z - oz) / pitch, 9)
    out = np.zeros((len(t_um), nx))
    coords = [iz.ravel(), iy.ravel()]
    for k in range(nx):
        sampled = ndimage.map_coordinates(
            grid.intensities[:, :, k].astype(float), coords, order=1, cval=0.0
        )
        out[:, k] = sampled.reshape(iz.shape).max(axis=1)
    return out


# ---------------------------------------------------------------------------
# skewed-slice image former


def _slice_sample_points(geom: SheetGeometry, slice_index: int) -> np.ndarray:
    """Sample coordinates (um) of every pixel of one tilted slice,
    shape (H, W, 3): pixel (row j, col x) sits at
    (x*p, i*step + j*p*cos(alpha), j*p*sin(alpha))."""
    p = geom.pixel_pitch_um
    a = geom.alpha_rad
    j = np.arange(geom.frame_height_px)
    x = np.arange(geom.frame_width_px)
    xx, jj = np.meshgrid(x, j)
    return np.stack(
        [
            xx * p,
            slice_index * geom.scan_step_um + jj * p * math.cos(a),
            jj * p * math.sin(a),
        ],
        axis=-1,
    )


def render_skewed_slice(scene: PhantomScene, geom: SheetGeometry,
                        slice_index: int, noise_seed: int | None = None) -> RawFrame:
    """Image one sheet-plane position as the camera would see it.

    With a seed, pixel values are Poisson draws around the clean signal;
    the seed is mixed with the slice index so a full stack renders
    deterministically while slices stay independent.
    """
    if not 0 <= slice_index < geom.slice_count:
        raise ParameterError(
            f"slice_index {slice_index} out of range for stack of "
            f"{geom.slice_count}"
        )
    vals = scene.evaluate(_slice_sample_points(geom, slice_index))
    if noise_seed is not None:
        rng = np.random.default_rng((noise_seed, slice_index))
        vals = rng.poisson(vals)
    pixels = np.clip(np.rint(vals), 0, MAX_INTENSITY).astype(np.uint16)
    return RawFrame(pixels=pixels, slice_index=slice_index)


def render_stack(scene: PhantomScene, geom: SheetGeometry,
                 noise_seed: int | None = None) -> list[RawFrame]:
    return [
        render_skewed_slice(scene, geom, i, noise_seed)
        for i in range(geom.slice_count)
    ]


# ---------------------------------------------------------------------------
# batch reference deskew


def _frame_pixels(f) -> np.ndarray:
    return f.pixels if isinstance(f, RawFrame) else np.asarray(f)


def reference_deskew(stack, geom: SheetGeometry, shear_px: float,
                     interp: str = "nearest") -> np.ndarray:
    """Whole-stack deskew the obvious way: place every slice on its own
    copy of the enlarged canvas, then one max over the pile.

    Memory scales with N times the canvas, which is the point: it is the
    slow, simple reference the streaming path is checked against.
    """
    if interp not in ("nearest", "linear"):
        raise ParameterError(f"interp must be nearest or linear, got {interp!r}")
    frames = [_frame_pixels(f) for f in stack]
    if not frames:
        raise ParameterError("empty stack")
    h, w = frames[0].shape
    for k, f in enumerate(frames):
        if f.shape != (h, w):
            raise ParameterError(
                f"frame {k} is {f.shape}, expected {(h, w)}"
            )
    n = len(frames)
    canvas_geom = geom.with_frame(w, h)
    if n != geom.slice_count:
        canvas_geom = SheetGeometry(
            alpha_deg=geom.alpha_deg,
            scan_step_um=geom.scan_step_um,
            pixel_pitch_um=geom.pixel_pitch_um,
            slice_count=n,
            frame_width_px=w,
            frame_height_px=h,
        )
    width, height = geometry.output_extent(canvas_geom, shear_px)
    pile = np.zeros((n, height, width), dtype=float)
    for i, f in enumerate(frames):
        if interp == "nearest":
            off = geometry.nearest_offset(i, shear_px)
            pile[i, off:off + h] = f
        else:
            lo, hi = geometry.linear_row_span(i, shear_px, h)
            u = np.arange(lo, hi + 1, dtype=float)
            xp = i * shear_px + np.arange(h)
            for c in range(w):
                pile[i, lo:hi + 1, c] = np.interp(u, xp, f[:, c].astype(float))
    out = pile.max(axis=0)
    return np.clip(np.rint(out), 0, MAX_INTENSITY).astype(np.uint16)


# ---------------------------------------------------------------------------
# 16-bit image export (golden files, CLI output)


def save_png16(path, image: np.ndarray) -> None:
    img = np.ascontiguousarray(image.astype(np.uint16))
    Image.fromarray(img).save(path, format="PNG")


def load_png16(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint16)


def save_raw_u16(path, image: np.ndarray) -> None:
    """Headerless little-endian uint16, row-major."""
    image.astype("<u2").tofile(path)


def load_raw_u16(path, shape) -> np.ndarray:
    data = np.fromfile(path, dtype="<u2")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ParameterError(
            f"raw file holds {data.size} pixels, expected {expected} for {shape}"
        )
    return data.reshape(shape)
