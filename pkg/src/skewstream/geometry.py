"""Coordinate mathematics for obliquely scanned lightsheet stacks.

Sample-space coordinates are (x, y, z) in micrometres: x is the lateral
camera axis (invariant under deskewing), y the scan axis, z height above
the coverslip.  Camera pixel (row j, column x) of slice i sits at

    ( x * p,  i * step + j * p * cos(a),  j * p * sin(a) )

where ``a`` is the sheet angle, ``step`` the scan-axis distance between
slices and ``p`` the pixel pitch.  Deskewing places slice i at row offset
``i * s`` of an enlarged canvas (s in pixels per slice); the canvas row
coordinate is u = j + i*s.  Rows that share a canvas coordinate collapse
along the ray direction (step - s*p*cos(a), -s*p*sin(a)) in the (y, z)
plane, so the max projection of the sheared stack is an orthographic view
at the angle returned by :func:`view_angle_from_shear`.  A 1-D rescale of
the projection by :func:`warp_factor` converts canvas rows to view-plane
pixels of pitch q: display row m lies at view-plane coordinate t = m*q,
with t = y*sin(theta) + z*cos(theta) and t = 0 at sample point (y=0, z=0).

Angles are degrees at every API boundary and radians internally.  All
functions here are pure and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .errors import CapacityError, ParameterError

# Hard ceiling for a single projection canvas (pixels).  256 Mpx of u16 is
# 512 MB; anything larger is a mis-sized shear, not a real request.
DEFAULT_CANVAS_LIMIT_PX = 256_000_000

# Over-rotation past the native angle is allowed up to this multiple of the
# native shear; beyond it the canvas growth is unbounded.
MAX_SHEAR_NATIVE_MULTIPLE = 2.0

_EPS = 1e-9


@dataclass(frozen=True)
class SheetGeometry:
    """Acquisition geometry of one sweep.

    alpha_deg       sheet angle to the scan axis, 0 < alpha < 90
    scan_step_um    scan-axis distance between consecutive slices
    pixel_pitch_um  sample-space pixel pitch (square pixels)
    slice_count     images per stack (N)
    frame_width_px  lateral (invariant) axis length W
    frame_height_px sheet-depth axis length H
    """

    alpha_deg: float
    scan_step_um: float
    pixel_pitch_um: float
    slice_count: int
    frame_width_px: int
    frame_height_px: int

    def __post_init__(self):
        if not 0.0 < self.alpha_deg < 90.0:
            raise ParameterError(f"alpha_deg must be in (0, 90), got {self.alpha_deg}")
        if self.scan_step_um <= 0:
            raise ParameterError(f"scan_step_um must be > 0, got {self.scan_step_um}")
        if self.pixel_pitch_um <= 0:
            raise ParameterError(f"pixel_pitch_um must be > 0, got {self.pixel_pitch_um}")
        if self.slice_count < 1:
            raise ParameterError(f"slice_count must be >= 1, got {self.slice_count}")
        if self.frame_width_px < 1 or self.frame_height_px < 1:
            raise ParameterError("frame dimensions must be >= 1")

    @property
    def alpha_rad(self) -> float:
        return math.radians(self.alpha_deg)

    def with_frame(self, width_px: int, height_px: int) -> "SheetGeometry":
        """Same optics, different ROI (used for per-channel sub-frames)."""
        return replace(self, frame_width_px=width_px, frame_height_px=height_px)


@dataclass(frozen=True)
class ViewTransform:
    """Shear/warp pair realizing one viewing angle.

    shear_px        per-slice row offset on the canvas (pixels, >= 0)
    warp_scale      1-D rescale factor applied to the projection
    view_angle_deg  resulting projection angle from the horizontal
    out_pitch_um    display pixel pitch along the warped axis
    """

    shear_px: float
    warp_scale: float
    view_angle_deg: float
    out_pitch_um: float


def shear_factor(scan_step_um: float, alpha_deg: float) -> float:
    """Lateral shift between consecutive slices, in micrometres.

    The shift is scan_step * cos(alpha): zero for a vertical sheet, the
    full step for a horizontal one.
    """
    if scan_step_um < 0:
        raise ParameterError(f"scan_step_um must be >= 0, got {scan_step_um}")
    if not 0.0 <= alpha_deg <= 90.0:
        raise ParameterError(f"alpha_deg must be in [0, 90], got {alpha_deg}")
    return scan_step_um * math.cos(math.radians(alpha_deg))


def native_shear_px(geom: SheetGeometry) -> float:
    """Per-slice shear, in output pixels, that restores true sample geometry.

    May be fractional; discretization is the pipeline's concern.
    """
    return shear_factor(geom.scan_step_um, geom.alpha_deg) / geom.pixel_pitch_um


def max_shear_px(geom: SheetGeometry) -> float:
    """Largest shear accepted for this geometry (over-rotation bound)."""
    return MAX_SHEAR_NATIVE_MULTIPLE * native_shear_px(geom)


def _ceil_snapped(x: float) -> int:
    """ceil() that forgives float dust just above an integer."""
    return math.ceil(x - _EPS)


def output_extent(
    geom: SheetGeometry,
    shear_px: float,
    max_pixels: int = DEFAULT_CANVAS_LIMIT_PX,
) -> tuple[int, int]:
    """Canvas size (width, height) holding all N sheared slices.

    Width is the invariant axis, unchanged.  Height grows by the total
    shear: H + ceil((N - 1) * shear).
    """
    if shear_px < 0:
        raise ParameterError(f"shear_px must be >= 0, got {shear_px}")
    height = geom.frame_height_px + _ceil_snapped((geom.slice_count - 1) * shear_px)
    if geom.frame_width_px * height > max_pixels:
        raise CapacityError(
            f"canvas {geom.frame_width_px}x{height} exceeds the "
            f"{max_pixels}-pixel limit"
        )
    return geom.frame_width_px, height


def view_angle_from_shear(shear_px: float, geom: SheetGeometry) -> float:
    """Projection angle (degrees from the horizontal) produced by a shear.

    theta = atan2(s*p*sin(a), step - s*p*cos(a)).  Strictly increasing in
    s; theta(0) = 0 (side view along the scan axis) and theta(native) =
    90 - alpha (the faithful reconstruction).
    """
    if shear_px < 0:
        raise ParameterError(f"shear_px must be >= 0, got {shear_px}")
    a = geom.alpha_rad
    sp = shear_px * geom.pixel_pitch_um
    return math.degrees(
        math.atan2(sp * math.sin(a), geom.scan_step_um - sp * math.cos(a))
    )


def shear_from_view_angle(view_angle_deg: float, geom: SheetGeometry) -> float:
    """Inverse of :func:`view_angle_from_shear`.

    s = step * sin(theta) / (p * sin(alpha + theta)), valid while
    alpha + theta < 180 degrees; monotone over the supported range.
    """
    a = geom.alpha_rad
    th = math.radians(view_angle_deg)
    if not 0.0 <= view_angle_deg < 180.0 - geom.alpha_deg:
        raise ParameterError(
            f"view angle {view_angle_deg} outside [0, {180.0 - geom.alpha_deg})"
        )
    if view_angle_deg == 0.0:
        return 0.0
    return geom.scan_step_um * math.sin(th) / (geom.pixel_pitch_um * math.sin(a + th))


def warp_factor(
    shear_px: float, geom: SheetGeometry, out_pitch_um: float | None = None
) -> float:
    """1-D rescale factor mapping canvas rows to display rows of pitch q.

    Equals step*sin(theta)/(s*q) for s > 0, which closes to the identity
    w = p*sin(alpha + theta)/q; the closed form is continuous through
    s = 0, where it reduces to p*sin(alpha)/q (side view).  At native
    shear and q = p it is exactly 1: the native deskew needs no warp.
    """
    if shear_px < 0:
        raise ParameterError(f"shear_px must be >= 0, got {shear_px}")
    q = geom.pixel_pitch_um if out_pitch_um is None else out_pitch_um
    if q <= 0:
        raise ParameterError(f"out_pitch_um must be > 0, got {q}")
    a = geom.alpha_rad
    th = math.radians(view_angle_from_shear(shear_px, geom))
    return geom.pixel_pitch_um * math.sin(a + th) / q


def view_transform(
    geom: SheetGeometry,
    shear_px: float | None = None,
    view_angle_deg: float | None = None,
    out_pitch_um: float | None = None,
) -> ViewTransform:
    """Build the shear/warp/angle triple from either a shear or an angle.

    The shear is clamped to [0, max_shear_px(geom)].
    """
    if (shear_px is None) == (view_angle_deg is None):
        raise ParameterError("give exactly one of shear_px or view_angle_deg")
    if shear_px is None:
        shear_px = shear_from_view_angle(view_angle_deg, geom)
    shear_px = min(max(shear_px, 0.0), max_shear_px(geom))
    q = geom.pixel_pitch_um if out_pitch_um is None else out_pitch_um
    return ViewTransform(
        shear_px=shear_px,
        warp_scale=warp_factor(shear_px, geom, q),
        view_angle_deg=view_angle_from_shear(shear_px, geom),
        out_pitch_um=q,
    )


def display_extent_um(
    width_px: int, height_px: int, pixel_pitch_um: float
) -> tuple[float, float]:
    """Physical size (height_um, width_um) of a displayed image."""
    if pixel_pitch_um <= 0:
        raise ParameterError(f"pixel_pitch_um must be > 0, got {pixel_pitch_um}")
    return height_px * pixel_pitch_um, width_px * pixel_pitch_um


def nearest_offset(slice_index: int, shear_px: float) -> int:
    """Integer canvas row of a slice under nearest-neighbour placement.

    Defined as floor(i*s + 0.5) so that halves round up, independent of
    the host rounding mode.  Shared by the streaming pipeline and the
    batch reference so both speak of the same grid.
    """
    return math.floor(slice_index * shear_px + 0.5)


def linear_row_span(slice_index: int, shear_px: float, frame_height_px: int) -> tuple[int, int]:
    """Canvas rows [lo, hi] covered by a slice under linear placement.

    Rows u in the span sample the frame at j = u - i*s with 0 <= j <= H-1;
    no extrapolation beyond the frame edge.
    """
    off = slice_index * shear_px
    lo = _ceil_snapped(off)
    hi = math.floor(off + frame_height_px - 1 + _EPS)
    return lo, hi
