"""Streaming deskew pipeline: split, place, project, warp, emit.

Frames from the acquisition side are split into colour channels, remapped
onto an enlarged per-channel canvas at their slice's shear offset, folded
into a running maximum projection, and emitted either once per completed
stack (global mode) or after every camera exposure (rolling mode).  A 1-D
warp then turns the projection into the requested viewing angle.

Concurrency contract: acquisition, per-channel deskew and warp/emit run as
separate threads talking only through bounded drop-oldest queues of
immutable frames; each canvas is owned by exactly one deskew worker.  The
same stage objects also run single-threaded through
:meth:`LivePipeline.step` for deterministic tests.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from . import geometry
from .clock import SystemClock
from .errors import CapacityError, ParameterError, ProtocolError
from .geometry import SheetGeometry, ViewTransform

# ---------------------------------------------------------------------------
# frames and channel splitting


@dataclass(frozen=True)
class RawFrame:
    """One camera exposure (or one channel's crop of it).

    pixels is a uint16 (height, width) array, treated as immutable once
    the frame is constructed.
    """

    pixels: np.ndarray
    slice_index: int
    sweep_index: int = 0
    channel_id: int = 0
    timestamp_ns: int = 0

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ParameterError("frame pixels must be 2-D (height, width)")
        if self.pixels.dtype != np.uint16:
            raise ParameterError(f"frame pixels must be uint16, got {self.pixels.dtype}")
        if self.slice_index < 0:
            raise ParameterError("slice_index must be >= 0")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class ChannelRegion:
    channel_id: int
    x0: int
    y0: int
    width: int
    height: int


@dataclass(frozen=True)
class ChannelLayout:
    """Non-overlapping rectangles mapping camera pixels to colour channels."""

    regions: tuple[ChannelRegion, ...]

    def __post_init__(self):
        if not self.regions:
            raise ParameterError("layout needs at least one region")
        for r in self.regions:
            if r.width < 1 or r.height < 1 or r.x0 < 0 or r.y0 < 0:
                raise ParameterError(f"bad region geometry for channel {r.channel_id}")
        for i, a in enumerate(self.regions):
            for b in self.regions[i + 1:]:
                if (a.x0 < b.x0 + b.width and b.x0 < a.x0 + a.width
                        and a.y0 < b.y0 + b.height and b.y0 < a.y0 + a.height):
                    raise ParameterError(
                        f"regions for channels {a.channel_id} and {b.channel_id} overlap"
                    )

    @classmethod
    def full_frame(cls, width: int, height: int, channel_id: int = 0) -> "ChannelLayout":
        return cls(regions=(ChannelRegion(channel_id, 0, 0, width, height),))

    def validate_frame(self, width: int, height: int) -> None:
        for r in self.regions:
            if r.x0 + r.width > width or r.y0 + r.height > height:
                raise ParameterError(
                    f"region for channel {r.channel_id} exceeds {width}x{height} frame"
                )


def split_channels(frame: RawFrame, layout: ChannelLayout) -> list[RawFrame]:
    """Cut one camera frame into per-channel sub-frames (pixel copies)."""
    layout.validate_frame(frame.width, frame.height)
    out = []
    for r in layout.regions:
        crop = frame.pixels[r.y0:r.y0 + r.height, r.x0:r.x0 + r.width].copy()
        out.append(replace(frame, pixels=crop, channel_id=r.channel_id))
    return out


# ---------------------------------------------------------------------------
# stage timings and bottleneck classification


@dataclass(frozen=True)
class StageTimings:
    """Per-stack durations of the three concurrent stages, plus output lag."""

    acquisition_ms: float
    processing_ms: float
    plotting_ms: float
    lag_ms: float

    def __post_init__(self):
        for name in ("acquisition_ms", "processing_ms", "plotting_ms", "lag_ms"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")

    def as_dict(self) -> dict:
        return {
            "acquisition_ms": self.acquisition_ms,
            "processing_ms": self.processing_ms,
            "plotting_ms": self.plotting_ms,
            "lag_ms": self.lag_ms,
        }


STAGES = ("acquisition", "processing", "plotting")


@dataclass(frozen=True)
class BottleneckReport:
    limiting_stage: str  # acquisition_limited | processing_limited | plotting_limited
    mean_ms: dict
    lag_slope_ms_per_stack: float
    lag_bounded: bool

    def as_dict(self) -> dict:
        return {
            "limiting_stage": self.limiting_stage,
            "mean_ms": dict(self.mean_ms),
            "lag_slope_ms_per_stack": self.lag_slope_ms_per_stack,
            "lag_bounded": self.lag_bounded,
        }


def classify_bottleneck(
    history, slope_tolerance_ms: float | None = None
) -> BottleneckReport:
    """Name the slowest stage and the lag trend over a run.

    The limiting stage is the one with the largest mean per-stack duration;
    ties break toward acquisition (claiming hardware-limited only when the
    camera is at least as slow as everything else).  The lag trend is the
    least-squares slope of lag vs stack index; the run counts as bounded
    when that slope is within tolerance of zero.
    """
    history = list(history)
    if len(history) < 3:
        raise ParameterError("need at least 3 stacks of timings to classify")
    means = {
        "acquisition": float(np.mean([t.acquisition_ms for t in history])),
        "processing": float(np.mean([t.processing_ms for t in history])),
        "plotting": float(np.mean([t.plotting_ms for t in history])),
    }
    # tuple order implements the tie-break: acquisition wins ties
    limiting = max(STAGES, key=lambda s: means[s])
    lags = np.array([t.lag_ms for t in history], dtype=float)
    slope = float(np.polyfit(np.arange(len(lags)), lags, 1)[0])
    if slope_tolerance_ms is None:
        slope_tolerance_ms = max(0.02 * max(means.values()), 0.5)
    return BottleneckReport(
        limiting_stage=f"{limiting}_limited",
        mean_ms=means,
        lag_slope_ms_per_stack=slope,
        lag_bounded=abs(slope) <= slope_tolerance_ms,
    )


def simulate_stage_lag(
    acquisition_ms: float, processing_ms: float, plotting_ms: float, n_stacks: int
) -> list[StageTimings]:
    """Queueing model of the three-stage pipeline with unbounded queues.

    Stack k finishes acquiring at (k+1)*A; each later stage starts when its
    input is ready and the stage is free.  When processing or plotting is
    slower than acquisition, the output lag grows by the difference every
    stack: the runaway regime the live pipeline's drop-oldest queues exist
    to prevent.
    """
    if n_stacks < 1:
        raise ParameterError("n_stacks must be >= 1")
    out = []
    proc_done = 0.0
    plot_done = 0.0
    for k in range(n_stacks):
        acq_done = (k + 1) * acquisition_ms
        proc_done = max(acq_done, proc_done) + processing_ms
        plot_done = max(proc_done, plot_done) + plotting_ms
        out.append(
            StageTimings(
                acquisition_ms=acquisition_ms,
                processing_ms=processing_ms,
                plotting_ms=plotting_ms,
                lag_ms=plot_done - acq_done,
            )
        )
    return out


# ---------------------------------------------------------------------------
# projection canvas


def _interp_slice_rows(pixels: np.ndarray, lo: int, hi: int, offset: float) -> np.ndarray:
    """Linear resample of a frame onto integer canvas rows lo..hi."""
    j = np.arange(lo, hi + 1, dtype=float) - offset
    j0 = np.clip(np.floor(j).astype(int), 0, pixels.shape[0] - 1)
    j1 = np.minimum(j0 + 1, pixels.shape[0] - 1)
    f = (j - j0)[:, None]
    vals = (1.0 - f) * pixels[j0].astype(np.float64) + f * pixels[j1].astype(np.float64)
    return np.rint(vals).astype(np.uint16)


class ProjectionCanvas:
    """Enlarged max-projection buffer for one channel.

    Global mode accumulates a sweep and emits once per stack; rolling mode
    keeps a ring of the N most recently placed slices plus a per-pixel
    contributor map, and refreshes only the band of rows a replaced slice
    touches.  The canvas is owned by a single deskew worker; emissions are
    copies.
    """

    def __init__(
        self,
        geom: SheetGeometry,
        shear_px: float,
        interp: str = "linear",
        mode: str = "global",
        max_pixels: int = geometry.DEFAULT_CANVAS_LIMIT_PX,
    ):
        if interp not in ("nearest", "linear"):
            raise ParameterError(f"interp must be nearest or linear, got {interp!r}")
        if mode not in ("global", "rolling"):
            raise ParameterError(f"mode must be global or rolling, got {mode!r}")
        self.geom = geom
        self.shear_px = float(shear_px)
        self.interp = interp
        self.mode = mode
        self._pixel_limit = max_pixels
        self.width, self.height = geometry.output_extent(geom, shear_px, max_pixels)
        self.max_pixels = np.zeros((self.height, self.width), dtype=np.uint16)
        self._placed = [False] * geom.slice_count
        self.ring: list[RawFrame | None] = [None] * geom.slice_count
        self.contributor = np.full((self.height, self.width), -1, dtype=np.int16)

    # -- placement grid ------------------------------------------------------

    def row_span(self, slice_index: int) -> tuple[int, int]:
        """Inclusive canvas row interval a slice occupies under the current
        shear and interpolation mode."""
        h = self.geom.frame_height_px
        if self.interp == "nearest":
            lo = geometry.nearest_offset(slice_index, self.shear_px)
            return lo, lo + h - 1
        return geometry.linear_row_span(slice_index, self.shear_px, h)

    def _slice_rows(self, frame: RawFrame, lo: int, hi: int) -> np.ndarray:
        """Values this slice contributes to canvas rows lo..hi."""
        base = self.row_span(frame.slice_index)[0]
        if self.interp == "nearest":
            return frame.pixels[lo - base:hi - base + 1]
        return _interp_slice_rows(
            frame.pixels, lo, hi, frame.slice_index * self.shear_px
        )

    def _check_frame(self, frame: RawFrame) -> None:
        if frame.width != self.width:
            raise ParameterError(
                f"frame width {frame.width} does not match canvas width {self.width}"
            )
        if frame.height != self.geom.frame_height_px:
            raise ParameterError(
                f"frame height {frame.height} does not match geometry "
                f"{self.geom.frame_height_px}"
            )
        if frame.slice_index >= self.geom.slice_count:
            raise ParameterError(
                f"slice_index {frame.slice_index} out of range "
                f"(stack of {self.geom.slice_count})"
            )
        lo, hi = self.row_span(frame.slice_index)
        if lo < 0 or hi >= self.height:
            raise CapacityError(
                f"slice {frame.slice_index} spans rows {lo}..{hi} on a "
                f"{self.height}-row canvas; canvas was mis-sized"
            )

    # -- global mode -----------------------------------------------------------

    def place(self, frame: RawFrame) -> tuple[int, int]:
        """Max-accumulate one slice; returns the touched row interval."""
        self._check_frame(frame)
        lo, hi = self.row_span(frame.slice_index)
        rows = self._slice_rows(frame, lo, hi)
        np.maximum(self.max_pixels[lo:hi + 1], rows, out=self.max_pixels[lo:hi + 1])
        self._placed[frame.slice_index] = True
        return lo, hi

    @property
    def placed_count(self) -> int:
        return sum(self._placed)

    def finalize_global(self) -> np.ndarray:
        """Emit the completed stack's projection and reset for the next sweep."""
        if not all(self._placed):
            missing = self._placed.count(False)
            raise ProtocolError(f"finalize with {missing} slice(s) not yet placed")
        out = self.max_pixels.copy()
        self.reset()
        return out

    def reset(self) -> None:
        self.max_pixels[:] = 0
        self._placed = [False] * self.geom.slice_count
        self.contributor[:] = -1

    # -- rolling mode ----------------------------------------------------------

    def rolling_replace(self, frame: RawFrame) -> tuple[int, int]:
        """Swap in the newest version of a slice and refresh its band.

        Evicts the previous sweep's frame with the same slice index from
        the ring, then recomputes the maximum (and the contributor map)
        over just the rows that slice touches, pulling from every live
        ring slice that overlaps the band.
        """
        if self.mode != "rolling":
            raise ProtocolError("rolling_replace on a canvas in global mode")
        self._check_frame(frame)
        self.ring[frame.slice_index] = frame
        lo, hi = self.row_span(frame.slice_index)
        self._recompute_band(lo, hi)
        return lo, hi

    def _recompute_band(self, lo: int, hi: int) -> None:
        band = np.zeros((hi - lo + 1, self.width), dtype=np.uint16)
        contrib = np.full((hi - lo + 1, self.width), -1, dtype=np.int16)
        for k, rf in enumerate(self.ring):
            if rf is None:
                continue
            klo, khi = self.row_span(k)
            olo, ohi = max(klo, lo), min(khi, hi)
            if olo > ohi:
                continue
            rows = self._slice_rows(rf, olo, ohi)
            seg = band[olo - lo:ohi - lo + 1]
            better = rows > seg
            seg[better] = rows[better]
            contrib[olo - lo:ohi - lo + 1][better] = k
        self.max_pixels[lo:hi + 1] = band
        self.contributor[lo:hi + 1] = contrib

    def replace_all(self, shear_px: float | None = None) -> None:
        """Rebuild the canvas, optionally under a new shear.

        Used when the operator changes the deskew parameters mid-run: the
        canvas is resized for the new extent and, in rolling mode, rebuilt
        from the ring before the next emission.
        """
        if shear_px is not None:
            self.shear_px = float(shear_px)
        self.width, self.height = geometry.output_extent(
            self.geom, self.shear_px, self._pixel_limit
        )
        self.max_pixels = np.zeros((self.height, self.width), dtype=np.uint16)
        self.contributor = np.full((self.height, self.width), -1, dtype=np.int16)
        self._placed = [False] * self.geom.slice_count
        if self.mode == "rolling":
            ring = self.ring
            for rf in ring:
                if rf is not None:
                    self.rolling_replace(rf)


def deskew_place(canvas: ProjectionCanvas, frame: RawFrame) -> tuple[int, int]:
    """Functional alias for :meth:`ProjectionCanvas.place`."""
    return canvas.place(frame)


# ---------------------------------------------------------------------------
# warp + emission


@dataclass(frozen=True)
class DisplayImage:
    """One emitted view: warped projection plus provenance and telemetry."""

    pixels: np.ndarray  # uint16 (rows, cols)
    channel_id: int
    sweep_index: int
    slice_index: int
    view_angle_deg: float
    mode: str
    out_pitch_um: float
    lateral_pitch_um: float
    timings: StageTimings | None = None
    emitted_at_ns: int = 0

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def warp_projection(projection: np.ndarray, warp_scale: float) -> np.ndarray:
    """1-D linear resample of the projection along the shear axis.

    A scale of exactly 1 is the identity.  Output row m samples input row
    m / warp_scale (edge-clamped), so display row m sits at view-plane
    coordinate m * out_pitch.
    """
    if warp_scale <= 0:
        raise ParameterError(f"warp_scale must be > 0, got {warp_scale}")
    rows = projection.shape[0]
    out_rows = int(round(rows * warp_scale))
    if out_rows < 1:
        raise ParameterError(
            f"warp of {rows} rows by {warp_scale} leaves no output rows"
        )
    if warp_scale == 1.0:
        return projection.copy()
    m = np.arange(out_rows, dtype=float) / warp_scale
    m = np.clip(m, 0, rows - 1)
    m0 = np.floor(m).astype(int)
    m1 = np.minimum(m0 + 1, rows - 1)
    f = (m - m0)[:, None]
    vals = (1.0 - f) * projection[m0].astype(np.float64) + f * projection[m1].astype(np.float64)
    return np.rint(vals).astype(np.uint16)


def warp_and_emit(
    projection: np.ndarray,
    vt: ViewTransform,
    *,
    channel_id: int = 0,
    sweep_index: int = 0,
    slice_index: int = 0,
    mode: str = "global",
    lateral_pitch_um: float | None = None,
    timings: StageTimings | None = None,
    emitted_at_ns: int = 0,
) -> DisplayImage:
    """Warp a finished projection and tag it for the display stream."""
    pixels = warp_projection(projection, vt.warp_scale)
    return DisplayImage(
        pixels=pixels,
        channel_id=channel_id,
        sweep_index=sweep_index,
        slice_index=slice_index,
        view_angle_deg=vt.view_angle_deg,
        mode=mode,
        out_pitch_um=vt.out_pitch_um,
        lateral_pitch_um=(
            vt.out_pitch_um if lateral_pitch_um is None else lateral_pitch_um
        ),
        timings=timings,
        emitted_at_ns=emitted_at_ns,
    )


# ---------------------------------------------------------------------------
# queues, parameter mailbox, telemetry


class DropOldestQueue:
    """Bounded FIFO that sheds the oldest item instead of blocking.

    Live view prefers freshness over completeness: a slow consumer sees
    recent frames and a drop counter rather than ever-growing lag.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ParameterError("queue capacity must be >= 1")
        self.capacity = capacity
        self._items: deque = deque()
        self._lock = threading.Lock()
        self._not_empty = threading.Condition(self._lock)
        self._dropped = 0
        self._closed = False

    def put(self, item) -> None:
        with self._lock:
            if self._closed:
                return
            if len(self._items) >= self.capacity:
                self._items.popleft()
                self._dropped += 1
            self._items.append(item)
            self._not_empty.notify()

    def get(self, timeout: float | None = None):
        """Next item, or None on timeout / after close+drain."""
        with self._not_empty:
            if not self._items:
                self._not_empty.wait(timeout)
            if not self._items:
                return None
            return self._items.popleft()

    def close(self) -> None:
        with self._lock:
            self._closed = True
            self._not_empty.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed

    @property
    def dropped(self) -> int:
        return self._dropped

    def __len__(self) -> int:
        return len(self._items)


class ParamMailbox:
    """Latest-wins slot for live parameter changes.

    Writers post partial updates; the pipeline takes the merged pending
    set at stage boundaries, giving one total order of changes.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._pending: dict = {}

    def post(self, **changes) -> None:
        with self._lock:
            self._pending.update(changes)

    def take(self) -> dict:
        with self._lock:
            pending, self._pending = self._pending, {}
            return pending


class Telemetry:
    """Thread-safe counters and latest stage timings, published as snapshots."""

    def __init__(self, history: int = 256):
        self._lock = threading.Lock()
        self._history: deque[StageTimings] = deque(maxlen=history)
        self._frames = 0
        self._sweeps = 0
        self._emitted = 0
        self._last_emit_ns: int | None = None
        self._emit_interval_ns: float | None = None
        self._drops: dict = {}
        self._state: dict = {}

    def count_frame(self) -> None:
        with self._lock:
            self._frames += 1

    def count_sweep(self) -> None:
        with self._lock:
            self._sweeps += 1

    def count_emission(self, at_ns: int) -> None:
        with self._lock:
            self._emitted += 1
            if self._last_emit_ns is not None and at_ns > self._last_emit_ns:
                self._emit_interval_ns = at_ns - self._last_emit_ns
            self._last_emit_ns = at_ns

    def record_timings(self, t: StageTimings) -> None:
        with self._lock:
            self._history.append(t)

    def set_drops(self, **counts) -> None:
        with self._lock:
            self._drops.update(counts)

    def set_state(self, **state) -> None:
        with self._lock:
            self._state.update(state)

    def history(self) -> list[StageTimings]:
        with self._lock:
            return list(self._history)

    def snapshot(self) -> dict:
        """JSON-serializable view of the pipeline's health."""
        with self._lock:
            last = self._history[-1] if self._history else None
            fps = 1e9 / self._emit_interval_ns if self._emit_interval_ns else 0.0
            return {
                "frames": self._frames,
                "sweeps": self._sweeps,
                "emitted": self._emitted,
                "fps": fps,
                "stage_ms": last.as_dict() if last else None,
                "drops": dict(self._drops),
                **dict(self._state),
            }


# ---------------------------------------------------------------------------
# live pipeline


@dataclass
class PipelineConfig:
    geom: SheetGeometry
    shear_px: float | None = None
    view_angle_deg: float | None = None
    out_pitch_um: float | None = None
    mode: str = "global"
    interp: str = "linear"
    layout: ChannelLayout | None = None
    acquire_capacity_stacks: int = 2
    emit_capacity: int = 2
    history: int = 256

    def initial_transform(self) -> ViewTransform:
        if self.shear_px is None and self.view_angle_deg is None:
            return geometry.view_transform(
                self.geom,
                shear_px=geometry.native_shear_px(self.geom),
                out_pitch_um=self.out_pitch_um,
            )
        return geometry.view_transform(
            self.geom,
            shear_px=self.shear_px,
            view_angle_deg=self.view_angle_deg,
            out_pitch_um=self.out_pitch_um,
        )


@dataclass
class _PendingEmission:
    """Finished projection handed from a deskew worker to the warp stage."""

    projection: np.ndarray
    vt: ViewTransform
    channel_id: int
    sweep_index: int
    slice_index: int
    mode: str
    lateral_pitch_um: float
    acquisition_ms: float
    processing_ms: float
    last_slice_ts_ns: int


class _ChannelState:
    """Everything one deskew worker owns for its channel."""

    def __init__(self, channel_id: int, geom: SheetGeometry, cfg: PipelineConfig,
                 vt: ViewTransform):
        self.channel_id = channel_id
        self.geom = geom
        self.vt = vt
        self.pending_vt: ViewTransform | None = None
        self.mode = cfg.mode
        self.canvas = ProjectionCanvas(geom, vt.shear_px, cfg.interp, cfg.mode)
        self.mailbox = ParamMailbox()
        self.current_sweep = -1
        self.waiting_for_sweep_start = False
        # timestamps of recent frames: N intervals back gives the stack period
        self.frame_ts: deque[int] = deque(maxlen=geom.slice_count + 1)
        self.frame_proc_ns: deque[int] = deque(maxlen=geom.slice_count)
        self.frame_plot_ns: deque[int] = deque(maxlen=geom.slice_count)
        self.sweep_proc_ns = 0

    def stack_period_ms(self) -> float:
        ts = self.frame_ts
        if len(ts) < 2:
            return 0.0
        intervals = len(ts) - 1
        n = self.geom.slice_count
        return (ts[-1] - ts[0]) / 1e6 * (n / intervals)


class LivePipeline:
    """Runs the acquire -> split -> deskew -> warp -> emit chain.

    One instance drives either the threaded live mode (:meth:`start` /
    :meth:`stop`) or the deterministic single-threaded mode (:meth:`step`),
    over any frame source.  Emitted :class:`DisplayImage` objects go to the
    ``emit`` callback, to subscriber mailboxes, and to the latest-frame
    cache read by the server.
    """

    def __init__(self, source, config: PipelineConfig, *, clock=None, emit=None):
        self.source = source
        self.config = config
        self.clock = clock if clock is not None else getattr(source, "clock", None)
        if self.clock is None:
            self.clock = SystemClock()
        self._emit_cb = emit
        self.telemetry = Telemetry(history=config.history)
        self.vt = config.initial_transform()
        self.mode = config.mode
        layout = config.layout
        if layout is None:
            layout = ChannelLayout.full_frame(
                config.geom.frame_width_px, config.geom.frame_height_px
            )
        self.layout = layout
        self._channels: dict[int, _ChannelState] = {}
        self._frame_queues: dict[int, DropOldestQueue] = {}
        for r in layout.regions:
            geom = config.geom.with_frame(r.width, r.height)
            self._channels[r.channel_id] = _ChannelState(
                r.channel_id, geom, config, self.vt
            )
            self._frame_queues[r.channel_id] = DropOldestQueue(
                config.acquire_capacity_stacks * config.geom.slice_count
            )
        self.latest: dict[int, DisplayImage] = {}
        self._subscribers: list[DropOldestQueue] = []
        self._sub_lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self._emit_q = DropOldestQueue(config.emit_capacity * len(self._channels))
        self.telemetry.set_state(
            mode=self.mode,
            shear_px=self.vt.shear_px,
            view_angle_deg=self.vt.view_angle_deg,
        )

    def channel_ids(self) -> list[int]:
        return sorted(self._channels)

    # -- subscriptions ---------------------------------------------------------

    def subscribe(self, capacity: int = 1) -> DropOldestQueue:
        """Latest-frame mailbox for a display client (drop-oldest)."""
        q = DropOldestQueue(capacity)
        with self._sub_lock:
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q: DropOldestQueue) -> None:
        with self._sub_lock:
            if q in self._subscribers:
                self._subscribers.remove(q)
        q.close()

    def _deliver(self, image: DisplayImage) -> None:
        self.latest[image.channel_id] = image
        self.telemetry.count_emission(image.emitted_at_ns)
        client_drops = 0
        with self._sub_lock:
            for q in self._subscribers:
                q.put(image)
                client_drops += q.dropped
        self.telemetry.set_drops(client=client_drops)
        if self._emit_cb is not None:
            self._emit_cb(image)

    # -- live control ------------------------------------------------------------

    def post_params(self, **changes) -> dict:
        """Queue live parameter changes; returns the validated values.

        shear_px / view_angle_deg are clamped to the geometry's supported
        range.  Changes land at each channel's next frame boundary:
        rolling mode re-places its ring, a global-mode sweep in flight
        finishes under the old parameters.
        """
        applied: dict = {}
        post: dict = {}
        if "view_angle_deg" in changes:
            vt = geometry.view_transform(
                self.config.geom,
                view_angle_deg=self._clamp_angle(changes["view_angle_deg"]),
                out_pitch_um=self.config.out_pitch_um,
            )
            applied["view_angle_deg"] = vt.view_angle_deg
            applied["shear_px"] = vt.shear_px
            post["vt"] = vt
        elif "shear_px" in changes:
            vt = geometry.view_transform(
                self.config.geom,
                shear_px=min(
                    max(0.0, float(changes["shear_px"])),
                    geometry.max_shear_px(self.config.geom),
                ),
                out_pitch_um=self.config.out_pitch_um,
            )
            applied["view_angle_deg"] = vt.view_angle_deg
            applied["shear_px"] = vt.shear_px
            post["vt"] = vt
        if "mode" in changes:
            mode = changes["mode"]
            if mode not in ("global", "rolling"):
                raise ParameterError(f"unknown mode {mode!r}")
            applied["mode"] = mode
            post["mode"] = mode
        if "exposure_ms" in changes:
            exposure = float(changes["exposure_ms"])
            if exposure < 0:
                raise ParameterError("exposure_ms must be >= 0")
            applied["exposure_ms"] = exposure
            # takes effect when the camera schedules its next exposure
            if hasattr(self.source, "set_exposure_ms"):
                self.source.set_exposure_ms(exposure)
        if post:
            if "vt" in post:
                self.vt = post["vt"]
            if "mode" in post:
                self.mode = post["mode"]
            for ch in self._channels.values():
                ch.mailbox.post(**post)
            self.telemetry.set_state(
                mode=self.mode,
                shear_px=self.vt.shear_px,
                view_angle_deg=self.vt.view_angle_deg,
            )
        return applied

    def _clamp_angle(self, deg: float) -> float:
        hi = geometry.view_angle_from_shear(
            geometry.max_shear_px(self.config.geom), self.config.geom
        )
        return min(max(float(deg), 0.0), hi)

    def _apply_channel_params(self, ch: _ChannelState) -> None:
        """Fold queued changes into one channel, at its frame boundary.

        Runs on the deskew worker that owns the channel, so canvas
        mutation never races with placement.
        """
        pending = ch.mailbox.take()
        if not pending:
            return
        if "mode" in pending and pending["mode"] != ch.mode:
            ch.mode = pending["mode"]
            ch.canvas.mode = ch.mode
            ch.canvas.reset()
            ch.canvas.ring = [None] * ch.geom.slice_count
            # global accumulation must start at a sweep boundary
            ch.waiting_for_sweep_start = ch.mode == "global"
            ch.current_sweep = -1
        if "vt" in pending:
            if ch.mode == "rolling":
                ch.vt = pending["vt"]
                ch.canvas.replace_all(ch.vt.shear_px)
            else:
                ch.pending_vt = pending["vt"]

    # -- single-threaded deterministic mode --------------------------------------

    def step(self) -> list[DisplayImage]:
        """Acquire and fully process one camera frame; returns emissions."""
        frame = self.source.next_frame()
        self.telemetry.count_frame()
        emissions = []
        for sub in split_channels(frame, self.layout):
            pe = self._process_channel_frame(sub)
            if pe is not None:
                emissions.append(self._finish_emission(pe))
        return emissions

    def run_frames(self, n: int) -> list[DisplayImage]:
        out = []
        for _ in range(n):
            out.extend(self.step())
        return out

    # -- per-frame deskew stage ----------------------------------------------

    def _process_channel_frame(self, frame: RawFrame) -> _PendingEmission | None:
        ch = self._channels[frame.channel_id]
        self._apply_channel_params(ch)
        n = ch.geom.slice_count
        ch.frame_ts.append(frame.timestamp_ns)
        t0 = self.clock.now_ns()
        if ch.mode == "global":
            if ch.waiting_for_sweep_start:
                if frame.slice_index != 0:
                    return None
                ch.waiting_for_sweep_start = False
            if frame.sweep_index != ch.current_sweep:
                # new sweep; also abandons a partial one after drops or
                # a mid-sweep stage move
                if ch.pending_vt is not None:
                    ch.vt = ch.pending_vt
                    ch.pending_vt = None
                    ch.canvas.replace_all(ch.vt.shear_px)
                else:
                    ch.canvas.reset()
                ch.current_sweep = frame.sweep_index
                ch.sweep_proc_ns = 0
            ch.canvas.place(frame)
            ch.sweep_proc_ns += self.clock.now_ns() - t0
            if ch.canvas.placed_count < n:
                return None
            t1 = self.clock.now_ns()
            projection = ch.canvas.finalize_global()
            ch.sweep_proc_ns += self.clock.now_ns() - t1
            self.telemetry.count_sweep()
            processing_ms = ch.sweep_proc_ns / 1e6
        else:
            if frame.sweep_index != ch.current_sweep:
                ch.current_sweep = frame.sweep_index
                self.telemetry.count_sweep()
            ch.canvas.rolling_replace(frame)
            projection = ch.canvas.max_pixels.copy()
            ch.frame_proc_ns.append(self.clock.now_ns() - t0)
            # per-stack cost = the last N per-exposure refreshes
            processing_ms = sum(ch.frame_proc_ns) / 1e6
        return _PendingEmission(
            projection=projection,
            vt=ch.vt,
            channel_id=frame.channel_id,
            sweep_index=frame.sweep_index,
            slice_index=frame.slice_index,
            mode=ch.mode,
            lateral_pitch_um=ch.geom.pixel_pitch_um,
            acquisition_ms=ch.stack_period_ms(),
            processing_ms=processing_ms,
            last_slice_ts_ns=frame.timestamp_ns,
        )

    # -- warp/emit stage -----------------------------------------------------

    def _finish_emission(self, pe: _PendingEmission) -> DisplayImage:
        ch = self._channels[pe.channel_id]
        t0 = self.clock.now_ns()
        image = warp_and_emit(
            pe.projection,
            pe.vt,
            channel_id=pe.channel_id,
            sweep_index=pe.sweep_index,
            slice_index=pe.slice_index,
            mode=pe.mode,
            lateral_pitch_um=pe.lateral_pitch_um,
        )
        t1 = self.clock.now_ns()
        if pe.mode == "rolling":
            ch.frame_plot_ns.append(t1 - t0)
            plotting_ms = sum(ch.frame_plot_ns) / 1e6
        else:
            plotting_ms = (t1 - t0) / 1e6
        timings = StageTimings(
            acquisition_ms=pe.acquisition_ms,
            processing_ms=pe.processing_ms,
            plotting_ms=plotting_ms,
            lag_ms=max(0.0, (t1 - pe.last_slice_ts_ns) / 1e6),
        )
        self.telemetry.record_timings(timings)
        image = replace(image, timings=timings, emitted_at_ns=t1)
        self._deliver(image)
        return image

    # -- threaded live mode ------------------------------------------------------

    def start(self) -> None:
        """Spin up the three concurrent stage groups."""
        self._stop.clear()
        if self._emit_q.closed:
            for cid in self._frame_queues:
                self._frame_queues[cid] = DropOldestQueue(
                    self.config.acquire_capacity_stacks * self.config.geom.slice_count
                )
            self._emit_q = DropOldestQueue(
                self.config.emit_capacity * len(self._channels)
            )
        self._deskew_live = len(self._channels)
        self._live_lock = threading.Lock()
        self._threads = [
            threading.Thread(target=self._acquire_loop, name="skew-acquire", daemon=True)
        ]
        for cid in self._channels:
            self._threads.append(
                threading.Thread(
                    target=self._deskew_loop, args=(cid,),
                    name=f"skew-deskew-{cid}", daemon=True,
                )
            )
        self._threads.append(
            threading.Thread(target=self._emit_loop, name="skew-emit", daemon=True)
        )
        for t in self._threads:
            t.start()

    def stop(self, timeout: float = 5.0) -> None:
        self._stop.set()
        for q in self._frame_queues.values():
            q.close()
        self._emit_q.close()
        for t in self._threads:
            t.join(timeout)
        self._threads = []

    def _acquire_loop(self) -> None:
        from .errors import EndOfStream

        while not self._stop.is_set():
            try:
                frame = self.source.next_frame()
            except EndOfStream:
                break
            self.telemetry.count_frame()
            for sub in split_channels(frame, self.layout):
                self._frame_queues[sub.channel_id].put(sub)
            self.telemetry.set_drops(
                acquire=sum(q.dropped for q in self._frame_queues.values())
            )
        for q in self._frame_queues.values():
            q.close()

    def _deskew_loop(self, channel_id: int) -> None:
        q = self._frame_queues[channel_id]
        try:
            while not self._stop.is_set():
                frame = q.get(timeout=0.1)
                if frame is None:
                    if q.closed and len(q) == 0:
                        break
                    continue
                pe = self._process_channel_frame(frame)
                if pe is not None:
                    self._emit_q.put(pe)
                    self.telemetry.set_drops(emit=self._emit_q.dropped)
        finally:
            # emit queue closes only after the last deskew worker is done
            with self._live_lock:
                self._deskew_live -= 1
                if self._deskew_live == 0:
                    self._emit_q.close()

    def _emit_loop(self) -> None:
        while not self._stop.is_set():
            pe = self._emit_q.get(timeout=0.1)
            if pe is None:
                if self._emit_q.closed and len(self._emit_q) == 0:
                    break
                continue
            self._finish_emission(pe)
