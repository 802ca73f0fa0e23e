"""Frame sources: simulated camera with trigger timing, and file replay.

The simulated camera reproduces the acquisition timing of the real
instrument: each slice is exposed for exposure_ms, read out for
readout_ms, and the galvo step to the next scan position is issued at
exposure end so the mirror moves and settles during readout.  The frame
period is therefore exposure + readout and a full stack takes
N * (exposure + readout).

File sources replay recorded stacks (multi-page 16-bit TIFF, or headerless
little-endian raw with a JSON sidecar) as fast as the consumer asks,
with synthetic timestamps derived from the sidecar timing so replays are
bit-identical.

A source is owned by one acquisition worker; the frames it hands out are
immutable.
"""

from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .clock import SystemClock
from .errors import EndOfStream, MetadataError, ParameterError
from .geometry import SheetGeometry
from .phantom import PhantomScene, render_skewed_slice
from .pipeline import RawFrame

DEFAULT_READOUT_MS = 1.5  # calibrated so a 50-slice, 0.1 ms stack runs at 12.5 volumes/s
DEFAULT_SETTLE_MS = 1.0


@dataclass(frozen=True)
class CameraTiming:
    exposure_ms: float = 0.1
    readout_ms: float = DEFAULT_READOUT_MS
    trigger_mode: str = "internal"

    def __post_init__(self):
        if self.exposure_ms < 0:
            raise ParameterError("exposure_ms must be >= 0")
        if self.readout_ms <= 0:
            raise ParameterError("readout_ms must be > 0")
        if self.trigger_mode not in ("internal", "external"):
            raise ParameterError(
                f"trigger_mode must be internal or external, got "
                f"{self.trigger_mode!r}"
            )

    @property
    def frame_period_ms(self) -> float:
        return self.exposure_ms + self.readout_ms

    def with_exposure(self, exposure_ms: float) -> "CameraTiming":
        return replace(self, exposure_ms=exposure_ms)


@dataclass(frozen=True)
class TriggerSchedule:
    """Per-slice event times (ms from sweep start).

    The galvo step for the next position is issued the moment the
    exposure ends, so the move happens under the readout; a schedule is
    physically valid when every settled time lands before the next
    exposure starts (checked by :func:`validate_settle`).
    """

    exposure_start_ms: np.ndarray
    exposure_end_ms: np.ndarray
    galvo_step_issue_ms: np.ndarray
    galvo_settled_ms: np.ndarray
    stack_period_ms: float

    def __post_init__(self):
        n = len(self.exposure_start_ms)
        arrays = (
            self.exposure_start_ms,
            self.exposure_end_ms,
            self.galvo_step_issue_ms,
            self.galvo_settled_ms,
        )
        if n < 1 or any(len(a) != n for a in arrays):
            raise ParameterError("schedule arrays must share a length >= 1")
        ok = (
            np.all(self.exposure_start_ms <= self.exposure_end_ms)
            and np.all(self.exposure_end_ms <= self.galvo_step_issue_ms)
            and np.all(self.galvo_step_issue_ms <= self.galvo_settled_ms)
        )
        if not ok:
            raise ParameterError("per-slice events out of order")

    @property
    def slice_count(self) -> int:
        return len(self.exposure_start_ms)

    @property
    def volume_rate_hz(self) -> float:
        return 1000.0 / self.stack_period_ms


def schedule(timing: CameraTiming, geom: SheetGeometry,
             settle_time_ms: float = DEFAULT_SETTLE_MS) -> TriggerSchedule:
    """Build the trigger timeline for one sweep.

    Slice k exposes over [k*(e+r), k*(e+r)+e]; the galvo step is issued
    at exposure end and is assumed settled settle_time_ms later.
    """
    n = geom.slice_count
    period = timing.frame_period_ms
    k = np.arange(n, dtype=float)
    start = k * period
    end = start + timing.exposure_ms
    issue = end.copy()
    settled = issue + settle_time_ms
    return TriggerSchedule(
        exposure_start_ms=start,
        exposure_end_ms=end,
        galvo_step_issue_ms=issue,
        galvo_settled_ms=settled,
        stack_period_ms=n * period,
    )


@dataclass(frozen=True)
class SettleViolation:
    slice_index: int
    available_ms: float
    needed_ms: float


@dataclass(frozen=True)
class SettleReport:
    ok: bool
    settle_time_ms: float
    violations: tuple[SettleViolation, ...]

    def as_dict(self) -> dict:
        return {
            "ok": self.ok,
            "settle_time_ms": self.settle_time_ms,
            "violations": [
                {
                    "slice_index": v.slice_index,
                    "available_ms": v.available_ms,
                    "needed_ms": v.needed_ms,
                }
                for v in self.violations
            ],
        }


def validate_settle(sched: TriggerSchedule, settle_time_ms: float) -> SettleReport:
    """Check the galvo has time to settle inside every readout gap.

    The gap between a step issue and the next exposure start is exactly
    the readout time, so this passes iff settle <= readout; violations
    are reported per slice rather than raised (a too-slow galvo is a
    measurement, not a programming error).
    """
    violations = []
    for k in range(sched.slice_count - 1):
        available = sched.exposure_start_ms[k + 1] - sched.galvo_step_issue_ms[k]
        if settle_time_ms > available + 1e-12:
            violations.append(
                SettleViolation(
                    slice_index=k,
                    available_ms=float(available),
                    needed_ms=float(settle_time_ms),
                )
            )
    return SettleReport(
        ok=not violations,
        settle_time_ms=settle_time_ms,
        violations=tuple(violations),
    )


@dataclass(frozen=True)
class GalvoWaveform:
    """Analogue staircase for the scan galvo: one level per slice, then
    flyback to level 0 for the next sweep."""

    levels_v: np.ndarray
    volts_per_um: float
    settle_time_ms: float

    def __post_init__(self):
        if len(self.levels_v) < 1:
            raise ParameterError("waveform needs at least one level")
        if len(self.levels_v) > 1 and np.any(np.diff(self.levels_v) <= 0):
            raise ParameterError("staircase must be strictly increasing")


def galvo_staircase(geom: SheetGeometry, volts_per_um: float,
                    settle_time_ms: float = DEFAULT_SETTLE_MS) -> GalvoWaveform:
    if volts_per_um <= 0:
        raise ParameterError("volts_per_um must be > 0")
    levels = np.arange(geom.slice_count) * geom.scan_step_um * volts_per_um
    return GalvoWaveform(
        levels_v=levels,
        volts_per_um=volts_per_um,
        settle_time_ms=settle_time_ms,
    )


# ---------------------------------------------------------------------------
# simulated camera


class SimulatedCameraSource:
    """Clock-paced camera imaging a phantom scene.

    next_frame blocks (sleep-until on the injected clock) so the frame
    stream runs at the hardware rate: one frame per exposure + readout.
    Stage moves translate the sampled field of view; content then shifts
    the opposite way, like pushing a real stage.
    """

    def __init__(self, scene: PhantomScene, geom: SheetGeometry,
                 timing: CameraTiming | None = None, *, clock=None,
                 noise_seed: int | None = None, sweeps: int | None = None,
                 jitter_history: int = 4096):
        self.scene = scene
        self.geom = geom
        self.timing = timing if timing is not None else CameraTiming()
        self.clock = clock if clock is not None else SystemClock()
        self.noise_seed = noise_seed
        self.sweeps = sweeps
        self.stage_offset_um = (0.0, 0.0, 0.0)
        self.jitter_ns: deque[int] = deque(maxlen=jitter_history)
        self._k = 0
        self._last_target_ns: int | None = None

    def set_exposure_ms(self, exposure_ms: float) -> None:
        """New exposure; applies from the next scheduled frame."""
        self.timing = self.timing.with_exposure(exposure_ms)

    def move_stage(self, dx_um: float = 0.0, dy_um: float = 0.0,
                   dz_um: float = 0.0, restart_sweep: bool = True) -> None:
        """Translate the field of view over the sample.

        The galvo sweep restarts (flyback) by default, as the real stage
        interrupt does; pixels then show the scene shifted oppositely.
        """
        x, y, z = self.stage_offset_um
        self.stage_offset_um = (x + dx_um, y + dy_um, z + dz_um)
        if restart_sweep and self._k % self.geom.slice_count != 0:
            n = self.geom.slice_count
            self._k = (self._k // n + 1) * n

    def next_frame(self) -> RawFrame:
        n = self.geom.slice_count
        if self.sweeps is not None and self._k >= self.sweeps * n:
            raise EndOfStream("configured sweep count reached")
        sweep, idx = divmod(self._k, n)
        self._k += 1
        # deadline derives from the previous one, so exposure changes
        # apply to the next frame and pacing never drifts
        period_ns = int(self.timing.frame_period_ms * 1e6)
        base = self._last_target_ns
        target = (self.clock.now_ns() if base is None else base) + period_ns
        self._last_target_ns = target
        self.clock.sleep_until(target)
        now = self.clock.now_ns()
        self.jitter_ns.append(now - target)
        seed = None if self.noise_seed is None else (self.noise_seed, sweep)
        pixels = self._render(idx, seed)
        return RawFrame(
            pixels=pixels,
            slice_index=idx,
            sweep_index=sweep,
            channel_id=0,
            timestamp_ns=now,
        )

    def _render(self, slice_index: int, seed) -> np.ndarray:
        from .phantom import MAX_INTENSITY, _slice_sample_points

        pts = _slice_sample_points(self.geom, slice_index)
        if any(self.stage_offset_um):
            pts = pts + np.asarray(self.stage_offset_um)
        vals = self.scene.evaluate(pts)
        if seed is not None:
            rng = np.random.default_rng((*seed, slice_index))
            vals = rng.poisson(vals)
        return np.clip(np.rint(vals), 0, MAX_INTENSITY).astype(np.uint16)

    def jitter_stats_ms(self) -> dict:
        """Mean / p99 wakeup jitter of the sleeps so far."""
        if not self.jitter_ns:
            return {"mean_ms": 0.0, "p99_ms": 0.0, "samples": 0}
        arr = np.array(self.jitter_ns, dtype=float) / 1e6
        return {
            "mean_ms": float(arr.mean()),
            "p99_ms": float(np.percentile(arr, 99)),
            "samples": len(arr),
        }


# ---------------------------------------------------------------------------
# recorded stacks: raw + sidecar, multi-page TIFF


_GEOMETRY_FIELDS = (
    "alpha_deg",
    "scan_step_um",
    "pixel_pitch_um",
    "slice_count",
    "frame_width_px",
    "frame_height_px",
)
_TIMING_FIELDS = ("exposure_ms", "readout_ms")


def sidecar_path(path) -> str:
    base, _ = os.path.splitext(str(path))
    return base + ".json"


def write_sidecar(path, geom: SheetGeometry, timing: CameraTiming,
                  frames: int | None = None) -> None:
    data = {
        "geometry": {f: getattr(geom, f) for f in _GEOMETRY_FIELDS},
        "timing": {
            "exposure_ms": timing.exposure_ms,
            "readout_ms": timing.readout_ms,
            "trigger_mode": timing.trigger_mode,
        },
    }
    if frames is not None:
        data["frames"] = frames
    with open(sidecar_path(path), "w") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")


def read_sidecar(path) -> tuple[SheetGeometry, CameraTiming, int | None]:
    sp = sidecar_path(path)
    if not os.path.exists(sp):
        raise MetadataError(f"no sidecar file {sp}")
    with open(sp) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MetadataError(f"sidecar {sp} is not valid JSON: {exc}") from exc
    for section, fields in (("geometry", _GEOMETRY_FIELDS), ("timing", _TIMING_FIELDS)):
        if section not in data:
            raise MetadataError(f"sidecar missing section '{section}'")
        for f in fields:
            if f not in data[section]:
                raise MetadataError(f"sidecar missing field '{section}.{f}'")
    g = data["geometry"]
    geom = SheetGeometry(
        alpha_deg=g["alpha_deg"],
        scan_step_um=g["scan_step_um"],
        pixel_pitch_um=g["pixel_pitch_um"],
        slice_count=int(g["slice_count"]),
        frame_width_px=int(g["frame_width_px"]),
        frame_height_px=int(g["frame_height_px"]),
    )
    t = data["timing"]
    timing = CameraTiming(
        exposure_ms=t["exposure_ms"],
        readout_ms=t["readout_ms"],
        trigger_mode=t.get("trigger_mode", "internal"),
    )
    frames = data.get("frames")
    return geom, timing, None if frames is None else int(frames)


def write_stack_raw(path, frames, geom: SheetGeometry,
                    timing: CameraTiming | None = None) -> None:
    """Concatenated little-endian uint16 frames plus a JSON sidecar."""
    timing = timing if timing is not None else CameraTiming()
    arrs = [f.pixels if isinstance(f, RawFrame) else np.asarray(f) for f in frames]
    with open(path, "wb") as fh:
        for a in arrs:
            fh.write(a.astype("<u2").tobytes())
    write_sidecar(path, geom, timing, frames=len(arrs))


def write_stack_tiff(path, frames, geom: SheetGeometry,
                     timing: CameraTiming | None = None) -> None:
    """Multi-page 16-bit grayscale TIFF plus the same JSON sidecar."""
    timing = timing if timing is not None else CameraTiming()
    arrs = [f.pixels if isinstance(f, RawFrame) else np.asarray(f) for f in frames]
    pages = [Image.fromarray(np.ascontiguousarray(a.astype(np.uint16))) for a in arrs]
    pages[0].save(path, format="TIFF", save_all=True, append_images=pages[1:])
    write_sidecar(path, geom, timing, frames=len(arrs))


class FileSource:
    """Replays a recorded stack as fast as the consumer pulls.

    Timestamps are synthesized from the sidecar timing ((k+1) * frame
    period), so two replays of the same file are bit-identical, frames
    and metadata both.
    """

    def __init__(self, frames: list[np.ndarray], geom: SheetGeometry,
                 timing: CameraTiming):
        self.geom = geom
        self.timing = timing
        self._frames = frames
        self._k = 0

    def __len__(self) -> int:
        return len(self._frames)

    def next_frame(self) -> RawFrame:
        if self._k >= len(self._frames):
            raise EndOfStream(f"stack exhausted after {len(self._frames)} frames")
        k = self._k
        self._k += 1
        n = self.geom.slice_count
        return RawFrame(
            pixels=self._frames[k],
            slice_index=k % n,
            sweep_index=k // n,
            channel_id=0,
            timestamp_ns=int((k + 1) * self.timing.frame_period_ms * 1e6),
        )


def _load_raw_frames(path, geom: SheetGeometry, count: int | None) -> list[np.ndarray]:
    w, h = geom.frame_width_px, geom.frame_height_px
    frame_px = w * h
    data = np.fromfile(path, dtype="<u2")
    if data.size == 0 or data.size % frame_px != 0:
        raise MetadataError(
            f"raw file holds {data.size} pixels, not a multiple of the "
            f"sidecar frame size {w}x{h}"
        )
    n = data.size // frame_px
    if count is not None and n != count:
        raise MetadataError(
            f"raw file holds {n} frames, sidecar says {count}"
        )
    stack = data.reshape(n, h, w)
    return [np.ascontiguousarray(stack[i]) for i in range(n)]


def _load_tiff_frames(path, geom: SheetGeometry, count: int | None) -> list[np.ndarray]:
    frames = []
    try:
        with Image.open(path) as im:
            for i in range(getattr(im, "n_frames", 1)):
                im.seek(i)
                arr = np.asarray(im)
                if arr.dtype.itemsize != 2 or arr.ndim != 2:
                    raise MetadataError(
                        f"page {i} is not 16-bit grayscale ({arr.dtype}, "
                        f"{arr.ndim}-D)"
                    )
                frames.append(arr.astype(np.uint16))
    except (OSError, SyntaxError) as exc:
        raise MetadataError(f"cannot read TIFF {path}: {exc}") from exc
    w, h = geom.frame_width_px, geom.frame_height_px
    for i, a in enumerate(frames):
        if a.shape != (h, w):
            raise MetadataError(
                f"TIFF page {i} is {a.shape[1]}x{a.shape[0]}, sidecar says {w}x{h}"
            )
    if count is not None and len(frames) != count:
        raise MetadataError(
            f"TIFF holds {len(frames)} pages, sidecar says {count}"
        )
    return frames


def open_stack(path, geom: SheetGeometry | None = None,
               timing: CameraTiming | None = None) -> FileSource:
    """Open a recorded stack (.tif/.tiff or raw) for replay.

    Geometry and timing come from the JSON sidecar next to the file
    unless passed explicitly (flags beat sidecar).
    """
    path = str(path)
    if not os.path.exists(path):
        raise MetadataError(f"no such stack file: {path}")
    side_geom = side_timing = count = None
    if geom is None or timing is None:
        side_geom, side_timing, count = read_sidecar(path)
    geom = geom if geom is not None else side_geom
    timing = timing if timing is not None else side_timing
    if path.lower().endswith((".tif", ".tiff")):
        frames = _load_tiff_frames(path, geom, count)
    else:
        frames = _load_raw_frames(path, geom, count)
    return FileSource(frames, geom, timing)
