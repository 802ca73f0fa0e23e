"""Stage-timing sweeps and the acquisition-limited crossover.

Each benchmark point times the three pipeline stages for one stack:

  acquisition  derived from the camera model, N * (exposure + readout).
               The camera is the hardware limit; nothing in software can
               change it, so sleeping it out would only add noise.
  processing   measured: place every slice on the projection canvas and
               finalize the sweep (the deskew work).
  plotting     measured: warp the projection to the display grid and
               encode the wire packet (everything downstream of deskew).

Three five-point sweeps vary exposure, slices per stack, and scan-axis
field of view.  The slice-count sweep holds the scanned extent fixed
(step size shrinks as N grows) so the output canvas stays the same size
and N is varied independently of the field of view.

The report classifies each (sweep, stage) cell as increasing or
invariant, and estimates the displayed-image size at which the run stops
being acquisition limited: processing and plotting grow linearly with
canvas size while acquisition is flat, so the crossover is where the
fitted max(processing, plotting) line meets the acquisition time.  When
that sits beyond the largest swept canvas the estimate is a linear
extrapolation and is flagged as such.  Absolute times are machine
dependent; only orderings and monotonicity are meaningful across runs.
"""

from __future__ import annotations

import hashlib
import json
import platform
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone

import numpy as np
import scipy
import scipy.stats

from . import __version__, geometry
from .errors import ParameterError
from .pipeline import DisplayImage, ProjectionCanvas, RawFrame, warp_projection
from .server import encode_frame_packet
from .source import CameraTiming

STAGES = ("acquisition", "processing", "plotting")

TAU_INCREASING = 0.9
# Invariant-stage spread observed on a busy shared CPU tops out around
# 16% even with interleaved min-of-repeats sampling; the genuinely
# increasing stages in these sweeps spread 60%+ between endpoints, so a
# quarter-of-the-mean band separates the two with margin on both sides.
NOISE_BAND = 0.25

REPORT_VERSION = 1


@dataclass(frozen=True)
class BenchConfig:
    """Sweep grids and the fixed base point they pivot around."""

    # The grids are spaced so every increasing cell moves far more per
    # step than the per-point noise floor of a busy shared CPU; the FOV
    # points in particular start where the canvas term already outweighs
    # per-slice interpolation, or adjacent points would sit within
    # allocation luck.
    alpha_deg: float = 45.0
    pixel_pitch_um: float = 0.115
    frame_width_px: int = 512
    frame_height_px: int = 16
    base_slice_count: int = 4
    base_scan_extent_um: float = 48.0
    base_exposure_ms: float = 0.1
    readout_ms: float = 1.5
    exposures_ms: tuple = (0.1, 0.2, 0.4, 0.8, 1.6)
    slice_counts: tuple = (4, 8, 16, 32, 64)
    scan_extents_um: tuple = (64.0, 128.0, 256.0, 512.0, 1024.0)
    crossover_exposures_ms: tuple = (0.1, 0.5)
    repeats: int = 5
    warmup: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("exposures_ms", "slice_counts", "scan_extents_um"):
            values = getattr(self, name)
            if len(values) < 3:
                raise ParameterError(f"{name} needs at least 3 points")
            if list(values) != sorted(values):
                raise ParameterError(f"{name} must be sorted ascending")
        if self.repeats < 1:
            raise ParameterError("repeats must be >= 1")
        if len(self.crossover_exposures_ms) != 2:
            raise ParameterError("crossover_exposures_ms needs exactly 2 points")

    def geom(self, slice_count=None, scan_extent_um=None) -> geometry.SheetGeometry:
        n = self.base_slice_count if slice_count is None else slice_count
        extent = (self.base_scan_extent_um if scan_extent_um is None
                  else scan_extent_um)
        return geometry.SheetGeometry(
            alpha_deg=self.alpha_deg,
            scan_step_um=extent / max(n - 1, 1),
            pixel_pitch_um=self.pixel_pitch_um,
            slice_count=n,
            frame_width_px=self.frame_width_px,
            frame_height_px=self.frame_height_px,
        )

    def timing(self, exposure_ms=None) -> CameraTiming:
        e = self.base_exposure_ms if exposure_ms is None else exposure_ms
        return CameraTiming(exposure_ms=e, readout_ms=self.readout_ms)


class _PointTimer:
    """Closures timing the software stages of one parameter point."""

    def __init__(self, geom: geometry.SheetGeometry, timing: CameraTiming,
                 rng: np.random.Generator):
        self.acquisition_ms = geom.slice_count * timing.frame_period_ms
        self.frames = [
            RawFrame(
                pixels=rng.integers(
                    0, 4096,
                    size=(geom.frame_height_px, geom.frame_width_px),
                    dtype=np.uint16,
                ),
                slice_index=k,
            )
            for k in range(geom.slice_count)
        ]
        self.vt = geometry.view_transform(
            geom, shear_px=geometry.native_shear_px(geom)
        )
        self.canvas = ProjectionCanvas(geom, self.vt.shear_px, interp="linear")
        self.geom = geom
        self.proj = None
        self.processing()  # fills self.proj for the plotting closure
        warped = warp_projection(self.proj, self.vt.warp_scale)
        self.canvas_px = warped.size

    def processing(self):
        for f in self.frames:
            self.canvas.place(f)
        self.proj = self.canvas.finalize_global()

    def plotting(self):
        warped = warp_projection(self.proj, self.vt.warp_scale)
        image = DisplayImage(
            pixels=warped,
            channel_id=0,
            sweep_index=0,
            slice_index=self.geom.slice_count - 1,
            view_angle_deg=self.vt.view_angle_deg,
            mode="global",
            out_pitch_um=self.vt.out_pitch_um,
            lateral_pitch_um=self.geom.pixel_pitch_um,
        )
        encode_frame_packet(image)

    def reseat(self):
        """Fresh allocations for every working buffer.

        How fast identical work runs differs by a surprising amount with
        the luck of page placement; reallocating between rounds keeps one
        unlucky buffer from biasing a point across all its repeats.
        """
        self.frames = [
            RawFrame(pixels=np.array(f.pixels), slice_index=f.slice_index)
            for f in self.frames
        ]
        self.canvas = ProjectionCanvas(
            self.geom, self.vt.shear_px, interp="linear"
        )
        self.processing()


def _inner_count(fn, min_sample_ms: float = 4.0) -> int:
    """Batch calls until one timing sample outweighs clock resolution."""
    t0 = time.perf_counter()
    fn()
    probe = time.perf_counter() - t0
    return int(np.clip(np.ceil(min_sample_ms / 1e3 / max(probe, 1e-9)),
                       1, 256))


def _sample_ms(fn, inner: int) -> float:
    t0 = time.perf_counter()
    for _ in range(inner):
        fn()
    return (time.perf_counter() - t0) / inner * 1e3


def _measure_timers(timers, repeats: int, warmup: int):
    """Per-point best-case stage times, sampled round-robin.

    Points are interleaved within every round so a phase of machine load
    lands on all of them instead of biasing whichever point was being
    measured when it hit, and buffers are reseated between rounds.  Both
    load and allocation luck only ever add time, so the minimum across
    rounds is the stable statistic.
    """
    n = len(timers)
    for t in timers:
        for _ in range(warmup):
            t.processing()
            t.plotting()
    inner_proc = [_inner_count(t.processing) for t in timers]
    inner_plot = [_inner_count(t.plotting) for t in timers]
    best_proc = [np.inf] * n
    best_plot = [np.inf] * n
    for rnd in range(repeats):
        if rnd:
            for t in timers:
                t.reseat()
        for i, t in enumerate(timers):
            best_proc[i] = min(best_proc[i],
                               _sample_ms(t.processing, inner_proc[i]))
        for i, t in enumerate(timers):
            best_plot[i] = min(best_plot[i],
                               _sample_ms(t.plotting, inner_plot[i]))
    return [float(v) for v in best_proc], [float(v) for v in best_plot]


def measure_point(geom: geometry.SheetGeometry, timing: CameraTiming,
                  repeats: int = 5, warmup: int = 1,
                  rng: np.random.Generator | None = None) -> dict:
    """Time one parameter point; returns per-stage ms and the canvas size."""
    rng = rng if rng is not None else np.random.default_rng(0)
    timer = _PointTimer(geom, timing, rng)
    proc, plot = _measure_timers([timer], repeats, warmup)
    return {
        "acquisition_ms": timer.acquisition_ms,
        "processing_ms": proc[0],
        "plotting_ms": plot[0],
        "canvas_px": int(timer.canvas_px),
    }


def classify(xs, ys, *, tau_threshold: float = TAU_INCREASING,
             noise_band: float = NOISE_BAND) -> str:
    """Call a series increasing, invariant, decreasing, or mixed.

    The noise band wins: a series whose relative spread stays inside it
    is invariant no matter how its jitter happens to sort, so a flat
    stage with a lucky monotone wobble is not misread as increasing.
    """
    ys = np.asarray(ys, dtype=float)
    mean = float(np.mean(ys))
    spread = float(ys.max() - ys.min())
    if mean <= 0 or spread / mean <= noise_band:
        return "invariant"
    tau = scipy.stats.kendalltau(xs, ys).statistic
    if np.isnan(tau):
        return "invariant"
    if tau >= tau_threshold:
        return "increasing"
    if tau <= -tau_threshold:
        return "decreasing"
    return "mixed"


def _sweep(config: BenchConfig, rng: np.random.Generator, points,
           make_args) -> dict:
    timers = [_PointTimer(*make_args(v), rng) for v in points]
    processing, plotting = _measure_timers(
        timers, config.repeats, config.warmup
    )
    return {
        "points": list(points),
        "timings": {
            "acquisition_ms": [t.acquisition_ms for t in timers],
            "processing_ms": processing,
            "plotting_ms": plotting,
        },
        "canvas_px": [int(t.canvas_px) for t in timers],
    }


def _classify_sweep(sweep: dict) -> dict:
    return {
        stage: classify(sweep["points"], sweep["timings"][stage + "_ms"])
        for stage in STAGES
    }


def _crossover_px(sizes, processing_ms, plotting_ms, acquisition_ms):
    """Canvas size where fitted software time first reaches acquisition."""
    sizes = np.asarray(sizes, dtype=float)
    roots = []
    for ys in (processing_ms, plotting_ms):
        slope, intercept = np.polyfit(sizes, np.asarray(ys, dtype=float), 1)
        # real stage slopes sit around 1e-7..1e-6 ms/px; anything below
        # this is a flat line plus rounding dust
        if slope <= 1e-12:
            continue
        roots.append((acquisition_ms - intercept) / slope)
    if not roots:
        return None, False
    crossover = max(0.0, min(roots))
    return crossover, bool(crossover > sizes.max())


def run_bench(config: BenchConfig | None = None) -> dict:
    """Run all sweeps and the crossover estimate; returns the report dict."""
    config = config if config is not None else BenchConfig()
    rng = np.random.default_rng(config.seed)

    sweeps = {
        "exposure_ms": _sweep(
            config, rng, config.exposures_ms,
            lambda e: (config.geom(), config.timing(exposure_ms=e)),
        ),
        "slice_count": _sweep(
            config, rng, config.slice_counts,
            lambda n: (config.geom(slice_count=n), config.timing()),
        ),
        "scan_extent_um": _sweep(
            config, rng, config.scan_extents_um,
            lambda x: (config.geom(scan_extent_um=x), config.timing()),
        ),
    }
    classification = {name: _classify_sweep(s) for name, s in sweeps.items()}

    # Processing and plotting do not depend on exposure (the exposure
    # sweep checks exactly that), so both crossovers come from the one
    # measured software-vs-size line, with the acquisition budget being
    # the only thing the exposure changes.
    fov = sweeps["scan_extent_um"]
    crossover = {"exposures_ms": list(config.crossover_exposures_ms),
                 "canvas_px": [], "extrapolated": []}
    for e in config.crossover_exposures_ms:
        acq = config.base_slice_count * config.timing(exposure_ms=e).frame_period_ms
        px, extrapolated = _crossover_px(
            fov["canvas_px"],
            fov["timings"]["processing_ms"],
            fov["timings"]["plotting_ms"],
            acq,
        )
        crossover["canvas_px"].append(None if px is None else float(px))
        crossover["extrapolated"].append(extrapolated)

    report = {
        "version": REPORT_VERSION,
        "config": asdict(config),
        "sweeps": sweeps,
        "classification": classification,
        "crossover": crossover,
        "manifest": build_manifest(asdict(config), config.seed),
    }
    validate_report(report)
    return report


# ---------------------------------------------------------------------------
# report schema + rendering


def report_schema() -> dict:
    from importlib import resources

    ref = resources.files("skewstream.schemas") / "bench_report.schema.json"
    return json.loads(ref.read_text())


def validate_report(report: dict) -> None:
    import jsonschema

    try:
        jsonschema.validate(report, report_schema())
    except jsonschema.ValidationError as exc:
        raise ParameterError(f"bench report failed validation: {exc.message}")


_SWEEP_LABELS = {
    "exposure_ms": "Increasing camera exposure time",
    "slice_count": "Increasing number of images per stack",
    "scan_extent_um": "Increasing field of view along the scan axis",
}


def render_table(report: dict) -> str:
    """Dependency matrix as fixed-width text, one row per swept variable."""
    label_w = max(len(v) for v in _SWEEP_LABELS.values())
    col_w = 14
    head = " " * label_w + "".join(
        f"  {s.capitalize():<{col_w}}" for s in STAGES
    )
    lines = [head]
    for key, label in _SWEEP_LABELS.items():
        cells = report["classification"][key]
        row = f"{label:<{label_w}}" + "".join(
            f"  {cells[s].capitalize():<{col_w}}" for s in STAGES
        )
        lines.append(row)
    xo = report["crossover"]
    for e, px, extra in zip(xo["exposures_ms"], xo["canvas_px"],
                            xo["extrapolated"]):
        if px is None:
            lines.append(f"crossover @ {e} ms exposure: not reached")
            continue
        note = " (extrapolated)" if extra else ""
        lines.append(
            f"crossover @ {e} ms exposure: {px / 1e6:.2f} MP{note}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# reproducibility manifest


def config_hash(config_dict: dict) -> str:
    canonical = json.dumps(config_dict, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def build_manifest(config_dict: dict, seed, with_timestamp: bool = True) -> dict:
    """Everything needed to rerun: config hash, seed, and versions.

    Deterministic outputs (batch deskew, phantom stacks) leave the
    timestamp out so reruns stay bit-identical.
    """
    manifest = {
        "config_hash": config_hash(config_dict),
        "seed": seed,
        "versions": {
            "skewstream": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    if with_timestamp:
        manifest["created_utc"] = datetime.now(timezone.utc).isoformat()
    return manifest
