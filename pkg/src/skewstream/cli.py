"""Command line entry points.

Four subcommands:

  deskew       batch-process a recorded stack into max projections
  live         run the simulated microscope behind a streaming server
  bench        time the pipeline stages across parameter sweeps
  phantom-gen  render a synthetic skewed stack from a scene description

Every run resolves its settings from flags plus an optional config file
(--config), with flags winning.  The config file is a TOML-style subset:
sections, `key = value` pairs, strings in double quotes, numbers,
booleans, arrays in brackets, and # comments.  Annotated example:

    # geometry of the acquisition (matches the stack being processed
    # or the simulated camera being run)
    [geometry]
    alpha_deg = 60.0        # sheet tilt from the scan axis, degrees
    scan_step_um = 0.2      # stage travel between slices
    pixel_pitch_um = 0.115  # camera pixel size in sample space
    slice_count = 50        # images per stack
    width_px = 1304         # frame width (invariant axis)
    height_px = 87          # frame height (sheet-depth axis)

    [timing]
    exposure_ms = 0.1
    readout_ms = 1.5

    [view]
    angles_deg = [45.0]     # batch: one projection per angle
    interp = "linear"       # nearest | linear
    mode = "global"         # global | rolling update policy

    [live]
    listen = "127.0.0.1:8787"
    transport = "ws"        # ws | tcp

    # optional multi-channel split: [id, x0, y0, width, height] per row
    [channels]
    regions = [[0, 0, 0, 652, 87], [1, 652, 0, 652, 87]]

Exit codes: 0 success, 2 bad or missing metadata/arguments, 1 any other
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, bench as bench_mod, geometry, phantom, server
from . import pipeline as pipeline_mod
from . import source as source_mod
from .errors import MetadataError, ParameterError, SkewstreamError

# ---------------------------------------------------------------------------
# config file


def _strip_comment(line: str) -> str:
    out = []
    in_string = False
    for ch in line:
        if ch == '"':
            in_string = not in_string
        if ch == "#" and not in_string:
            break
        out.append(ch)
    return "".join(out).strip()


def parse_config_file(path) -> dict:
    """Flat {section.key: value} dict from the documented TOML subset."""
    text = Path(path).read_text()
    values: dict = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ParameterError(f"{path}:{lineno}: empty section name")
            continue
        if "=" not in line:
            raise ParameterError(
                f"{path}:{lineno}: expected key = value, got {raw.strip()!r}"
            )
        key, _, value_text = line.partition("=")
        key = key.strip()
        value_text = value_text.strip()
        if not key or not value_text:
            raise ParameterError(f"{path}:{lineno}: malformed assignment")
        try:
            value = json.loads(value_text)
        except json.JSONDecodeError:
            raise ParameterError(
                f"{path}:{lineno}: cannot parse value {value_text!r} "
                "(strings need double quotes)"
            )
        full_key = f"{section}.{key}" if section else key
        values[full_key] = value
    return values


# ---------------------------------------------------------------------------
# run configuration (flags + config file, flags winning)

_GEOMETRY_KEYS = {
    "alpha_deg": "geometry.alpha_deg",
    "scan_step_um": "geometry.scan_step_um",
    "pixel_pitch_um": "geometry.pixel_pitch_um",
    "slice_count": "geometry.slice_count",
    "width_px": "geometry.width_px",
    "height_px": "geometry.height_px",
}


@dataclass
class RunConfig:
    """Resolved settings for one CLI run."""

    mode: str
    geom: geometry.SheetGeometry | None
    timing: source_mod.CameraTiming | None
    view_angles_deg: list[float]
    shear_px: float | None
    interp: str
    update_mode: str
    layout: pipeline_mod.ChannelLayout | None
    input_path: Path | None
    output_path: Path | None
    scene_path: Path | None
    listen: tuple[str, int]
    transport: str
    ui_dir: Path | None
    noise_seed: int | None
    sweeps: int | None
    seed: int

    def as_manifest_config(self) -> dict:
        out = {
            "mode": self.mode,
            "view_angles_deg": self.view_angles_deg,
            "shear_px": self.shear_px,
            "interp": self.interp,
            "update_mode": self.update_mode,
            "input": str(self.input_path) if self.input_path else None,
            "output": str(self.output_path) if self.output_path else None,
            "scene": str(self.scene_path) if self.scene_path else None,
            "noise_seed": self.noise_seed,
            "sweeps": self.sweeps,
        }
        if self.geom is not None:
            out["geometry"] = {
                k: getattr(self.geom, k) for k in (
                    "alpha_deg", "scan_step_um", "pixel_pitch_um",
                    "slice_count", "frame_width_px", "frame_height_px",
                )
            }
        if self.timing is not None:
            out["timing"] = {
                "exposure_ms": self.timing.exposure_ms,
                "readout_ms": self.timing.readout_ms,
            }
        if self.layout is not None:
            out["channels"] = [
                [r.channel_id, r.x0, r.y0, r.width, r.height]
                for r in self.layout.regions
            ]
        return out


def _pick(args, cfg: dict, dest: str, key: str, default=None):
    flag = getattr(args, dest, None)
    if flag is not None:
        return flag
    if key in cfg:
        return cfg[key]
    return default


def _resolve_geometry(args, cfg: dict, required: bool):
    raw = {
        dest: _pick(args, cfg, dest, key)
        for dest, key in _GEOMETRY_KEYS.items()
    }
    missing = [k for k, v in raw.items() if v is None]
    if missing:
        if required:
            raise MetadataError(
                "geometry is incomplete: missing " + ", ".join(sorted(missing))
            )
        if len(missing) < len(raw):
            # partial geometry is worse than none: sidecar would silently
            # override the provided fields
            raise MetadataError(
                "geometry is incomplete: missing " + ", ".join(sorted(missing))
                + " (give all six fields or none and use the sidecar)"
            )
        return None
    return geometry.SheetGeometry(
        alpha_deg=float(raw["alpha_deg"]),
        scan_step_um=float(raw["scan_step_um"]),
        pixel_pitch_um=float(raw["pixel_pitch_um"]),
        slice_count=int(raw["slice_count"]),
        frame_width_px=int(raw["width_px"]),
        frame_height_px=int(raw["height_px"]),
    )


def _resolve_timing(args, cfg: dict):
    exposure = _pick(args, cfg, "exposure_ms", "timing.exposure_ms")
    readout = _pick(args, cfg, "readout_ms", "timing.readout_ms")
    if exposure is None and readout is None:
        return None
    return source_mod.CameraTiming(
        exposure_ms=float(exposure if exposure is not None else 0.1),
        readout_ms=float(readout if readout is not None
                         else source_mod.DEFAULT_READOUT_MS),
    )


def _resolve_layout(cfg: dict):
    regions = cfg.get("channels.regions")
    if regions is None:
        return None
    try:
        parsed = [
            pipeline_mod.ChannelRegion(int(c), int(x), int(y), int(w), int(h))
            for c, x, y, w, h in regions
        ]
    except (TypeError, ValueError) as exc:
        raise ParameterError(f"bad channels.regions entry: {exc}")
    return pipeline_mod.ChannelLayout(tuple(parsed))


def resolve_run_config(args) -> RunConfig:
    cfg = parse_config_file(args.config) if getattr(args, "config", None) else {}
    mode = {"deskew": "batch", "live": "live", "bench": "bench",
            "phantom-gen": "phantom-gen"}[args.command]
    geom = _resolve_geometry(
        args, cfg, required=mode in ("live", "phantom-gen")
    )
    angles = getattr(args, "view_angle", None)
    if angles is None:
        angles = cfg.get("view.angles_deg")
    listen = server.resolve_listen(
        getattr(args, "listen", None) or cfg.get("live.listen")
    )
    return RunConfig(
        mode=mode,
        geom=geom,
        timing=_resolve_timing(args, cfg),
        view_angles_deg=[float(a) for a in angles] if angles else [],
        shear_px=_pick(args, cfg, "shear_px", "view.shear_px"),
        interp=_pick(args, cfg, "interp", "view.interp", "linear"),
        update_mode=_pick(args, cfg, "update_mode", "view.mode", "global"),
        layout=_resolve_layout(cfg),
        input_path=Path(args.input) if getattr(args, "input", None) else None,
        output_path=Path(args.output) if getattr(args, "output", None) else None,
        scene_path=Path(args.scene) if getattr(args, "scene", None) else None,
        listen=listen,
        transport=_pick(args, cfg, "transport", "live.transport", "ws"),
        ui_dir=Path(args.ui) if getattr(args, "ui", None) else None,
        noise_seed=getattr(args, "noise_seed", None),
        sweeps=getattr(args, "sweeps", None),
        seed=getattr(args, "seed", None) or 0,
    )


# ---------------------------------------------------------------------------
# subcommands


def _load_scene(run: RunConfig) -> phantom.PhantomScene:
    if run.scene_path is not None:
        return phantom.load_scene(run.scene_path)
    return default_scene(run.geom)


def default_scene(geom: geometry.SheetGeometry) -> phantom.PhantomScene:
    """Centered soft sphere filling a third of the sampled volume."""
    x = geom.frame_width_px * geom.pixel_pitch_um
    y = (geom.slice_count - 1) * geom.scan_step_um + (
        geom.frame_height_px * geom.pixel_pitch_um * np.cos(geom.alpha_rad)
    )
    z = geom.frame_height_px * geom.pixel_pitch_um * np.sin(geom.alpha_rad)
    extent = (float(x), float(y), float(z))
    radius = min(extent) / 3.0
    return phantom.PhantomScene(
        primitives=[phantom.sphere(
            center_um=tuple(e / 2.0 for e in extent),
            radius_um=radius,
            intensity=3000.0,
            soft_edge_um=geom.pixel_pitch_um,
        )],
        extent_um=extent,
    )


def run_batch(run: RunConfig) -> int:
    """Deskew a recorded stack into one max projection per view angle."""
    if run.input_path is None or run.output_path is None:
        raise ParameterError("deskew needs --input and --output")
    files = source_mod.open_stack(run.input_path, run.geom, run.timing)
    geom = files.geom
    out_dir = run.output_path
    out_dir.mkdir(parents=True, exist_ok=True)

    angles = run.view_angles_deg
    if not angles and run.shear_px is None:
        angles = [geometry.view_angle_from_shear(
            geometry.native_shear_px(geom), geom
        )]
    transforms = [
        geometry.view_transform(geom, view_angle_deg=a) for a in angles
    ]
    if run.shear_px is not None:
        transforms.append(
            geometry.view_transform(geom, shear_px=run.shear_px)
        )

    stack = [files.next_frame() for _ in range(len(files))]
    outputs = []
    for vt in transforms:
        canvas = pipeline_mod.ProjectionCanvas(geom, vt.shear_px,
                                               interp=run.interp)
        for frame in stack:
            canvas.place(frame)
        projection = canvas.finalize_global()
        warped = pipeline_mod.warp_projection(projection, vt.warp_scale)
        name = f"mip_{vt.view_angle_deg:07.3f}deg.png"
        phantom.save_png16(out_dir / name, warped)
        h_um, w_um = geometry.display_extent_um(
            warped.shape[1], warped.shape[0], geom.pixel_pitch_um
        )
        outputs.append({
            "file": name,
            "view_angle_deg": vt.view_angle_deg,
            "shear_px": vt.shear_px,
            "warp_scale": vt.warp_scale,
            "width_px": warped.shape[1],
            "height_px": warped.shape[0],
            "out_pitch_um": vt.out_pitch_um,
            "extent_um": [h_um, w_um],
            "interp": run.interp,
        })

    metadata = {
        "outputs": outputs,
        "geometry": run.as_manifest_config()["geometry"] if run.geom else {
            k: getattr(geom, k) for k in (
                "alpha_deg", "scan_step_um", "pixel_pitch_um",
                "slice_count", "frame_width_px", "frame_height_px",
            )
        },
        "manifest": bench_mod.build_manifest(
            run.as_manifest_config(), run.seed, with_timestamp=False
        ),
    }
    (out_dir / "metadata.json").write_text(
        json.dumps(metadata, indent=2, sort_keys=True) + "\n"
    )
    print(f"wrote {len(outputs)} projection(s) to {out_dir}")
    return 0


def run_phantom_gen(run: RunConfig) -> int:
    """Render a synthetic skewed stack plus sidecar and scene description."""
    if run.output_path is None:
        raise ParameterError("phantom-gen needs --output")
    scene = _load_scene(run)
    timing = run.timing if run.timing is not None else source_mod.CameraTiming()
    stack = phantom.render_stack(scene, run.geom, noise_seed=run.noise_seed)
    out = run.output_path
    out.parent.mkdir(parents=True, exist_ok=True)
    if str(out).lower().endswith((".tif", ".tiff")):
        source_mod.write_stack_tiff(out, stack, run.geom, timing)
    else:
        source_mod.write_stack_raw(out, stack, run.geom, timing)
    scene_out = out.with_suffix(".scene.json")
    phantom.save_scene(scene, scene_out)
    manifest_out = out.with_suffix(".manifest.json")
    manifest_out.write_text(json.dumps(
        bench_mod.build_manifest(run.as_manifest_config(),
                                 run.noise_seed or 0, with_timestamp=False),
        indent=2, sort_keys=True,
    ) + "\n")
    print(f"wrote {len(stack)} slices to {out}")
    return 0


def run_bench_cmd(run: RunConfig, args) -> int:
    overrides = {}
    for name in ("repeats", "warmup"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    if args.quick:
        overrides.setdefault("repeats", 2)
        overrides.setdefault("warmup", 1)
        overrides["exposures_ms"] = (0.1, 0.4, 1.6)
        overrides["slice_counts"] = (4, 16, 64)
        overrides["scan_extents_um"] = (64.0, 256.0, 1024.0)
    config = bench_mod.BenchConfig(seed=run.seed, **overrides)
    report = bench_mod.run_bench(config)
    if run.output_path is not None:
        run.output_path.parent.mkdir(parents=True, exist_ok=True)
        run.output_path.write_text(json.dumps(report, indent=2) + "\n")
        print(f"report written to {run.output_path}")
    print(bench_mod.render_table(report))
    return 0


def run_live(run: RunConfig) -> int:
    scene = _load_scene(run)
    timing = run.timing if run.timing is not None else source_mod.CameraTiming()
    camera = source_mod.SimulatedCameraSource(
        scene, run.geom, timing=timing,
        noise_seed=run.noise_seed, sweeps=run.sweeps,
    )
    angle = run.view_angles_deg[0] if run.view_angles_deg else None
    cfg = pipeline_mod.PipelineConfig(
        geom=run.geom,
        shear_px=run.shear_px,
        view_angle_deg=None if run.shear_px is not None else angle,
        mode=run.update_mode,
        interp=run.interp,
        layout=run.layout,
    )
    pipe = pipeline_mod.LivePipeline(camera, cfg)
    manifest_path = Path("skewstream_manifest.json")
    manifest_path.write_text(json.dumps(
        bench_mod.build_manifest(run.as_manifest_config(),
                                 run.noise_seed or 0),
        indent=2, sort_keys=True,
    ) + "\n")
    host, port = run.listen
    pipe.start()
    print(f"serving {run.transport} on {host}:{port} "
          f"(manifest: {manifest_path})")
    try:
        if run.transport == "tcp":
            tcp = server.TcpFrameServer(pipe, camera, host, port)
            tcp.serve_forever()
        else:
            server.serve_websocket(pipe, camera, host, port,
                                   ui_dir=run.ui_dir)
    except KeyboardInterrupt:
        pass
    finally:
        pipe.stop()
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_geometry_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("geometry")
    g.add_argument("--alpha-deg", dest="alpha_deg", type=float,
                   help="sheet tilt from the scan axis, degrees")
    g.add_argument("--scan-step-um", dest="scan_step_um", type=float,
                   help="stage travel between slices, um")
    g.add_argument("--pixel-pitch-um", dest="pixel_pitch_um", type=float,
                   help="sample-space pixel pitch, um")
    g.add_argument("--slices", dest="slice_count", type=int,
                   help="images per stack")
    g.add_argument("--width", dest="width_px", type=int,
                   help="frame width, px")
    g.add_argument("--height", dest="height_px", type=int,
                   help="frame height, px")


def _add_timing_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("camera timing")
    g.add_argument("--exposure-ms", dest="exposure_ms", type=float,
                   help="camera exposure per slice, ms")
    g.add_argument("--readout-ms", dest="readout_ms", type=float,
                   help="sensor readout per slice, ms")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skewstream",
        description="Streaming deskew engine for oblique light-sheet stacks.",
    )
    parser.add_argument("--version", action="version",
                        version=f"skewstream {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    d = sub.add_parser("deskew", help="batch-deskew a recorded stack")
    d.add_argument("--input", required=True,
                   help="stack file (.raw or .tif), sidecar JSON alongside")
    d.add_argument("--output", required=True, help="output directory")
    d.add_argument("--config", help="TOML-style config file")
    d.add_argument("--view-angle", dest="view_angle", type=float,
                   action="append",
                   help="projection angle in degrees; repeatable "
                        "(default: the native sheet angle)")
    d.add_argument("--shear-px", dest="shear_px", type=float,
                   help="project at an explicit per-slice shear instead")
    d.add_argument("--interp", choices=("nearest", "linear"),
                   help="row interpolation (default linear)")
    _add_geometry_flags(d)
    _add_timing_flags(d)

    lv = sub.add_parser("live", help="simulated camera behind a live server")
    lv.add_argument("--config", help="TOML-style config file")
    lv.add_argument("--scene", help="phantom scene JSON "
                                    "(default: centered sphere)")
    lv.add_argument("--listen", help="host:port "
                    f"(or ${server.LISTEN_ENV_VAR}, default "
                    f"{server.DEFAULT_LISTEN})")
    lv.add_argument("--transport", choices=("ws", "tcp"),
                    help="WebSocket app or raw TCP framing (default ws)")
    lv.add_argument("--ui", help="directory of static viewer files to serve")
    lv.add_argument("--mode", dest="update_mode",
                    choices=("global", "rolling"),
                    help="projection update policy (default global)")
    lv.add_argument("--view-angle", dest="view_angle", type=float,
                    action="append", help="initial projection angle")
    lv.add_argument("--shear-px", dest="shear_px", type=float)
    lv.add_argument("--interp", choices=("nearest", "linear"))
    lv.add_argument("--sweeps", type=int,
                    help="stop after this many stacks (default: run forever)")
    lv.add_argument("--noise-seed", dest="noise_seed", type=int,
                    help="Poisson noise seed (default: noise free)")
    _add_geometry_flags(lv)
    _add_timing_flags(lv)

    b = sub.add_parser("bench", help="stage-timing sweeps and crossover")
    b.add_argument("--config", help="TOML-style config file")
    b.add_argument("--output", help="write the JSON report here")
    b.add_argument("--repeats", type=int, help="timing repeats per point")
    b.add_argument("--warmup", type=int, help="warmup calls per point")
    b.add_argument("--quick", action="store_true",
                   help="3-point grids and fewer repeats")
    b.add_argument("--seed", type=int, help="workload rng seed")

    pg = sub.add_parser("phantom-gen", help="render a synthetic stack")
    pg.add_argument("--output", required=True,
                    help="stack file to write (.raw or .tif)")
    pg.add_argument("--config", help="TOML-style config file")
    pg.add_argument("--scene", help="phantom scene JSON "
                                    "(default: centered sphere)")
    pg.add_argument("--noise-seed", dest="noise_seed", type=int,
                    help="Poisson noise seed (default: noise free)")
    _add_geometry_flags(pg)
    _add_timing_flags(pg)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run = resolve_run_config(args)
        if args.command == "deskew":
            return run_batch(run)
        if args.command == "live":
            return run_live(run)
        if args.command == "bench":
            return run_bench_cmd(run, args)
        return run_phantom_gen(run)
    except MetadataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SkewstreamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
