"""Live streaming server: binary frame packets out, JSON control in.

Wire format (version 1, all little-endian, fixed offsets):

    offset size  field
    0      4     magic b"SKWF"
    4      2     version (1)
    6      1     pixel_format (0 = gray16, 1 = gray8)
    7      1     mode (0 = global, 1 = rolling)
    8      2     channel_id
    10     4     sweep_index
    14     4     slice_index
    18     4     view_angle_centideg (signed)
    22     4     width
    26     4     height
    30     4     out_pitch_nm
    34     2     gray8_offset (min pixel value of the frame)
    36     2     gray8_range  (max - min; 0 means constant frame)
    38     4f    acquisition_ms, processing_ms, plotting_ms, lag_ms (float32)
    54     4     fps (float32)
    58     4     drops
    62     2     reserved (0)
    64     ...   payload: width*height pixels, u16 LE (gray16) or u8 (gray8)

gray8 packing is per-frame min-max: byte = round((v - offset) * 255 / range),
with an all-zero payload and range = 0 when the frame is constant, so the
client can always reconstruct absolute intensities from the header.

Every packet decodes on its own, no session history needed.  Control
messages are JSON objects with a "type" (set_view_angle, set_shear,
set_mode, set_exposure, set_channels, move_stage) and a request_id; each
gets exactly one ack or nack echoing that id.

Transports: a WebSocket endpoint (binary packets server->client, JSON
text client->server) plus a raw-TCP mode for headless clients carrying
the identical packet bytes behind a 5-byte [type u8 | length u32] frame
header (type 1 = frame packet, type 2 = JSON), with newline-delimited
JSON control messages client->server.
"""

from __future__ import annotations

import asyncio
import json
import os
import socketserver
import struct
import threading
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from . import geometry
from .errors import ParameterError, ProtocolError
from .pipeline import DisplayImage, LivePipeline

MAGIC = b"SKWF"
VERSION = 1
HEADER_FMT = "<4sHBBHIIiIIIHHfffffIH"
HEADER_SIZE = struct.calcsize(HEADER_FMT)
assert HEADER_SIZE == 64

PIXEL_FORMATS = {"gray16": 0, "gray8": 1}
MODES = {"global": 0, "rolling": 1}
_MAX_DIM = 2**31 - 1

DEFAULT_LISTEN = "127.0.0.1:8787"
LISTEN_ENV_VAR = "SKEWSTREAM_LISTEN"


def encode_frame_packet(image: DisplayImage, pixel_format: str = "gray16",
                        telemetry: dict | None = None) -> bytes:
    """Serialize one display frame to the wire layout above."""
    if pixel_format not in PIXEL_FORMATS:
        raise ParameterError(f"unknown pixel format {pixel_format!r}")
    h, w = image.pixels.shape
    if w > _MAX_DIM or h > _MAX_DIM:
        raise ParameterError(f"image {w}x{h} exceeds header field range")
    t = image.timings
    tele = telemetry or {}
    g8_offset = g8_range = 0
    if pixel_format == "gray8":
        lo = int(image.pixels.min())
        hi = int(image.pixels.max())
        g8_offset, g8_range = lo, hi - lo
        if g8_range == 0:
            payload = np.zeros(image.pixels.size, dtype=np.uint8).tobytes()
        else:
            scaled = (image.pixels.astype(np.float64) - lo) * (255.0 / g8_range)
            payload = np.rint(scaled).astype(np.uint8).tobytes()
    else:
        payload = image.pixels.astype("<u2").tobytes()
    header = struct.pack(
        HEADER_FMT,
        MAGIC,
        VERSION,
        PIXEL_FORMATS[pixel_format],
        MODES.get(image.mode, 0),
        image.channel_id,
        image.sweep_index,
        image.slice_index,
        int(round(image.view_angle_deg * 100)),
        w,
        h,
        int(round(image.out_pitch_um * 1000)),
        g8_offset,
        g8_range,
        t.acquisition_ms if t else 0.0,
        t.processing_ms if t else 0.0,
        t.plotting_ms if t else 0.0,
        t.lag_ms if t else 0.0,
        float(tele.get("fps", 0.0)),
        int(sum(tele.get("drops", {}).values())) if "drops" in tele else 0,
        0,
    )
    return header + payload


@dataclass(frozen=True)
class DecodedPacket:
    pixel_format: str
    mode: str
    channel_id: int
    sweep_index: int
    slice_index: int
    view_angle_deg: float
    width: int
    height: int
    out_pitch_um: float
    gray8_offset: int
    gray8_range: int
    acquisition_ms: float
    processing_ms: float
    plotting_ms: float
    lag_ms: float
    fps: float
    drops: int
    pixels: np.ndarray


def decode_frame_packet(data: bytes) -> DecodedPacket:
    if len(data) < HEADER_SIZE:
        raise ProtocolError(f"packet of {len(data)} bytes is shorter than the header")
    (magic, version, fmt, mode, channel, sweep, slc, angle_cd, w, h,
     pitch_nm, g8_off, g8_rng, acq, proc, plot, lag, fps, drops,
     _reserved) = struct.unpack(HEADER_FMT, data[:HEADER_SIZE])
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported packet version {version}")
    fmt_name = {v: k for k, v in PIXEL_FORMATS.items()}.get(fmt)
    if fmt_name is None:
        raise ProtocolError(f"unknown pixel format code {fmt}")
    bpp = 2 if fmt_name == "gray16" else 1
    expected = HEADER_SIZE + w * h * bpp
    if len(data) != expected:
        raise ProtocolError(
            f"packet is {len(data)} bytes, header implies {expected}"
        )
    raw = data[HEADER_SIZE:]
    dtype = "<u2" if fmt_name == "gray16" else np.uint8
    pixels = np.frombuffer(raw, dtype=dtype).reshape(h, w)
    if fmt_name == "gray16":
        pixels = pixels.astype(np.uint16)
    return DecodedPacket(
        pixel_format=fmt_name,
        mode={v: k for k, v in MODES.items()}[mode],
        channel_id=channel,
        sweep_index=sweep,
        slice_index=slc,
        view_angle_deg=angle_cd / 100.0,
        width=w,
        height=h,
        out_pitch_um=pitch_nm / 1000.0,
        gray8_offset=g8_off,
        gray8_range=g8_rng,
        acquisition_ms=acq,
        processing_ms=proc,
        plotting_ms=plot,
        lag_ms=lag,
        fps=fps,
        drops=drops,
        pixels=pixels,
    )


# ---------------------------------------------------------------------------
# control plane


@dataclass
class Session:
    """Per-client state: which channels it wants, and its counters."""

    pipeline: LivePipeline
    source: object
    channels: set[int] = field(default_factory=set)
    pixel_format: str = "gray16"

    def __post_init__(self):
        if not self.channels:
            self.channels = set(self.pipeline.channel_ids())

    def wants(self, image: DisplayImage) -> bool:
        return image.channel_id in self.channels


def _ack(request_id, applied: dict, notice: str | None = None) -> dict:
    out = {"type": "ack", "request_id": request_id, "applied": applied}
    if notice:
        out["notice"] = notice
    return out


def _nack(request_id, reason: str) -> dict:
    return {"type": "nack", "request_id": request_id, "reason": reason}


def handle_control(msg: dict, session: Session) -> dict:
    """Apply one control message; always returns exactly one ack/nack."""
    request_id = msg.get("request_id") if isinstance(msg, dict) else None
    if not isinstance(msg, dict) or "type" not in msg:
        return _nack(request_id, "message must be an object with a 'type'")
    pipe = session.pipeline
    kind = msg["type"]
    try:
        if kind == "set_view_angle":
            requested = float(msg["deg"])
            applied = pipe.post_params(view_angle_deg=requested)
            notice = None
            if abs(applied["view_angle_deg"] - requested) > 1e-9:
                notice = (
                    f"angle clamped to {applied['view_angle_deg']:.4f} deg"
                )
            return _ack(request_id, applied, notice)
        if kind == "set_shear":
            requested = float(msg["px"])
            applied = pipe.post_params(shear_px=requested)
            notice = None
            if abs(applied["shear_px"] - requested) > 1e-9:
                notice = f"shear clamped to {applied['shear_px']:.4f} px"
            return _ack(request_id, applied, notice)
        if kind == "set_mode":
            applied = pipe.post_params(mode=msg["mode"])
            return _ack(request_id, applied)
        if kind == "set_exposure":
            requested = float(msg["ms"])
            ms = max(0.0, requested)
            applied = pipe.post_params(exposure_ms=ms)
            notice = None if ms == requested else "exposure clamped to 0 ms"
            return _ack(request_id, applied, notice)
        if kind == "set_channels":
            ids = msg["ids"]
            if not isinstance(ids, list) or not ids:
                return _nack(request_id, "ids must be a non-empty list")
            known = set(pipe.channel_ids())
            bad = [i for i in ids if i not in known]
            if bad:
                return _nack(request_id, f"unknown channel ids {bad}")
            session.channels = set(int(i) for i in ids)
            return _ack(request_id, {"channels": sorted(session.channels)})
        if kind == "move_stage":
            mover = getattr(session.source, "move_stage", None)
            if mover is None:
                return _nack(
                    request_id, "source does not support stage moves"
                )
            dx = float(msg.get("dx_um", 0.0))
            dy = float(msg.get("dy_um", 0.0))
            mover(dx_um=dx, dy_um=dy)
            return _ack(request_id, {"dx_um": dx, "dy_um": dy})
        return _nack(request_id, f"unknown control type {kind!r}")
    except (KeyError, TypeError, ValueError) as exc:
        return _nack(request_id, f"malformed {kind}: {exc}")
    except ParameterError as exc:
        return _nack(request_id, str(exc))


def hello_message(pipeline: LivePipeline) -> dict:
    """Connection greeting: geometry and control ranges the UI needs."""
    g = pipeline.config.geom
    max_shear = geometry.max_shear_px(g)
    return {
        "type": "hello",
        "version": VERSION,
        "geometry": {
            "alpha_deg": g.alpha_deg,
            "scan_step_um": g.scan_step_um,
            "pixel_pitch_um": g.pixel_pitch_um,
            "slice_count": g.slice_count,
            "frame_width_px": g.frame_width_px,
            "frame_height_px": g.frame_height_px,
        },
        "mode": pipeline.mode,
        "view_angle_deg": pipeline.vt.view_angle_deg,
        "shear_px": pipeline.vt.shear_px,
        "max_shear_px": max_shear,
        "max_view_angle_deg": geometry.view_angle_from_shear(max_shear, g),
        "channels": pipeline.channel_ids(),
    }


# ---------------------------------------------------------------------------
# listen address


def parse_listen(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not host:
        raise ParameterError(
            f"listen address must be host:port, got {value!r}"
        )
    try:
        port_num = int(port)
    except ValueError as exc:
        raise ParameterError(f"bad port in listen address {value!r}") from exc
    if not 0 <= port_num <= 65535:
        raise ParameterError(f"port {port_num} out of range")
    return host, port_num


def resolve_listen(flag_value: str | None = None) -> tuple[str, int]:
    """--listen flag wins, then SKEWSTREAM_LISTEN, then the default."""
    value = flag_value or os.environ.get(LISTEN_ENV_VAR) or DEFAULT_LISTEN
    return parse_listen(value)


# ---------------------------------------------------------------------------
# WebSocket app


def create_app(pipeline: LivePipeline, source, ui_dir=None,
               pixel_format: str = "gray16"):
    """FastAPI app: /ws streams packets and takes control; optional
    static UI mount at /."""
    app = FastAPI(title="skewstream")

    @app.get("/health")
    def health():
        return {"ok": True, **pipeline.telemetry.snapshot()}

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        session = Session(pipeline=pipeline, source=source,
                          pixel_format=pixel_format)
        await ws.send_text(json.dumps(hello_message(pipeline)))
        sub = pipeline.subscribe(capacity=2 * max(1, len(session.channels)))
        send_lock = asyncio.Lock()
        loop = asyncio.get_running_loop()

        async def pump_frames():
            while True:
                image = await loop.run_in_executor(None, sub.get, 0.25)
                if image is None:
                    if sub.closed:
                        return
                    continue
                if not session.wants(image):
                    continue
                packet = encode_frame_packet(
                    image, session.pixel_format,
                    telemetry=pipeline.telemetry.snapshot(),
                )
                async with send_lock:
                    await ws.send_bytes(packet)

        pump = asyncio.ensure_future(pump_frames())
        try:
            while True:
                text = await ws.receive_text()
                try:
                    msg = json.loads(text)
                except json.JSONDecodeError:
                    reply = _nack(None, "control message is not valid JSON")
                else:
                    reply = handle_control(msg, session)
                async with send_lock:
                    await ws.send_text(json.dumps(reply))
        except WebSocketDisconnect:
            pass
        finally:
            pump.cancel()
            pipeline.unsubscribe(sub)

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True),
                  name="ui")
    return app


def serve_websocket(pipeline: LivePipeline, source, host: str, port: int,
                    ui_dir=None, pixel_format: str = "gray16"):
    """Blocking uvicorn run of the app (used by the CLI live mode)."""
    import uvicorn

    app = create_app(pipeline, source, ui_dir=ui_dir,
                     pixel_format=pixel_format)
    uvicorn.run(app, host=host, port=port, log_level="warning")


# ---------------------------------------------------------------------------
# raw TCP mode

FRAME_TYPE_PACKET = 1
FRAME_TYPE_JSON = 2


def _tcp_send(wfile, lock, kind: int, payload: bytes) -> None:
    with lock:
        wfile.write(struct.pack("<BI", kind, len(payload)) + payload)
        wfile.flush()


class _TcpHandler(socketserver.StreamRequestHandler):
    def handle(self):
        server: TcpFrameServer = self.server  # type: ignore[assignment]
        session = Session(pipeline=server.pipeline, source=server.source,
                          pixel_format=server.pixel_format)
        lock = threading.Lock()
        _tcp_send(self.wfile, lock, FRAME_TYPE_JSON,
                  json.dumps(hello_message(server.pipeline)).encode())
        sub = server.pipeline.subscribe(capacity=2 * max(1, len(session.channels)))
        stop = threading.Event()

        def pump():
            while not stop.is_set():
                image = sub.get(timeout=0.25)
                if image is None:
                    if sub.closed:
                        return
                    continue
                if not session.wants(image):
                    continue
                packet = encode_frame_packet(
                    image, session.pixel_format,
                    telemetry=server.pipeline.telemetry.snapshot(),
                )
                try:
                    _tcp_send(self.wfile, lock, FRAME_TYPE_PACKET, packet)
                except OSError:
                    return

        pump_thread = threading.Thread(target=pump, daemon=True)
        pump_thread.start()
        try:
            for line in self.rfile:
                line = line.strip()
                if not line:
                    continue
                try:
                    msg = json.loads(line)
                except json.JSONDecodeError:
                    reply = _nack(None, "control message is not valid JSON")
                else:
                    reply = handle_control(msg, session)
                _tcp_send(self.wfile, lock, FRAME_TYPE_JSON,
                          json.dumps(reply).encode())
        except OSError:
            pass
        finally:
            stop.set()
            server.pipeline.unsubscribe(sub)
            pump_thread.join(timeout=1.0)


class TcpFrameServer(socketserver.ThreadingTCPServer):
    """Raw-TCP transport with the same packet bytes as the WebSocket."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, pipeline: LivePipeline, source, host: str, port: int,
                 pixel_format: str = "gray16"):
        self.pipeline = pipeline
        self.source = source
        self.pixel_format = pixel_format
        super().__init__((host, port), _TcpHandler)

    def serve_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t
