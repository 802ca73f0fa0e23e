// Binary frame packets and JSON control messages for the live server.
// Layout mirrors the server's struct "<4sHBBHIIiIIIHHfffffIH": 64-byte
// little-endian header, then the pixel payload row-major.

export const HEADER_BYTES = 64;
export const MAGIC = "SKWF";
export const VERSION = 1;

const PIXEL_FORMATS = ["gray16", "gray8"] as const;
const MODES = ["global", "rolling"] as const;

export type PixelFormat = (typeof PIXEL_FORMATS)[number];
export type UpdateMode = (typeof MODES)[number];

export interface FramePacket {
  pixelFormat: PixelFormat;
  mode: UpdateMode;
  channelId: number;
  sweep: number;
  slice: number;
  viewAngleDeg: number; // header carries centidegrees
  width: number;
  height: number;
  outPitchNm: number;
  gray8Offset: number;
  gray8Range: number; // 0 means the frame was constant
  acquisitionMs: number;
  processingMs: number;
  plottingMs: number;
  lagMs: number;
  fps: number;
  drops: number;
  pixels: Uint16Array | Uint8Array;
}

export class PacketError extends Error {}

const littleEndianHost =
  new Uint8Array(new Uint16Array([1]).buffer)[0] === 1;

export function decodeFramePacket(buf: ArrayBuffer): FramePacket {
  if (buf.byteLength < HEADER_BYTES) {
    throw new PacketError(`packet is ${buf.byteLength} bytes, header needs ${HEADER_BYTES}`);
  }
  const v = new DataView(buf);
  const magic = String.fromCharCode(
    v.getUint8(0), v.getUint8(1), v.getUint8(2), v.getUint8(3),
  );
  if (magic !== MAGIC) throw new PacketError(`bad magic ${JSON.stringify(magic)}`);
  const version = v.getUint16(4, true);
  if (version !== VERSION) throw new PacketError(`unsupported version ${version}`);
  const fmtCode = v.getUint8(6);
  const modeCode = v.getUint8(7);
  const pixelFormat = PIXEL_FORMATS[fmtCode];
  const mode = MODES[modeCode];
  if (pixelFormat === undefined) throw new PacketError(`unknown pixel format ${fmtCode}`);
  if (mode === undefined) throw new PacketError(`unknown mode ${modeCode}`);

  const width = v.getUint32(22, true);
  const height = v.getUint32(26, true);
  const bpp = pixelFormat === "gray16" ? 2 : 1;
  const want = HEADER_BYTES + width * height * bpp;
  if (buf.byteLength !== want) {
    throw new PacketError(`packet is ${buf.byteLength} bytes, header implies ${want}`);
  }

  let pixels: Uint16Array | Uint8Array;
  if (pixelFormat === "gray8") {
    pixels = new Uint8Array(buf, HEADER_BYTES);
  } else if (littleEndianHost) {
    // header offset is even, so the view is aligned
    pixels = new Uint16Array(buf, HEADER_BYTES, width * height);
  } else {
    const out = new Uint16Array(width * height);
    for (let i = 0; i < out.length; i++) {
      out[i] = v.getUint16(HEADER_BYTES + 2 * i, true);
    }
    pixels = out;
  }

  return {
    pixelFormat,
    mode,
    channelId: v.getUint16(8, true),
    sweep: v.getUint32(10, true),
    slice: v.getUint32(14, true),
    viewAngleDeg: v.getInt32(18, true) / 100,
    width,
    height,
    outPitchNm: v.getUint32(30, true),
    gray8Offset: v.getUint16(34, true),
    gray8Range: v.getUint16(36, true),
    acquisitionMs: v.getFloat32(38, true),
    processingMs: v.getFloat32(42, true),
    plottingMs: v.getFloat32(46, true),
    lagMs: v.getFloat32(50, true),
    fps: v.getFloat32(54, true),
    drops: v.getUint32(58, true),
    pixels,
  };
}

// ---------------------------------------------------------------------------
// control plane (client -> server JSON, one ack or nack per message)

export type ControlMessage =
  | { type: "set_view_angle"; deg: number }
  | { type: "set_shear"; px: number }
  | { type: "set_mode"; mode: UpdateMode }
  | { type: "set_exposure"; ms: number }
  | { type: "set_channels"; channels: number[] }
  | { type: "move_stage"; dx_um?: number; dy_um?: number; dz_um?: number };

export interface Ack {
  type: "ack";
  request_id: string;
  applied: Record<string, unknown>;
  notice?: string;
}

export interface Nack {
  type: "nack";
  request_id?: string;
  reason: string;
}

export interface Hello {
  type: "hello";
  geometry: {
    alpha_deg: number;
    scan_step_um: number;
    pixel_pitch_um: number;
    slice_count: number;
    frame_width_px: number;
    frame_height_px: number;
  };
  mode: UpdateMode;
  view_angle_deg: number;
  shear_px: number;
  max_shear_px: number;
  max_view_angle_deg: number;
  channels: number[];
}

export type ServerText = Ack | Nack | Hello;

export function parseServerText(text: string): ServerText {
  const msg = JSON.parse(text);
  if (msg.type === "ack" || msg.type === "nack" || msg.type === "hello") {
    return msg as ServerText;
  }
  throw new PacketError(`unexpected server message type ${JSON.stringify(msg.type)}`);
}
