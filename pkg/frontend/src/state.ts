// Viewer-side state: what we asked the server for vs what it confirmed,
// plus a bounded telemetry ring for the readout.

import type { Ack, FramePacket, Hello, UpdateMode } from "./protocol.js";

export type Connection = "connecting" | "open" | "stale" | "closed";

export interface ViewParams {
  viewAngleDeg?: number;
  shearPx?: number;
  mode?: UpdateMode;
  exposureMs?: number;
  channels?: number[];
}

export interface TelemetrySample {
  fps: number;
  lagMs: number;
  acquisitionMs: number;
  processingMs: number;
  plottingMs: number;
  drops: number;
}

export interface ChannelDisplay {
  visible: boolean;
  tint: [number, number, number]; // 0..1 per component
}

// order matches the server's channel list; single-channel runs get white
const DEFAULT_TINTS: [number, number, number][] = [
  [1, 1, 1],
  [0, 1, 0.2],
  [1, 0.3, 1],
  [0.2, 0.6, 1],
];

const ACK_FIELD_MAP: Record<string, keyof ViewParams> = {
  view_angle_deg: "viewAngleDeg",
  shear_px: "shearPx",
  mode: "mode",
  exposure_ms: "exposureMs",
  channels: "channels",
};

export class ViewerState {
  connection: Connection = "connecting";
  requested: ViewParams = {};
  applied: ViewParams = {};
  hello: Hello | null = null;
  lastHeader: Omit<FramePacket, "pixels"> | null = null;
  channels = new Map<number, ChannelDisplay>();
  badPackets = 0;
  droppedFrames = 0;
  notice = "";

  private ring: TelemetrySample[] = [];
  private ringCap: number;

  constructor(telemetryCap = 120) {
    this.ringCap = Math.max(1, telemetryCap);
  }

  onHello(msg: Hello): void {
    this.hello = msg;
    this.connection = "open";
    this.applied = {
      viewAngleDeg: msg.view_angle_deg,
      shearPx: msg.shear_px,
      mode: msg.mode,
      channels: msg.channels.slice(),
    };
    msg.channels.forEach((id, i) => {
      if (!this.channels.has(id)) {
        this.channels.set(id, {
          visible: true,
          tint: DEFAULT_TINTS[i % DEFAULT_TINTS.length]!,
        });
      }
    });
  }

  request(params: ViewParams): void {
    Object.assign(this.requested, params);
  }

  onAck(ack: Ack): void {
    for (const [wire, val] of Object.entries(ack.applied)) {
      const key = ACK_FIELD_MAP[wire];
      if (key === undefined) continue;
      (this.applied as Record<string, unknown>)[key] = val;
      delete this.requested[key];
    }
    this.notice = ack.notice ?? "";
  }

  /** True when nothing we asked for is still waiting on the server. */
  converged(): boolean {
    return Object.keys(this.requested).length === 0;
  }

  onFrame(packet: FramePacket): void {
    const { pixels: _pixels, ...header } = packet;
    this.lastHeader = header;
    this.pushTelemetry({
      fps: packet.fps,
      lagMs: packet.lagMs,
      acquisitionMs: packet.acquisitionMs,
      processingMs: packet.processingMs,
      plottingMs: packet.plottingMs,
      drops: packet.drops,
    });
  }

  pushTelemetry(sample: TelemetrySample): void {
    this.ring.push(sample);
    if (this.ring.length > this.ringCap) {
      this.ring.splice(0, this.ring.length - this.ringCap);
    }
  }

  telemetry(): readonly TelemetrySample[] {
    return this.ring;
  }

  meanFps(): number {
    if (this.ring.length === 0) return 0;
    let s = 0;
    for (const t of this.ring) s += t.fps;
    return s / this.ring.length;
  }

  toggleChannel(id: number): void {
    const ch = this.channels.get(id);
    if (ch) ch.visible = !ch.visible;
  }
}
