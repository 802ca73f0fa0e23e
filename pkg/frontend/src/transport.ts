// Socket plumbing. Frames land in a one-slot mailbox (the render tick
// takes the latest and the rest are counted as dropped, mirroring the
// server's freshness-over-completeness policy); continuous controls are
// debounced so slider drags do not flood the control channel; every
// control message is tracked until its ack, and a silent server flips
// the link to stale so the UI can offer a reconnect.

import {
  decodeFramePacket,
  parseServerText,
  type Ack,
  type ControlMessage,
  type FramePacket,
  type Nack,
} from "./protocol.js";
import type { ViewerState } from "./state.js";

export interface SocketLike {
  binaryType: string;
  send(data: string): void;
  close(): void;
  onopen: ((ev?: unknown) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
}

export interface LinkOptions {
  debounceMs?: number;
  ackTimeoutMs?: number;
  makeSocket?: (url: string) => SocketLike;
  onStale?: () => void;
  onNack?: (nack: Nack) => void;
}

// a slider drag is one logical intent; only the newest value matters
const DEBOUNCED_TYPES = new Set(["set_view_angle", "set_shear", "set_exposure"]);

export class LiveLink {
  readonly state: ViewerState;

  private url: string;
  private opts: Required<Pick<LinkOptions, "debounceMs" | "ackTimeoutMs">>;
  private makeSocket: (url: string) => SocketLike;
  private onStale: () => void;
  private onNack: (nack: Nack) => void;

  private sock: SocketLike | null = null;
  private mailbox: FramePacket | null = null;
  private seq = 0;
  private pending = new Map<string, number>(); // request_id -> sent at (ms)
  private debounceTimers = new Map<string, ReturnType<typeof setTimeout>>();
  private queued = new Map<string, ControlMessage>();
  private watchdog: ReturnType<typeof setInterval> | null = null;

  constructor(url: string, state: ViewerState, opts: LinkOptions = {}) {
    this.url = url;
    this.state = state;
    this.opts = {
      debounceMs: opts.debounceMs ?? 50,
      ackTimeoutMs: opts.ackTimeoutMs ?? 3000,
    };
    this.makeSocket = opts.makeSocket ?? ((u) => new WebSocket(u) as unknown as SocketLike);
    this.onStale = opts.onStale ?? (() => {});
    this.onNack = opts.onNack ?? (() => {});
  }

  connect(): void {
    this.state.connection = "connecting";
    const sock = this.makeSocket(this.url);
    sock.binaryType = "arraybuffer";
    sock.onopen = () => {
      // hello confirms the link; "connecting" until then
    };
    sock.onclose = () => {
      this.state.connection = "closed";
      this.stopWatchdog();
    };
    sock.onerror = () => sock.close();
    sock.onmessage = (ev) => this.handleMessage(ev.data);
    this.sock = sock;
    this.startWatchdog();
  }

  close(): void {
    this.stopWatchdog();
    for (const t of this.debounceTimers.values()) clearTimeout(t);
    this.debounceTimers.clear();
    this.queued.clear();
    this.sock?.close();
  }

  reconnect(): void {
    this.close();
    this.pending.clear();
    this.connect();
  }

  /** Latest frame, or null; clears the slot. */
  takeFrame(): FramePacket | null {
    const f = this.mailbox;
    this.mailbox = null;
    return f;
  }

  /** Queue a control message; continuous types are debounced. */
  control(msg: ControlMessage): void {
    if (!DEBOUNCED_TYPES.has(msg.type)) {
      this.sendNow(msg);
      return;
    }
    this.queued.set(msg.type, msg);
    if (!this.debounceTimers.has(msg.type)) {
      this.debounceTimers.set(
        msg.type,
        setTimeout(() => {
          this.debounceTimers.delete(msg.type);
          const latest = this.queued.get(msg.type);
          this.queued.delete(msg.type);
          if (latest) this.sendNow(latest);
        }, this.opts.debounceMs),
      );
    }
  }

  pendingCount(): number {
    return this.pending.size;
  }

  private sendNow(msg: ControlMessage): void {
    if (!this.sock) return;
    const request_id = `ui-${++this.seq}`;
    this.pending.set(request_id, Date.now());
    this.trackRequest(msg);
    this.sock.send(JSON.stringify({ ...msg, request_id }));
  }

  private trackRequest(msg: ControlMessage): void {
    switch (msg.type) {
      case "set_view_angle":
        this.state.request({ viewAngleDeg: msg.deg });
        break;
      case "set_shear":
        this.state.request({ shearPx: msg.px });
        break;
      case "set_mode":
        this.state.request({ mode: msg.mode });
        break;
      case "set_exposure":
        this.state.request({ exposureMs: msg.ms });
        break;
      case "set_channels":
        this.state.request({ channels: msg.channels });
        break;
      case "move_stage":
        break; // stage position is not echoed in frame headers
    }
  }

  private handleMessage(data: unknown): void {
    if (typeof data === "string") {
      this.handleText(data);
      return;
    }
    if (data instanceof ArrayBuffer) {
      try {
        const packet = decodeFramePacket(data);
        if (this.mailbox !== null) this.state.droppedFrames++;
        this.mailbox = packet;
        this.state.onFrame(packet);
      } catch {
        this.state.badPackets++;
      }
      return;
    }
    this.state.badPackets++;
  }

  private handleText(text: string): void {
    let msg;
    try {
      msg = parseServerText(text);
    } catch {
      this.state.badPackets++;
      return;
    }
    if (msg.type === "hello") {
      this.state.onHello(msg);
    } else if (msg.type === "ack") {
      this.resolve(msg.request_id);
      this.state.onAck(msg as Ack);
    } else {
      if (msg.request_id) this.resolve(msg.request_id);
      this.onNack(msg as Nack);
    }
  }

  private resolve(requestId: string): void {
    this.pending.delete(requestId);
    if (this.state.connection === "stale" && this.pending.size === 0) {
      this.state.connection = "open";
    }
  }

  private startWatchdog(): void {
    this.stopWatchdog();
    this.watchdog = setInterval(() => {
      const now = Date.now();
      for (const sentAt of this.pending.values()) {
        if (now - sentAt > this.opts.ackTimeoutMs) {
          if (this.state.connection === "open") {
            this.state.connection = "stale";
            this.onStale();
          }
          return;
        }
      }
    }, Math.max(250, this.opts.ackTimeoutMs / 4));
  }

  private stopWatchdog(): void {
    if (this.watchdog !== null) {
      clearInterval(this.watchdog);
      this.watchdog = null;
    }
  }
}
