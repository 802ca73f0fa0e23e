// DOM wiring: connect, paint the latest frame per channel, and forward
// control widgets to the server.

import type { FramePacket } from "./protocol.js";
import { autoWindow, compositeRGBA, pickScaleBarUm, scaleBarPx, shade, type WindowRange } from "./render.js";
import { ViewerState } from "./state.js";
import { LiveLink } from "./transport.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

const canvas = el<HTMLCanvasElement>("view");
const ctx = canvas.getContext("2d")!;
const banner = el<HTMLDivElement>("banner");
const angleSlider = el<HTMLInputElement>("angle");
const angleReadout = el<HTMLSpanElement>("angle-readout");
const shearSlider = el<HTMLInputElement>("shear");
const shearReadout = el<HTMLSpanElement>("shear-readout");
const modeToggle = el<HTMLInputElement>("mode");
const lockToggle = el<HTMLInputElement>("lock-window");
const channelsBox = el<HTMLDivElement>("channels");
const telemetryBox = el<HTMLPreElement>("telemetry");
const reconnectBtn = el<HTMLButtonElement>("reconnect");

const wsUrl = (() => {
  const proto = location.protocol === "https:" ? "wss" : "ws";
  return `${proto}://${location.host}/ws`;
})();

const state = new ViewerState();
const link = new LiveLink(wsUrl, state, {
  onStale: () => showBanner("server not answering; reconnect?"),
  onNack: (nack) => showBanner(`rejected: ${nack.reason}`),
});

function showBanner(text: string): void {
  banner.textContent = text;
  banner.style.display = "block";
}

function hideBanner(): void {
  banner.style.display = "none";
}

reconnectBtn.onclick = () => {
  hideBanner();
  link.reconnect();
};

// -- controls ---------------------------------------------------------------

angleSlider.oninput = () => {
  const deg = Number(angleSlider.value);
  angleReadout.textContent = `${deg.toFixed(1)} deg`;
  link.control({ type: "set_view_angle", deg });
};

shearSlider.oninput = () => {
  const px = Number(shearSlider.value);
  shearReadout.textContent = `${px.toFixed(2)} px`;
  link.control({ type: "set_shear", px });
};

modeToggle.onchange = () => {
  link.control({ type: "set_mode", mode: modeToggle.checked ? "rolling" : "global" });
};

window.addEventListener("keydown", (ev) => {
  const step = 1.0; // micrometres per tap
  const moves: Record<string, { dx_um?: number; dy_um?: number }> = {
    ArrowLeft: { dx_um: -step },
    ArrowRight: { dx_um: step },
    ArrowUp: { dy_um: step },
    ArrowDown: { dy_um: -step },
  };
  const move = moves[ev.key];
  if (move) {
    ev.preventDefault();
    link.control({ type: "move_stage", ...move });
  }
});

function rebuildChannelToggles(): void {
  channelsBox.textContent = "";
  for (const [id, ch] of state.channels) {
    const label = document.createElement("label");
    const box = document.createElement("input");
    box.type = "checkbox";
    box.checked = ch.visible;
    box.onchange = () => {
      state.toggleChannel(id);
    };
    label.append(box, ` ch ${id}`);
    channelsBox.append(label);
  }
}

// -- render loop --------------------------------------------------------------

const latestByChannel = new Map<number, FramePacket>();
const lockedWindows = new Map<number, WindowRange>();
let helloSeen = false;

lockToggle.onchange = () => {
  // windows refreeze from the next frame when the lock is re-enabled
  lockedWindows.clear();
};

function paint(): void {
  const fresh = link.takeFrame();
  if (fresh) latestByChannel.set(fresh.channelId, fresh);

  if (!helloSeen && state.hello) {
    helloSeen = true;
    angleSlider.min = "0";
    angleSlider.max = String(state.hello.max_view_angle_deg);
    angleSlider.step = "0.1";
    angleSlider.value = String(state.hello.view_angle_deg);
    shearSlider.min = "0";
    shearSlider.max = String(state.hello.max_shear_px);
    shearSlider.step = "0.01";
    shearSlider.value = String(state.hello.shear_px);
    modeToggle.checked = state.hello.mode === "rolling";
    rebuildChannelToggles();
    hideBanner();
  }

  const ref = state.lastHeader;
  if (ref) {
    const { width, height } = ref;
    if (canvas.width !== width || canvas.height !== height) {
      canvas.width = width;
      canvas.height = height;
    }
    const layers = [];
    for (const [id, packet] of latestByChannel) {
      if (packet.width !== width || packet.height !== height) continue; // resized mid-stream
      const display = state.channels.get(id) ?? { visible: true, tint: [1, 1, 1] as [number, number, number] };
      let win: WindowRange | undefined;
      if (lockToggle.checked && packet.pixelFormat === "gray16") {
        win = lockedWindows.get(id);
        if (!win) {
          win = autoWindow(packet.pixels);
          lockedWindows.set(id, win);
        }
      }
      layers.push({ lum: shade(packet, win), tint: display.tint, visible: display.visible });
    }
    if (layers.length > 0) {
      const rgba = compositeRGBA(layers, width, height);
      ctx.putImageData(new ImageData(rgba, width, height), 0, 0);
      drawScaleBar(ref.outPitchNm, width, height);
    }
  }

  updateTelemetry();
  requestAnimationFrame(paint);
}

function drawScaleBar(pitchNm: number, width: number, height: number): void {
  const barUm = pickScaleBarUm(width, pitchNm);
  const px = scaleBarPx(barUm, pitchNm);
  if (px < 2) return;
  const y = height - 12;
  ctx.fillStyle = "white";
  ctx.fillRect(10, y, px, 3);
  ctx.font = "11px sans-serif";
  ctx.fillText(`${barUm} um`, 10, y - 4);
}

function updateTelemetry(): void {
  const t = state.telemetry();
  const last = t[t.length - 1];
  const pendingNote = state.converged() ? "" : "  (applying...)";
  const angle = state.applied.viewAngleDeg;
  const lines = [
    `link: ${state.connection}${pendingNote}`,
    `view: ${angle === undefined ? "-" : angle.toFixed(2)} deg  mode: ${state.applied.mode ?? "-"}`,
    last
      ? `fps ${last.fps.toFixed(1)} (mean ${state.meanFps().toFixed(1)})  lag ${last.lagMs.toFixed(1)} ms`
      : "no frames yet",
    last
      ? `acq ${last.acquisitionMs.toFixed(1)}  proc ${last.processingMs.toFixed(2)}  plot ${last.plottingMs.toFixed(2)} ms`
      : "",
    `drops: server ${last?.drops ?? 0}  client ${state.droppedFrames}  bad ${state.badPackets}`,
    state.notice ? `notice: ${state.notice}` : "",
  ];
  telemetryBox.textContent = lines.filter((l) => l !== "").join("\n");
}

link.connect();
requestAnimationFrame(paint);
