// Pixel shading: window a gray16 frame (or take gray8 as-is), tint per
// channel, composite additively, and size the scale bar from the pixel
// pitch the header reports.

import type { FramePacket } from "./protocol.js";

export interface WindowRange {
  lo: number;
  hi: number;
}

/** Per-frame min/max, the default windowing when the lock is off. */
export function autoWindow(pixels: Uint16Array | Uint8Array): WindowRange {
  if (pixels.length === 0) return { lo: 0, hi: 0 };
  let lo = pixels[0]!;
  let hi = pixels[0]!;
  for (let i = 1; i < pixels.length; i++) {
    const p = pixels[i]!;
    if (p < lo) lo = p;
    if (p > hi) hi = p;
  }
  return { lo, hi };
}

/**
 * Reduce a packet to 0..255 luminance. gray8 payloads were already
 * scaled by the server (scale recorded in the header), so they pass
 * through; gray16 gets the client-side window applied. A degenerate
 * window (hi <= lo) renders flat black, matching the server's rule
 * of a zero payload for constant frames.
 */
export function shade(packet: FramePacket, win?: WindowRange): Uint8Array {
  if (packet.pixelFormat === "gray8") {
    return packet.pixels as Uint8Array;
  }
  const w = win ?? autoWindow(packet.pixels);
  const out = new Uint8Array(packet.pixels.length);
  const span = w.hi - w.lo;
  if (span <= 0) return out;
  const k = 255 / span;
  for (let i = 0; i < out.length; i++) {
    const v = (packet.pixels[i]! - w.lo) * k;
    out[i] = v <= 0 ? 0 : v >= 255 ? 255 : Math.round(v);
  }
  return out;
}

export interface Layer {
  lum: Uint8Array;
  tint: [number, number, number];
  visible: boolean;
}

/** Additive multi-channel composite into RGBA, clamped per component. */
export function compositeRGBA(
  layers: Layer[], width: number, height: number,
): Uint8ClampedArray<ArrayBuffer> {
  const n = width * height;
  const out = new Uint8ClampedArray(n * 4);
  for (let i = 0; i < n; i++) out[i * 4 + 3] = 255;
  for (const layer of layers) {
    if (!layer.visible) continue;
    if (layer.lum.length !== n) {
      throw new Error(`layer has ${layer.lum.length} px, canvas needs ${n}`);
    }
    const [r, g, b] = layer.tint;
    for (let i = 0; i < n; i++) {
      const v = layer.lum[i]!;
      // Uint8ClampedArray saturates the sums for us
      out[i * 4] = out[i * 4]! + v * r;
      out[i * 4 + 1] = out[i * 4 + 1]! + v * g;
      out[i * 4 + 2] = out[i * 4 + 2]! + v * b;
    }
  }
  return out;
}

/** Scale bar length in image pixels, e.g. 25 um at 115 nm pitch -> 217. */
export function scaleBarPx(barUm: number, pitchNm: number): number {
  if (pitchNm <= 0) return 0;
  return Math.round((barUm * 1000) / pitchNm);
}

/** Pick a round scale bar (1-2-5 series) no wider than a fraction of the image. */
export function pickScaleBarUm(widthPx: number, pitchNm: number, maxFraction = 0.33): number {
  const widthUm = (widthPx * pitchNm) / 1000;
  const target = widthUm * maxFraction;
  const series = [1, 2, 5];
  let best = 1;
  for (let exp = -2; exp <= 4; exp++) {
    for (const s of series) {
      const candidate = s * 10 ** exp;
      if (candidate <= target) best = candidate;
    }
  }
  return best;
}
