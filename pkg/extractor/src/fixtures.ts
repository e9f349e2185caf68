import { LEFT_ELBOW, LEFT_HIP, LEFT_SHOULDER, LEFT_WRIST } from "./types.js";

/**
 * Synthetic marker videos for tests: a planar hip-shoulder-elbow-wrist
 * chain rendered as bright blobs in the marker backend's luma bands, with
 * the elbow angle following a sinusoid.
 */

export interface FixtureSpec {
  width: number;
  height: number;
  fps: number;
  durationS: number;
  cadenceHz: number;
  amplitudeDeg: number;
  baselineDeg: number;
}

export const DEFAULT_FIXTURE: FixtureSpec = {
  width: 160,
  height: 120,
  fps: 30,
  durationS: 12,
  cadenceHz: 0.4,
  amplitudeDeg: 35,
  baselineDeg: 90,
};

export const MARKER_LUMA: Record<number, number> = {
  [LEFT_HIP]: 75,
  [LEFT_WRIST]: 130,
  [LEFT_ELBOW]: 185,
  [LEFT_SHOULDER]: 235,
};

export function elbowAngleAt(spec: FixtureSpec, t: number): number {
  return spec.baselineDeg + spec.amplitudeDeg * Math.sin(2 * Math.PI * spec.cadenceHz * t);
}

export function skeletonAt(spec: FixtureSpec, t: number): Record<number, [number, number]> {
  const hip: [number, number] = [spec.width * 0.5, spec.height * 0.8];
  const shoulder: [number, number] = [hip[0], hip[1] - 40];
  const torso = [0, 1]; // unit vector shoulder -> hip
  const shoulderAngle = (80 * Math.PI) / 180;
  const upper: [number, number] = [
    34 * (Math.cos(shoulderAngle) * torso[0] - Math.sin(shoulderAngle) * torso[1]),
    34 * (Math.sin(shoulderAngle) * torso[0] + Math.cos(shoulderAngle) * torso[1]),
  ];
  const elbow: [number, number] = [shoulder[0] + upper[0], shoulder[1] + upper[1]];
  const toShoulder = [-upper[0] / 34, -upper[1] / 34];
  const theta = (elbowAngleAt(spec, t) * Math.PI) / 180;
  const wrist: [number, number] = [
    elbow[0] + 30 * (Math.cos(theta) * toShoulder[0] - Math.sin(theta) * toShoulder[1]),
    elbow[1] + 30 * (Math.sin(theta) * toShoulder[0] + Math.cos(theta) * toShoulder[1]),
  ];
  return {
    [LEFT_HIP]: hip,
    [LEFT_SHOULDER]: shoulder,
    [LEFT_ELBOW]: elbow,
    [LEFT_WRIST]: wrist,
  };
}

function paintDisc(luma: Uint8Array, width: number, height: number, cx: number, cy: number, radius: number, value: number) {
  const r2 = radius * radius;
  const x0 = Math.max(0, Math.floor(cx - radius));
  const x1 = Math.min(width - 1, Math.ceil(cx + radius));
  const y0 = Math.max(0, Math.floor(cy - radius));
  const y1 = Math.min(height - 1, Math.ceil(cy + radius));
  for (let y = y0; y <= y1; y++) {
    for (let x = x0; x <= x1; x++) {
      const dx = x - cx;
      const dy = y - cy;
      if (dx * dx + dy * dy <= r2) {
        luma[y * width + x] = value;
      }
    }
  }
}

export function renderFixtureY4m(spec: FixtureSpec = DEFAULT_FIXTURE): Uint8Array {
  const nFrames = Math.round(spec.durationS * spec.fps);
  const lumaSize = spec.width * spec.height;
  const chromaSize = (spec.width / 2) * (spec.height / 2);
  const header = `YUV4MPEG2 W${spec.width} H${spec.height} F${spec.fps}:1 Ip A1:1 C420jpeg\n`;
  const headerBytes = new TextEncoder().encode(header);
  const frameMarker = new TextEncoder().encode("FRAME\n");
  const total = headerBytes.length + nFrames * (frameMarker.length + lumaSize + 2 * chromaSize);
  const out = new Uint8Array(total);
  out.set(headerBytes, 0);
  let offset = headerBytes.length;
  for (let i = 0; i < nFrames; i++) {
    out.set(frameMarker, offset);
    offset += frameMarker.length;
    const luma = out.subarray(offset, offset + lumaSize);
    luma.fill(16);
    const skeleton = skeletonAt(spec, i / spec.fps);
    for (const [landmark, [x, y]] of Object.entries(skeleton)) {
      paintDisc(luma, spec.width, spec.height, x, y, 3.2, MARKER_LUMA[Number(landmark)]);
    }
    offset += lumaSize;
    out.subarray(offset, offset + 2 * chromaSize).fill(128);
    offset += 2 * chromaSize;
  }
  return out;
}
