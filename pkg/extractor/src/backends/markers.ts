import {
  Landmark,
  NUM_LANDMARKS,
  PoseBackend,
  VideoFrame,
  LEFT_HIP,
  LEFT_SHOULDER,
  LEFT_ELBOW,
  LEFT_WRIST,
  RIGHT_HIP,
  RIGHT_SHOULDER,
  RIGHT_ELBOW,
  RIGHT_WRIST,
} from "../types.js";

/**
 * Luma-band marker tracker for instrumented recordings: each tracked joint
 * is a bright blob in a distinct intensity band. A toy detector, but a real
 * pixels-to-landmarks path, which keeps the adapter testable offline; swap
 * in the mediapipe backend for real footage.
 */

interface Band {
  lo: number;
  hi: number;
  landmark: number;
}

const LEFT_BANDS: Band[] = [
  { lo: 55, hi: 95, landmark: LEFT_HIP },
  { lo: 110, hi: 150, landmark: LEFT_WRIST },
  { lo: 165, hi: 205, landmark: LEFT_ELBOW },
  { lo: 218, hi: 255, landmark: LEFT_SHOULDER },
];

const RIGHT_BANDS: Band[] = LEFT_BANDS.map((band, i) => ({
  ...band,
  landmark: [RIGHT_HIP, RIGHT_WRIST, RIGHT_ELBOW, RIGHT_SHOULDER][i],
}));

export class MarkerBackend implements PoseBackend {
  name = "markers";
  private bands: Band[];
  private minPixels: number;

  constructor(side: "left" | "right" = "left", minPixels = 12) {
    this.bands = side === "left" ? LEFT_BANDS : RIGHT_BANDS;
    this.minPixels = minPixels;
  }

  detect(frame: VideoFrame): Landmark[] {
    const landmarks: Landmark[] = Array.from({ length: NUM_LANDMARKS }, () => ({
      x: 0,
      y: 0,
      visibility: 0,
    }));
    const { width, height, luma } = frame;
    const sums = this.bands.map(() => ({ x: 0, y: 0, n: 0 }));
    for (let y = 0; y < height; y++) {
      const rowOffset = y * width;
      for (let x = 0; x < width; x++) {
        const value = luma[rowOffset + x];
        for (let b = 0; b < this.bands.length; b++) {
          const band = this.bands[b];
          if (value >= band.lo && value <= band.hi) {
            sums[b].x += x;
            sums[b].y += y;
            sums[b].n += 1;
            break;
          }
        }
      }
    }
    for (let b = 0; b < this.bands.length; b++) {
      const { x, y, n } = sums[b];
      if (n >= this.minPixels) {
        landmarks[this.bands[b].landmark] = {
          x: x / n,
          y: y / n,
          visibility: 1.0,
        };
      }
    }
    return landmarks;
  }
}
