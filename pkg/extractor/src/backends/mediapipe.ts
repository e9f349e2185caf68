import { Landmark, NUM_LANDMARKS, PoseBackend, VideoFrame } from "../types.js";

/**
 * Wrapper around the MediaPipe pose-landmarker. Loaded lazily because the
 * package and its model asset (pose_landmarker.task) are an optional,
 * network-fetched dependency; environments without them still get the
 * marker backend. Scores pass through untransformed - thresholding is the
 * consumer's policy.
 */
export class MediaPipeBackend implements PoseBackend {
  name = "mediapipe";
  private landmarker: any = null;
  private width = 0;
  private height = 0;

  static async create(modelAssetPath: string): Promise<MediaPipeBackend> {
    let vision: any;
    try {
      // non-literal specifier keeps the dependency optional at compile time
      const moduleName = "@mediapipe/tasks-vision";
      vision = await import(moduleName);
    } catch (err) {
      throw new Error(
        "mediapipe backend requires the optional '@mediapipe/tasks-vision' package " +
          `and a pose_landmarker model asset: ${(err as Error).message}`,
      );
    }
    const backend = new MediaPipeBackend();
    const fileset = await vision.FilesetResolver.forVisionTasks(
      "node_modules/@mediapipe/tasks-vision/wasm",
    );
    backend.landmarker = await vision.PoseLandmarker.createFromOptions(fileset, {
      baseOptions: { modelAssetPath },
      runningMode: "VIDEO",
      numPoses: 1,
    });
    return backend;
  }

  detect(frame: VideoFrame): Landmark[] {
    if (!this.landmarker) {
      throw new Error("mediapipe backend not initialised; use MediaPipeBackend.create()");
    }
    this.width = frame.width;
    this.height = frame.height;
    const rgba = lumaToRgba(frame);
    const result = this.landmarker.detectForVideo(
      { data: rgba, width: frame.width, height: frame.height },
      (frame.index * 1000) / 30,
    );
    const empty: Landmark[] = Array.from({ length: NUM_LANDMARKS }, () => ({
      x: 0,
      y: 0,
      visibility: 0,
    }));
    const pose = result?.landmarks?.[0];
    if (!pose) {
      return empty; // keep the time base: a no-detection frame stays in the series
    }
    return pose.map((lm: any) => ({
      x: lm.x * this.width, // native pixel coordinates, never normalized
      y: lm.y * this.height,
      visibility: lm.visibility ?? 0,
    }));
  }
}

function lumaToRgba(frame: VideoFrame): Uint8ClampedArray {
  const out = new Uint8ClampedArray(frame.width * frame.height * 4);
  for (let i = 0; i < frame.luma.length; i++) {
    const v = frame.luma[i];
    out[4 * i] = v;
    out[4 * i + 1] = v;
    out[4 * i + 2] = v;
    out[4 * i + 3] = 255;
  }
  return out;
}
