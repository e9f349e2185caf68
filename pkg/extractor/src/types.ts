export const NUM_LANDMARKS = 33;

// Standard 33-point pose topology indices used by the marker backend.
export const LEFT_SHOULDER = 11;
export const RIGHT_SHOULDER = 12;
export const LEFT_ELBOW = 13;
export const RIGHT_ELBOW = 14;
export const LEFT_WRIST = 15;
export const RIGHT_WRIST = 16;
export const LEFT_HIP = 23;
export const RIGHT_HIP = 24;

export interface Landmark {
  x: number;
  y: number;
  visibility: number;
}

export interface VideoFrame {
  index: number;
  width: number;
  height: number;
  /** Luma plane, row-major, width*height bytes. */
  luma: Uint8Array;
}

export interface Video {
  width: number;
  height: number;
  fps: number;
  frames: VideoFrame[];
}

/** A pose backend turns one frame into 33 landmarks (pixel coordinates). */
export interface PoseBackend {
  name: string;
  detect(frame: VideoFrame): Landmark[];
}

export interface ExtractionJob {
  videoPath: string;
  outputPath: string;
  videoId: string;
  participantId: string;
  exercise: string;
  romCondition: string;
  stride: number;
}
