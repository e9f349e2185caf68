import { readFileSync, writeFileSync, mkdirSync } from "node:fs";
import { dirname } from "node:path";

import { renderLandmarkFile } from "./landmarks.js";
import { ExtractionJob, Landmark, PoseBackend } from "./types.js";
import { parseY4m } from "./y4m.js";

export interface ExtractionResult {
  job: ExtractionJob;
  framesProcessed: number;
  framesWithDetection: number;
}

/**
 * Run a backend over a video and write the canonical landmark file.
 *
 * Timestamps are synthesized as frame_index / container_fps; with a stride,
 * the header fps is the effective sampling rate so downstream validation of
 * frame spacing against fps holds.
 */
export function extractVideo(job: ExtractionJob, backend: PoseBackend): ExtractionResult {
  const video = parseY4m(readFileSync(job.videoPath));
  const frames: Array<[number, number, Landmark[]]> = [];
  let detected = 0;
  for (let i = 0; i < video.frames.length; i += job.stride) {
    const landmarks = backend.detect(video.frames[i]);
    if (landmarks.some((lm) => lm.visibility > 0)) {
      detected += 1;
    }
    frames.push([i, i / video.fps, landmarks]);
  }
  if (detected === 0) {
    throw new Error(`${job.videoPath}: no person detected in any frame`);
  }
  const text = renderLandmarkFile(
    {
      videoId: job.videoId,
      participantId: job.participantId,
      exercise: job.exercise,
      romCondition: job.romCondition,
      fps: video.fps / job.stride,
    },
    frames,
  );
  mkdirSync(dirname(job.outputPath), { recursive: true });
  writeFileSync(job.outputPath, text, { encoding: "utf-8" });
  return { job, framesProcessed: frames.length, framesWithDetection: detected };
}
