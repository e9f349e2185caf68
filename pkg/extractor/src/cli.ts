import { readFileSync } from "node:fs";
import { basename } from "node:path";
import { parseArgs } from "node:util";

import { MarkerBackend } from "./backends/markers.js";
import { extractVideo } from "./extract.js";
import { parseManifest } from "./manifest.js";
import { ExtractionJob, PoseBackend } from "./types.js";

const USAGE = `romkit-extract: pose-landmark extraction into romkit landmark files

usage:
  romkit-extract --manifest jobs.csv --out-dir DIR [--stride N] [--backend markers|mediapipe]
  romkit-extract --video clip.y4m --participant P01 --exercise dumbbell_curl \\
                 --rom-condition fROM --out-dir DIR

The manifest needs columns video_path, participant_id, exercise, rom_condition
(optional video_id; defaults to the video basename).`;

async function makeBackend(name: string, side: "left" | "right", model: string): Promise<PoseBackend> {
  if (name === "markers") {
    return new MarkerBackend(side);
  }
  if (name === "mediapipe") {
    const { MediaPipeBackend } = await import("./backends/mediapipe.js");
    return MediaPipeBackend.create(model);
  }
  throw new Error(`unknown backend '${name}' (expected markers or mediapipe)`);
}

export async function main(argv: string[]): Promise<number> {
  const { values } = parseArgs({
    args: argv,
    options: {
      manifest: { type: "string" },
      video: { type: "string" },
      participant: { type: "string" },
      exercise: { type: "string" },
      "rom-condition": { type: "string" },
      "video-id": { type: "string" },
      "out-dir": { type: "string", default: "." },
      stride: { type: "string", default: "1" },
      backend: { type: "string", default: "mediapipe" },
      side: { type: "string", default: "left" },
      model: { type: "string", default: "pose_landmarker.task" },
      help: { type: "boolean", default: false },
    },
  });
  if (values.help) {
    console.log(USAGE);
    return 0;
  }
  const stride = parseInt(values.stride as string, 10);
  if (!Number.isInteger(stride) || stride < 1) {
    console.error("stride must be an integer >= 1");
    return 2;
  }
  const outDir = values["out-dir"] as string;

  let jobs: ExtractionJob[];
  try {
    if (values.manifest) {
      jobs = parseManifest(readFileSync(values.manifest as string, "utf-8"), outDir, stride);
    } else if (values.video) {
      for (const required of ["participant", "exercise", "rom-condition"] as const) {
        if (!values[required]) {
          console.error(`--${required} is required in single-video mode`);
          return 2;
        }
      }
      const videoPath = values.video as string;
      const videoId =
        (values["video-id"] as string | undefined) ?? basename(videoPath).replace(/\.[^.]+$/, "");
      jobs = [
        {
          videoPath,
          outputPath: `${outDir}/${videoId}.landmarks.jsonl`,
          videoId,
          participantId: values.participant as string,
          exercise: values.exercise as string,
          romCondition: values["rom-condition"] as string,
          stride,
        },
      ];
    } else {
      console.error(USAGE);
      return 2;
    }
  } catch (err) {
    console.error((err as Error).message);
    return 2;
  }

  let backend: PoseBackend;
  try {
    backend = await makeBackend(
      values.backend as string,
      values.side as "left" | "right",
      values.model as string,
    );
  } catch (err) {
    console.error((err as Error).message);
    return 2;
  }

  let failures = 0;
  for (const job of jobs) {
    try {
      const result = extractVideo(job, backend);
      console.log(
        `${job.videoId}: ${result.framesProcessed} frames ` +
          `(${result.framesWithDetection} with detections) -> ${job.outputPath}`,
      );
    } catch (err) {
      failures += 1;
      console.error(`FAILED ${job.videoId}: ${(err as Error).message}`);
    }
  }
  console.log(`${jobs.length - failures}/${jobs.length} videos extracted`);
  return failures === 0 ? 0 : 1;
}

const isMain = process.argv[1] && import.meta.url.endsWith(basename(process.argv[1]));
if (isMain) {
  main(process.argv.slice(2)).then((code) => {
    process.exitCode = code;
  });
}
