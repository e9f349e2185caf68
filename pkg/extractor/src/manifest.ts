import { basename, join } from "node:path";

import { ExtractionJob } from "./types.js";

const REQUIRED = ["video_path", "participant_id", "exercise", "rom_condition"];

function splitCsvLine(line: string): string[] {
  // manifest fields never contain quoted commas; keep the parser honest anyway
  if (line.includes('"')) {
    throw new Error("manifest: quoted fields are not supported");
  }
  return line.split(",").map((cell) => cell.trim());
}

export function parseManifest(text: string, outDir: string, stride: number): ExtractionJob[] {
  const lines = text.split(/\r?\n/).filter((line) => line.trim().length > 0);
  if (lines.length === 0) {
    throw new Error("manifest: empty file");
  }
  const header = splitCsvLine(lines[0]);
  for (const column of REQUIRED) {
    if (!header.includes(column)) {
      throw new Error(`manifest: missing required column '${column}'`);
    }
  }
  const index = Object.fromEntries(header.map((name, i) => [name, i]));
  const jobs: ExtractionJob[] = [];
  for (const [lineno, line] of lines.slice(1).entries()) {
    const cells = splitCsvLine(line);
    if (cells.length < header.length) {
      throw new Error(`manifest row ${lineno + 2}: expected ${header.length} columns`);
    }
    const videoPath = cells[index.video_path];
    const videoId = header.includes("video_id")
      ? cells[index.video_id]
      : basename(videoPath).replace(/\.[^.]+$/, "");
    jobs.push({
      videoPath,
      outputPath: join(outDir, `${videoId}.landmarks.jsonl`),
      videoId,
      participantId: cells[index.participant_id],
      exercise: cells[index.exercise],
      romCondition: cells[index.rom_condition],
      stride,
    });
  }
  return jobs;
}
