import { Landmark, NUM_LANDMARKS } from "./types.js";

/**
 * Canonical landmark file rendering: line 1 header, one frame per line,
 * fixed field order, 6-decimal floats, LF endings. Mirrors the consumer's
 * byte-exact expectations for canonical files.
 */

const SCHEMA = "romkit/landmarks/v1";

function f6(value: number): string {
  return value.toFixed(6);
}

export interface HeaderFields {
  videoId: string;
  participantId: string;
  exercise: string;
  romCondition: string;
  fps: number;
}

export function headerLine(fields: HeaderFields): string {
  return (
    `{"schema": ${JSON.stringify(SCHEMA)}, ` +
    `"video_id": ${JSON.stringify(fields.videoId)}, ` +
    `"participant_id": ${JSON.stringify(fields.participantId)}, ` +
    `"exercise": ${JSON.stringify(fields.exercise)}, ` +
    `"rom_condition": ${JSON.stringify(fields.romCondition)}, ` +
    `"fps": ${f6(fields.fps)}}`
  );
}

export function frameLine(index: number, timestamp: number, landmarks: Landmark[]): string {
  if (landmarks.length !== NUM_LANDMARKS) {
    throw new Error(`expected ${NUM_LANDMARKS} landmarks, got ${landmarks.length}`);
  }
  const triples = landmarks
    .map((lm) => `[${f6(lm.x)}, ${f6(lm.y)}, ${f6(lm.visibility)}]`)
    .join(", ");
  return `{"i": ${index}, "t": ${f6(timestamp)}, "lm": [${triples}]}`;
}

export function renderLandmarkFile(header: HeaderFields, frames: Array<[number, number, Landmark[]]>): string {
  const lines = [headerLine(header)];
  for (const [index, timestamp, landmarks] of frames) {
    lines.push(frameLine(index, timestamp, landmarks));
  }
  return lines.join("\n") + "\n";
}
