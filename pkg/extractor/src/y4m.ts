import { Video, VideoFrame } from "./types.js";

/**
 * Minimal YUV4MPEG2 reader. Only the luma plane is kept; 4:2:0 and 4:4:4
 * chroma subsamplings are supported. Raises on anything malformed so a bad
 * container never produces silent garbage landmarks.
 */
export function parseY4m(buffer: Uint8Array): Video {
  const headerEnd = buffer.indexOf(0x0a);
  if (headerEnd < 0) {
    throw new Error("y4m: missing stream header");
  }
  const header = new TextDecoder().decode(buffer.subarray(0, headerEnd));
  if (!header.startsWith("YUV4MPEG2")) {
    throw new Error("y4m: not a YUV4MPEG2 stream");
  }
  let width = 0;
  let height = 0;
  let fpsNum = 0;
  let fpsDen = 1;
  let chroma = "420";
  for (const token of header.split(" ").slice(1)) {
    const tag = token[0];
    const value = token.slice(1);
    if (tag === "W") width = parseInt(value, 10);
    else if (tag === "H") height = parseInt(value, 10);
    else if (tag === "F") {
      const [num, den] = value.split(":");
      fpsNum = parseInt(num, 10);
      fpsDen = parseInt(den, 10);
    } else if (tag === "C") chroma = value;
  }
  if (!width || !height || !fpsNum || !fpsDen) {
    throw new Error(`y4m: incomplete header ${JSON.stringify(header)}`);
  }
  const lumaSize = width * height;
  let chromaSize: number;
  if (chroma.startsWith("420")) chromaSize = 2 * ((width / 2) * (height / 2));
  else if (chroma.startsWith("444")) chromaSize = 2 * lumaSize;
  else if (chroma.startsWith("mono")) chromaSize = 0;
  else throw new Error(`y4m: unsupported chroma mode C${chroma}`);

  const frames: VideoFrame[] = [];
  let offset = headerEnd + 1;
  const marker = new TextEncoder().encode("FRAME");
  while (offset < buffer.length) {
    for (let i = 0; i < marker.length; i++) {
      if (buffer[offset + i] !== marker[i]) {
        throw new Error(`y4m: bad frame marker at byte ${offset}`);
      }
    }
    const lineEnd = buffer.indexOf(0x0a, offset);
    if (lineEnd < 0) throw new Error("y4m: truncated frame header");
    const dataStart = lineEnd + 1;
    const dataEnd = dataStart + lumaSize + chromaSize;
    if (dataEnd > buffer.length) throw new Error("y4m: truncated frame data");
    frames.push({
      index: frames.length,
      width,
      height,
      luma: buffer.subarray(dataStart, dataStart + lumaSize),
    });
    offset = dataEnd;
  }
  if (frames.length === 0) {
    throw new Error("y4m: stream contains no frames");
  }
  return { width, height, fps: fpsNum / fpsDen, frames };
}
