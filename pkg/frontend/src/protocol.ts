// Wire types for the render service: JSON requests in, binary frames out.

export interface ServiceInfo {
  version: string;
  checkpoint_id: string;
  fingerprint: string;
  iteration: number;
  v: number;
  fusion_mode: string;
  max_width: number;
  max_height: number;
  image_width: number;
  image_height: number;
  radius_min: number;
  radius_max: number;
  train_frames: number;
  test_frames: number;
}

export interface RenderRequest {
  pose: number[];
  width: number;
  height: number;
  quality: 'preview' | 'full';
  id?: number;
}

export interface SourceInfo {
  indices: number[];
  distances: number[];
  thumbnails: string[];
}

export interface StreamFrame {
  id: number;
  jpeg: Uint8Array;
}

export function encodeRequest(req: RenderRequest): string {
  if (req.pose.length !== 16) {
    throw new Error(`pose must have 16 numbers, got ${req.pose.length}`);
  }
  return JSON.stringify(req);
}

/** Binary stream frame: 8-byte big-endian frame id, then the JPEG payload. */
export function decodeFrame(buf: ArrayBuffer): StreamFrame {
  if (buf.byteLength < 8) {
    throw new Error(`frame too short: ${buf.byteLength} bytes`);
  }
  const id = Number(new DataView(buf).getBigUint64(0, false));
  return { id, jpeg: new Uint8Array(buf, 8) };
}
