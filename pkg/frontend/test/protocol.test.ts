import { describe, expect, it } from 'vitest';

import { decodeFrame, encodeRequest } from '../src/protocol.js';

function frameBuffer(id: number, payload: number[]): ArrayBuffer {
  const buf = new ArrayBuffer(8 + payload.length);
  new DataView(buf).setBigUint64(0, BigInt(id), false);
  new Uint8Array(buf, 8).set(payload);
  return buf;
}

describe('decodeFrame', () => {
  it('splits the big-endian id from the payload', () => {
    const frame = decodeFrame(frameBuffer(7, [0xff, 0xd8, 0x01]));
    expect(frame.id).toBe(7);
    expect(Array.from(frame.jpeg)).toEqual([0xff, 0xd8, 0x01]);
  });

  it('handles ids above 32 bits', () => {
    const frame = decodeFrame(frameBuffer(2 ** 40 + 5, []));
    expect(frame.id).toBe(2 ** 40 + 5);
  });

  it('rejects truncated frames', () => {
    expect(() => decodeFrame(new ArrayBuffer(4))).toThrow(/too short/);
  });
});

describe('encodeRequest', () => {
  it('serializes a full request', () => {
    const pose = Array.from({ length: 16 }, (_, i) => i);
    const parsed = JSON.parse(encodeRequest({
      pose, width: 64, height: 64, quality: 'preview', id: 3,
    }));
    expect(parsed.pose).toHaveLength(16);
    expect(parsed.id).toBe(3);
    expect(parsed.quality).toBe('preview');
  });

  it('rejects malformed poses', () => {
    expect(() => encodeRequest({
      pose: [1, 2, 3], width: 8, height: 8, quality: 'full',
    })).toThrow(/16 numbers/);
  });
});
