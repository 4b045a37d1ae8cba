/**
 * Test fixtures: build tiny .npz archives in the MedMNIST layout (stored
 * or deflated zip entries) without touching the code under test.
 */

import { deflateRawSync } from "node:zlib";
import { writeNpy } from "../src/npy.js";

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[n] = c >>> 0;
  }
  return table;
})();

export function crc32(buf: Uint8Array): number {
  let c = 0xffffffff;
  for (let i = 0; i < buf.length; i++) {
    c = CRC_TABLE[(c ^ buf[i]) & 0xff] ^ (c >>> 8);
  }
  return (c ^ 0xffffffff) >>> 0;
}

interface Entry {
  name: string;
  payload: Buffer;
  deflate: boolean;
}

export function buildZip(entries: Entry[]): Buffer {
  const locals: Buffer[] = [];
  const centrals: Buffer[] = [];
  let offset = 0;
  for (const { name, payload, deflate } of entries) {
    const nameBuf = Buffer.from(name, "utf8");
    const data = deflate ? deflateRawSync(payload) : payload;
    const method = deflate ? 8 : 0;
    const crc = crc32(payload);

    const local = Buffer.alloc(30 + nameBuf.length);
    local.writeUInt32LE(0x04034b50, 0);
    local.writeUInt16LE(20, 4); // version needed
    local.writeUInt16LE(method, 8);
    local.writeUInt32LE(crc, 14);
    local.writeUInt32LE(data.length, 18);
    local.writeUInt32LE(payload.length, 22);
    local.writeUInt16LE(nameBuf.length, 26);
    nameBuf.copy(local, 30);

    const central = Buffer.alloc(46 + nameBuf.length);
    central.writeUInt32LE(0x02014b50, 0);
    central.writeUInt16LE(20, 6);
    central.writeUInt16LE(method, 10);
    central.writeUInt32LE(crc, 16);
    central.writeUInt32LE(data.length, 20);
    central.writeUInt32LE(payload.length, 24);
    central.writeUInt16LE(nameBuf.length, 28);
    central.writeUInt32LE(offset, 42);
    nameBuf.copy(central, 46);

    locals.push(local, data);
    centrals.push(central);
    offset += local.length + data.length;
  }
  const centralStart = offset;
  const centralBytes = Buffer.concat(centrals);
  const eocd = Buffer.alloc(22);
  eocd.writeUInt32LE(0x06054b50, 0);
  eocd.writeUInt16LE(entries.length, 8);
  eocd.writeUInt16LE(entries.length, 10);
  eocd.writeUInt32LE(centralBytes.length, 12);
  eocd.writeUInt32LE(centralStart, 16);
  return Buffer.concat([...locals, centralBytes, eocd]);
}

export interface FixtureSpec {
  nTrain: number;
  nTest: number;
  classes: number;
  channels: 1 | 3;
  size?: number;
  deflate?: boolean;
  seed?: number;
}

/** MedMNIST-layout archive with deterministic pseudo-random pixels. */
export function buildMedmnistNpz(spec: FixtureSpec): Buffer {
  const size = spec.size ?? 28;
  let state = (spec.seed ?? 1) >>> 0 || 1;
  const next = () => {
    // xorshift32: deterministic across runs
    state ^= state << 13; state >>>= 0;
    state ^= state >>> 17;
    state ^= state << 5; state >>>= 0;
    return state;
  };
  const entries: Entry[] = [];
  for (const [split, n] of [["train", spec.nTrain], ["test", spec.nTest]] as const) {
    const imgShape = spec.channels === 1 ? [n, size, size] : [n, size, size, spec.channels];
    const pixels = new Uint8Array(n * size * size * spec.channels);
    for (let i = 0; i < pixels.length; i++) pixels[i] = next() & 0xff;
    const labels = new Uint8Array(n);
    for (let i = 0; i < n; i++) labels[i] = i % spec.classes;
    entries.push({
      name: `${split}_images.npy`,
      payload: writeNpy(imgShape, pixels),
      deflate: spec.deflate ?? false,
    });
    entries.push({
      name: `${split}_labels.npy`,
      payload: writeNpy([n, 1], labels),
      deflate: spec.deflate ?? false,
    });
  }
  return buildZip(entries);
}
