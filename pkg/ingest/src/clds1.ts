/**
 * CLDS1 writer and validating reader: the binary contract consumed by the
 * training engine. Little-endian; layout:
 *
 *   "CLDS1" | u8 split(0=train,1=test) | u16 K | K x (u16 len, utf8 name)
 *   | u32 n | n x u16 labels | n x 3072 image bytes (3x32x32, CHW)
 */

export const IMAGE_BYTES = 3 * 32 * 32;
const MAGIC = Buffer.from("CLDS1", "latin1");

export interface Clds1 {
  split: "train" | "test";
  classNames: string[];
  labels: Uint16Array;
  /** n * 3072 bytes, CHW per image */
  images: Uint8Array;
}

export function writeClds1(ds: Clds1): Buffer {
  const n = ds.labels.length;
  if (ds.images.length !== n * IMAGE_BYTES) {
    throw new Error(`image payload ${ds.images.length} != n*${IMAGE_BYTES}`);
  }
  const nameBufs = ds.classNames.map((s) => Buffer.from(s, "utf8"));
  for (const label of ds.labels) {
    if (label >= ds.classNames.length) {
      throw new Error(`label ${label} outside ${ds.classNames.length}-class table`);
    }
  }
  const size =
    5 + 1 + 2 + nameBufs.reduce((a, b) => a + 2 + b.length, 0) + 4 + 2 * n + ds.images.length;
  const out = Buffer.alloc(size);
  let off = 0;
  MAGIC.copy(out, off); off += 5;
  out.writeUInt8(ds.split === "train" ? 0 : 1, off); off += 1;
  out.writeUInt16LE(ds.classNames.length, off); off += 2;
  for (const nb of nameBufs) {
    out.writeUInt16LE(nb.length, off); off += 2;
    nb.copy(out, off); off += nb.length;
  }
  out.writeUInt32LE(n, off); off += 4;
  for (let i = 0; i < n; i++) {
    out.writeUInt16LE(ds.labels[i], off); off += 2;
  }
  Buffer.from(ds.images).copy(out, off); off += ds.images.length;
  if (off !== size) throw new Error("internal size accounting error");
  return out;
}

export function readClds1(buf: Buffer): Clds1 {
  if (buf.length < 12 || !buf.subarray(0, 5).equals(MAGIC)) {
    throw new Error("bad CLDS1 magic");
  }
  let off = 5;
  const need = (n: number, what: string) => {
    if (off + n > buf.length) throw new Error(`truncated while reading ${what}`);
  };
  need(1, "split"); const split = buf.readUInt8(off) === 0 ? "train" : "test"; off += 1;
  need(2, "class count"); const k = buf.readUInt16LE(off); off += 2;
  const classNames: string[] = [];
  for (let i = 0; i < k; i++) {
    need(2, `name ${i} length`); const len = buf.readUInt16LE(off); off += 2;
    need(len, `name ${i}`);
    classNames.push(buf.subarray(off, off + len).toString("utf8")); off += len;
  }
  need(4, "image count"); const n = buf.readUInt32LE(off); off += 4;
  need(2 * n, "labels");
  const labels = new Uint16Array(n);
  for (let i = 0; i < n; i++) { labels[i] = buf.readUInt16LE(off); off += 2; }
  need(n * IMAGE_BYTES, "images");
  const images = new Uint8Array(buf.subarray(off, off + n * IMAGE_BYTES)); off += n * IMAGE_BYTES;
  if (off !== buf.length) {
    throw new Error(`${buf.length - off} trailing bytes beyond declared payload`);
  }
  for (const label of labels) {
    if (label >= k) throw new Error(`label ${label} outside ${k}-class table`);
  }
  return { split, classNames, labels, images };
}

export function histogram(ds: Clds1): number[] {
  const h = new Array<number>(ds.classNames.length).fill(0);
  for (const label of ds.labels) h[label] += 1;
  return h;
}
