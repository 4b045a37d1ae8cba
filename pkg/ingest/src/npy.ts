/**
 * Minimal .npy reader: C-order arrays of the integer/float dtypes that
 * MedMNIST archives actually contain.
 */

export interface NpyArray {
  shape: number[];
  dtype: string;
  /** flat buffer in C order */
  data: Uint8Array | Int8Array | Uint16Array | Int16Array | Uint32Array | Int32Array | Float32Array | Float64Array | BigInt64Array;
}

const MAGIC = Buffer.from("\x93NUMPY", "latin1");

export function parseNpy(buf: Buffer): NpyArray {
  if (buf.length < 10 || !buf.subarray(0, 6).equals(MAGIC)) {
    throw new Error("not an npy payload (bad magic)");
  }
  const major = buf[6];
  let headerLen: number;
  let headerStart: number;
  if (major === 1) {
    headerLen = buf.readUInt16LE(8);
    headerStart = 10;
  } else if (major === 2 || major === 3) {
    headerLen = buf.readUInt32LE(8);
    headerStart = 12;
  } else {
    throw new Error(`unsupported npy version ${major}`);
  }
  const header = buf.subarray(headerStart, headerStart + headerLen).toString("latin1");
  const descr = /'descr'\s*:\s*'([^']+)'/.exec(header)?.[1];
  const fortran = /'fortran_order'\s*:\s*(True|False)/.exec(header)?.[1];
  const shapeStr = /'shape'\s*:\s*\(([^)]*)\)/.exec(header)?.[1];
  if (!descr || !fortran || shapeStr === undefined) {
    throw new Error(`malformed npy header: ${header}`);
  }
  if (fortran === "True") {
    throw new Error("fortran-order npy arrays are not supported");
  }
  const shape = shapeStr
    .split(",")
    .map((s) => s.trim())
    .filter((s) => s.length > 0)
    .map((s) => Number.parseInt(s, 10));
  const count = shape.reduce((a, b) => a * b, 1);
  const body = buf.subarray(headerStart + headerLen);

  const mk = (ctor: { new (b: ArrayBuffer, off: number, n: number): NpyArray["data"]; BYTES_PER_ELEMENT: number }) => {
    const bytes = count * ctor.BYTES_PER_ELEMENT;
    if (body.length < bytes) {
      throw new Error(`npy payload truncated: need ${bytes} bytes, have ${body.length}`);
    }
    // copy to guarantee alignment
    const copy = Buffer.alloc(bytes);
    body.copy(copy, 0, 0, bytes);
    return new ctor(copy.buffer, copy.byteOffset, count);
  };

  let data: NpyArray["data"];
  switch (descr) {
    case "|u1": data = mk(Uint8Array); break;
    case "|i1": data = mk(Int8Array); break;
    case "<u2": data = mk(Uint16Array); break;
    case "<i2": data = mk(Int16Array); break;
    case "<u4": data = mk(Uint32Array); break;
    case "<i4": data = mk(Int32Array); break;
    case "<f4": data = mk(Float32Array); break;
    case "<f8": data = mk(Float64Array); break;
    case "<i8": data = mk(BigInt64Array); break;
    default:
      throw new Error(`unsupported npy dtype ${descr}`);
  }
  return { shape, dtype: descr, data };
}

/** Serialize a C-order array as npy v1 (used by test fixtures). */
export function writeNpy(shape: number[], data: Uint8Array): Buffer {
  const shapeTuple = shape.length === 1 ? `(${shape[0]},)` : `(${shape.join(", ")})`;
  let header = `{'descr': '|u1', 'fortran_order': False, 'shape': ${shapeTuple}, }`;
  const unpadded = 10 + header.length + 1;
  const pad = (64 - (unpadded % 64)) % 64;
  header = header + " ".repeat(pad) + "\n";
  const out = Buffer.alloc(10 + header.length + data.length);
  MAGIC.copy(out, 0);
  out[6] = 1;
  out[7] = 0;
  out.writeUInt16LE(header.length, 8);
  out.write(header, 10, "latin1");
  Buffer.from(data).copy(out, 10 + header.length);
  return out;
}
