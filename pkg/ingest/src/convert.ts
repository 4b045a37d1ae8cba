/**
 * One-shot conversion of a source .npz archive into the CLDS1 pair
 * (<stem>.train.clds1 / <stem>.test.clds1) plus a notes JSON recording the
 * source digest and per-class histograms.
 */

import { createHash } from "node:crypto";
import { readFileSync, writeFileSync } from "node:fs";
import { writeClds1, histogram, type Clds1, IMAGE_BYTES } from "./clds1.js";
import { datasetInfo, type DatasetInfo } from "./datasets.js";
import { parseNpz } from "./npz.js";
import { resizeBilinear } from "./resize.js";
import type { NpyArray } from "./npy.js";

export interface ConvertOptions {
  dataset: string;
  src: string;
  outStem: string;
  expectMd5?: string;
  /** enforce published split counts where the registry knows them */
  verifyCounts?: boolean;
}

export interface ConvertResult {
  dataset: string;
  sourceMd5: string;
  sourceSha256: string;
  files: { train: string; test: string };
  histograms: { train: number[]; test: number[] };
  counts: { train: number; test: number };
}

function toImages(arr: NpyArray, info: DatasetInfo): Uint8Array {
  const [n, h, w, maybeC] = arr.shape.length === 4 ? arr.shape : [...arr.shape, 1];
  const channels = arr.shape.length === 4 ? maybeC : 1;
  if (info.grayscale && channels !== 1) {
    throw new Error(`${info.name}: expected grayscale source, got ${channels} channels`);
  }
  if (!info.grayscale && channels !== 3) {
    throw new Error(`${info.name}: expected RGB source, got ${channels} channels`);
  }
  if (!(arr.data instanceof Uint8Array)) {
    throw new Error(`${info.name}: image array must be uint8, got ${arr.dtype}`);
  }
  const src = arr.data;
  const out = new Uint8Array(n * IMAGE_BYTES);
  const perSrc = h * w * channels;
  for (let i = 0; i < n; i++) {
    const img = src.subarray(i * perSrc, (i + 1) * perSrc);
    const resized = resizeBilinear(img, h, w, channels, 32, 32); // HWC
    // HWC -> CHW, replicating grayscale to three channels
    const base = i * IMAGE_BYTES;
    for (let c = 0; c < 3; c++) {
      const sc = channels === 1 ? 0 : c;
      for (let p = 0; p < 32 * 32; p++) {
        out[base + c * 1024 + p] = resized[p * channels + sc];
      }
    }
  }
  return out;
}

function toLabels(arr: NpyArray, k: number, what: string): Uint16Array {
  const n = arr.shape[0];
  const total = arr.shape.reduce((a, b) => a * b, 1);
  if (total !== n) {
    throw new Error(`${what}: label array shape (${arr.shape.join(",")}) is not (n,) or (n,1)`);
  }
  const out = new Uint16Array(n);
  for (let i = 0; i < n; i++) {
    const v = Number(arr.data[i]);
    if (!Number.isInteger(v) || v < 0 || v >= k) {
      throw new Error(`${what}: label ${v} outside 0..${k - 1}`);
    }
    out[i] = v;
  }
  return out;
}

export function convert(opts: ConvertOptions): ConvertResult {
  const info = datasetInfo(opts.dataset);
  const blob = readFileSync(opts.src);
  const md5 = createHash("md5").update(blob).digest("hex");
  const sha256 = createHash("sha256").update(blob).digest("hex");
  const recorded = opts.expectMd5 ?? info.md5;
  if (recorded && recorded !== md5) {
    throw new Error(
      `${info.name}: checksum mismatch (source md5 ${md5}, recorded ${recorded})`,
    );
  }
  const arrays = parseNpz(blob);
  const result: Partial<ConvertResult> = {
    dataset: info.name,
    sourceMd5: md5,
    sourceSha256: sha256,
  };
  const hists: Record<string, number[]> = {};
  const counts: Record<string, number> = {};
  const files: Record<string, string> = {};
  for (const split of ["train", "test"] as const) {
    const imgs = arrays.get(`${split}_images`);
    const labels = arrays.get(`${split}_labels`);
    if (!imgs || !labels) {
      throw new Error(`${info.name}: archive is missing ${split}_images/${split}_labels`);
    }
    const ds: Clds1 = {
      split,
      classNames: info.classes,
      labels: toLabels(labels, info.classes.length, `${info.name} ${split}`),
      images: toImages(imgs, info),
    };
    const expected = split === "train" ? info.nTrain : info.nTest;
    if (opts.verifyCounts && expected !== null && ds.labels.length !== expected) {
      throw new Error(
        `${info.name}: ${split} count ${ds.labels.length} != published ${expected}`,
      );
    }
    const path = `${opts.outStem}.${split}.clds1`;
    writeFileSync(path, writeClds1(ds));
    files[split] = path;
    hists[split] = histogram(ds);
    counts[split] = ds.labels.length;
  }
  result.files = files as ConvertResult["files"];
  result.histograms = hists as ConvertResult["histograms"];
  result.counts = counts as ConvertResult["counts"];
  writeFileSync(
    `${opts.outStem}.notes.json`,
    JSON.stringify(result, null, 2) + "\n",
  );
  return result as ConvertResult;
}
