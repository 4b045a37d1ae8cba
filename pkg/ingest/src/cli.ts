#!/usr/bin/env node
/**
 * ingest convert --dataset NAME --src FILE.npz --out STEM [--expect-md5 HEX]
 *                [--verify-counts] [--download]
 * ingest manifest --dir DIR [--out DIR] [--epochs N]
 */

import { createWriteStream, existsSync, mkdirSync } from "node:fs";
import { dirname } from "node:path";
import { Readable } from "node:stream";
import { pipeline } from "node:stream/promises";
import { convert } from "./convert.js";
import { datasetInfo } from "./datasets.js";
import { writeManifests } from "./manifest.js";

function parseFlags(argv: string[]): Map<string, string | boolean> {
  const flags = new Map<string, string | boolean>();
  for (let i = 0; i < argv.length; i++) {
    const a = argv[i];
    if (!a.startsWith("--")) throw new Error(`unexpected argument ${a}`);
    const key = a.slice(2);
    if (i + 1 < argv.length && !argv[i + 1].startsWith("--")) {
      flags.set(key, argv[++i]);
    } else {
      flags.set(key, true);
    }
  }
  return flags;
}

async function download(url: string, dest: string): Promise<void> {
  console.error(`downloading ${url}`);
  const res = await fetch(url);
  if (!res.ok || !res.body) throw new Error(`HTTP ${res.status} for ${url}`);
  mkdirSync(dirname(dest), { recursive: true });
  await pipeline(Readable.fromWeb(res.body as never), createWriteStream(dest));
}

async function cmdConvert(flags: Map<string, string | boolean>): Promise<number> {
  const dataset = String(flags.get("dataset") ?? "");
  const out = String(flags.get("out") ?? "");
  if (!dataset || !out) {
    console.error("usage: ingest convert --dataset NAME --src FILE.npz --out STEM");
    return 2;
  }
  const info = datasetInfo(dataset);
  let src = flags.get("src") ? String(flags.get("src")) : `${out}.src.npz`;
  if (!existsSync(src)) {
    if (flags.get("download")) {
      await download(info.url, src);
    } else {
      console.error(`source archive ${src} not found (pass --src or --download)`);
      return 2;
    }
  }
  const result = convert({
    dataset,
    src,
    outStem: out,
    expectMd5: flags.get("expect-md5") ? String(flags.get("expect-md5")) : undefined,
    verifyCounts: Boolean(flags.get("verify-counts")),
  });
  console.log(JSON.stringify(result, null, 2));
  return 0;
}

function cmdManifest(flags: Map<string, string | boolean>): number {
  const dir = String(flags.get("dir") ?? "");
  if (!dir) {
    console.error("usage: ingest manifest --dir DIR [--out DIR] [--epochs N]");
    return 2;
  }
  const written = writeManifests({
    dir,
    outDir: flags.get("out") ? String(flags.get("out")) : undefined,
    epochs: flags.get("epochs") ? Number(flags.get("epochs")) : undefined,
  });
  for (const path of written) console.log(path);
  return 0;
}

async function main(): Promise<number> {
  const [cmd, ...rest] = process.argv.slice(2);
  try {
    const flags = parseFlags(rest);
    if (cmd === "convert") return await cmdConvert(flags);
    if (cmd === "manifest") return cmdManifest(flags);
    console.error("usage: ingest <convert|manifest> [flags]");
    return 2;
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 1;
  }
}

main().then((code) => process.exit(code));
