/**
 * Ready-to-run scenario configs for the intra- and inter-specialty
 * episode orders, referencing previously converted CLDS1 stems.
 */

import { existsSync, writeFileSync } from "node:fs";
import { join } from "node:path";

export interface ManifestOptions {
  dir: string;
  outDir?: string;
  epochs?: number;
}

const SCENARIOS: Record<string, { episodes: string[]; notes: string[] }> = {
  pathology: {
    // colorectal histology -> blood cells -> kidney cortex cells
    episodes: ["pathmnist", "bloodmnist", "tissuemnist"],
    notes: [
      "The source text cites the chest X-ray archive for the colorectal histology "
      + "episode; that is a citation slip, the pathology archive (pathmnist) is used.",
    ],
  },
  radiology: {
    // CT -> ultrasound -> chest X-ray
    episodes: ["organcmnist", "breastmnist", "pneumoniamnist"],
    notes: [],
  },
  interspecialty: {
    // pathology -> radiology -> dermatology
    episodes: ["pathmnist", "pneumoniamnist", "dermamnist"],
    notes: [],
  },
};

export function writeManifests(opts: ManifestOptions): string[] {
  const outDir = opts.outDir ?? opts.dir;
  const epochs = opts.epochs ?? 10;
  const written: string[] = [];
  for (const [name, plan] of Object.entries(SCENARIOS)) {
    for (const stem of plan.episodes) {
      for (const split of ["train", "test"]) {
        const f = join(opts.dir, `${stem}.${split}.clds1`);
        if (!existsSync(f)) {
          throw new Error(`scenario ${name}: missing converted file ${f}`);
        }
      }
    }
    const config = {
      name,
      seed: 0,
      episodes: plan.episodes.map((stem) => ({ dataset: stem, epochs })),
      shared_classes: [],
      strategy: { variant: "mas_r" },
      optimizer: {
        learning_rate: 0.005,
        momentum: 0.9,
        weight_decay: 0.0005,
        batch_size: 64,
      },
      notes: plan.notes,
    };
    const path = join(outDir, `${name}.json`);
    writeFileSync(path, JSON.stringify(config, null, 2) + "\n");
    written.push(path);
  }
  return written;
}

export const SCENARIO_ORDERS = Object.fromEntries(
  Object.entries(SCENARIOS).map(([k, v]) => [k, v.episodes]),
);
