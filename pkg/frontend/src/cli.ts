#!/usr/bin/env node
/**
 * sim2real-plots render --csv <path> --kind gp_transfer|station_world|artefacts
 *                       --out fig.svg|fig.png [--y-min v] [--y-max v]
 *
 * Exit codes: 0 success, 1 usage error, 2 runtime failure.
 */

import { realpathSync } from "node:fs";
import { pathToFileURL } from "node:url";

import { FigureKind, FigureSpec, renderToFiles } from "./render.js";

const USAGE =
  "usage: sim2real-plots render --csv <path> --kind gp_transfer|station_world|artefacts " +
  "--out <fig.svg|fig.png> [--y-min v] [--y-max v]";

export function parseArgs(argv: string[]): FigureSpec {
  if (argv[0] !== "render") {
    throw new UsageError(`unknown command ${argv[0] ?? "<none>"}`);
  }
  const flags = new Map<string, string>();
  for (let i = 1; i < argv.length; i += 2) {
    const key = argv[i];
    const value = argv[i + 1];
    if (!key.startsWith("--") || value === undefined) {
      throw new UsageError(`expected --flag value pairs, got ${key}`);
    }
    flags.set(key.slice(2), value);
  }
  for (const required of ["csv", "kind", "out"]) {
    if (!flags.has(required)) {
      throw new UsageError(`missing --${required}`);
    }
  }
  const kind = flags.get("kind")!;
  if (!["gp_transfer", "station_world", "artefacts"].includes(kind)) {
    throw new UsageError(`unknown kind ${kind}`);
  }
  const spec: FigureSpec = {
    csvPath: flags.get("csv")!,
    kind: kind as FigureKind,
    outPath: flags.get("out")!,
  };
  if (flags.has("y-min")) spec.yMin = parseFloat(flags.get("y-min")!);
  if (flags.has("y-max")) spec.yMax = parseFloat(flags.get("y-max")!);
  return spec;
}

export class UsageError extends Error {}

async function main(): Promise<number> {
  try {
    const spec = parseArgs(process.argv.slice(2));
    const written = await renderToFiles(spec);
    for (const path of written) {
      console.log(`wrote ${path}`);
    }
    return 0;
  } catch (err) {
    if (err instanceof UsageError) {
      console.error(USAGE);
      console.error(`error: ${err.message}`);
      return 1;
    }
    console.error(`error: ${(err as Error).message}`);
    return 2;
  }
}

const invokedDirectly = (() => {
  if (!process.argv[1]) return false;
  try {
    return import.meta.url === pathToFileURL(realpathSync(process.argv[1])).href;
  } catch {
    return false;
  }
})();
if (invokedDirectly) {
  main().then((code) => process.exit(code));
}
