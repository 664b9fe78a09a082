import { mkdtempSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { readResults } from "../src/csv.js";
import { FigureKind, renderSpec } from "../src/render.js";

export { buildGpTransfer, buildStationWorld } from "../src/render.js";

export function renderSpecText(
  csvText: string,
  kind: FigureKind,
  opts: { yMin?: number; yMax?: number }
): string {
  const dir = mkdtempSync(join(tmpdir(), "plots-"));
  const csvPath = join(dir, "results.csv");
  writeFileSync(csvPath, csvText, "utf-8");
  return renderSpec({ csvPath, kind, outPath: join(dir, "fig.svg"), ...opts });
}

export { readResults };
