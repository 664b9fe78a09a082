/**
 * Figure builders for the three kinds, and file output.
 *
 * gp_transfer plots test-set log likelihood (the negated NLL records)
 * against the number of real fine-tuning tasks; baselines without a task
 * count become horizontal rules. station_world plots NLL and MAE against the
 * number of training times, one column per station count. artefacts plots
 * per-task sub-resolution roughness scores.
 */

import { readFileSync, writeFileSync } from "node:fs";

import { readArtefacts, readResults, ResultRow } from "./csv.js";
import { Panel, renderFigure, Series } from "./figure.js";
import { aggregateCi } from "./stats.js";

export type FigureKind = "gp_transfer" | "station_world" | "artefacts";

export interface FigureSpec {
  csvPath: string;
  kind: FigureKind;
  outPath: string;
  yMin?: number;
  yMax?: number;
}

function ok(rows: ResultRow[]): ResultRow[] {
  return rows.filter((r) => r.status === "ok");
}

function uniqueSorted(values: number[]): number[] {
  return [...new Set(values)].sort((a, b) => a - b);
}

function buildSeries(
  rows: ResultRow[],
  strategy: string,
  xs: number[],
  xOf: (r: ResultRow) => number | null,
  yOf: (r: ResultRow) => number
): Series {
  const points = [];
  for (const x of xs) {
    const group = rows.filter((r) => r.strategy === strategy && xOf(r) === x);
    if (group.length === 0) continue;
    const ci = aggregateCi(group.map(yOf));
    points.push({ x, mean: ci.mean, lo: ci.lo, hi: ci.hi });
  }
  return { label: strategy, points };
}

export function buildGpTransfer(rows: ResultRow[]): { panels: Panel[]; xLabel: string; yLabel: string } {
  const usable = ok(rows);
  // panels come from every condition present, so a condition whose runs all
  // failed still shows up, annotated "no data"
  const conditions = [...new Set(rows.map((r) => r.condition))].sort();
  const panels: Panel[] = conditions.map((condition) => {
    const sub = usable.filter((r) => r.condition === condition);
    const curveRows = sub.filter((r) => r.nTasks !== null);
    const xs = uniqueSorted(curveRows.map((r) => r.nTasks!));
    const strategies = [...new Set(curveRows.map((r) => r.strategy))].sort();
    const series = strategies.map((s) =>
      buildSeries(curveRows, s, xs, (r) => r.nTasks, (r) => -r.testNll)
    );
    const hlines = [...new Set(sub.filter((r) => r.nTasks === null).map((r) => r.strategy))]
      .sort()
      .map((s) => ({
        label: s,
        value: aggregateCi(
          sub.filter((r) => r.strategy === s && r.nTasks === null).map((r) => -r.testNll)
        ).mean,
      }));
    return { title: condition, series, hlines };
  });
  return { panels, xLabel: "N_tasks (real)", yLabel: "test log likelihood / point" };
}

export function buildStationWorld(rows: ResultRow[]): { panels: Panel[]; columns: number } {
  const usable = ok(rows);
  const stationCounts = uniqueSorted(usable.map((r) => r.nStations ?? -1)).filter((n) => n > 0);
  const metrics: Array<{ name: string; of: (r: ResultRow) => number }> = [
    { name: "test NLL / point", of: (r) => r.testNll },
    { name: "test MAE", of: (r) => r.testMae },
  ];
  const panels: Panel[] = [];
  for (const metric of metrics) {
    for (const nStations of stationCounts) {
      const sub = usable.filter((r) => r.nStations === nStations && r.nTimes !== null);
      const xs = uniqueSorted(sub.map((r) => r.nTimes!));
      const strategies = [...new Set(sub.map((r) => r.strategy))].sort();
      const series = strategies.map((s) =>
        buildSeries(sub, s, xs, (r) => r.nTimes, metric.of)
      );
      panels.push({ title: `N_stations=${nStations}: ${metric.name}`, series, hlines: [] });
    }
  }
  return { panels, columns: Math.max(1, stationCounts.length) };
}

export function buildArtefacts(csvText: string): Panel[] {
  const rows = readArtefacts(csvText);
  const points = rows.map((r) => ({ x: r.taskIndex, mean: r.score, lo: null, hi: null }));
  const mean = aggregateCi(rows.map((r) => r.score)).mean;
  return [
    {
      title: "sub-resolution roughness per task",
      series: [{ label: "score", points }],
      hlines: [{ label: "mean", value: mean }],
    },
  ];
}

export function renderSpec(spec: FigureSpec): string {
  const text = readFileSync(spec.csvPath, "utf-8");
  const yClamp: [number | null, number | null] | undefined =
    spec.yMin !== undefined || spec.yMax !== undefined
      ? [spec.yMin ?? null, spec.yMax ?? null]
      : undefined;
  if (spec.kind === "gp_transfer") {
    const { panels, xLabel, yLabel } = buildGpTransfer(readResults(text));
    return renderFigure(panels, { xLabel, yLabel, xLog: true, yClamp, columns: panels.length });
  }
  if (spec.kind === "station_world") {
    const { panels, columns } = buildStationWorld(readResults(text));
    return renderFigure(panels, {
      xLabel: "N_times (real)",
      yLabel: "",
      xLog: true,
      yClamp,
      columns,
    });
  }
  const panels = buildArtefacts(text);
  return renderFigure(panels, { xLabel: "task", yLabel: "score", xLog: false, yClamp });
}

/** Renders the SVG and writes image files; a .png target also writes the
 * sibling .svg it was rasterised from. Returns the written paths. */
export async function renderToFiles(spec: FigureSpec): Promise<string[]> {
  const svg = renderSpec(spec);
  const written: string[] = [];
  if (spec.outPath.endsWith(".png")) {
    const svgPath = spec.outPath.slice(0, -4) + ".svg";
    writeFileSync(svgPath, svg, "utf-8");
    written.push(svgPath);
    const { Resvg } = await import("@resvg/resvg-js");
    const png = new Resvg(svg, { fitTo: { mode: "zoom", value: 2 } }).render().asPng();
    writeFileSync(spec.outPath, png);
    written.push(spec.outPath);
  } else {
    writeFileSync(spec.outPath, svg, "utf-8");
    written.push(spec.outPath);
  }
  return written;
}
