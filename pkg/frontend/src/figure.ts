/**
 * Panel-grid figures: per-strategy lines with 95% confidence bands,
 * horizontal baseline rules, optional y-clamping with edge annotations.
 *
 * Every plotted mean carries its unrounded value in a data-mean attribute so
 * tests can check the figure against re-aggregated CSV values directly.
 */

import { linearScale, logPointScale, Scale } from "./scale.js";
import { el, escapeText, px, svgDocument } from "./svg.js";

export interface SeriesPoint {
  x: number;
  mean: number;
  lo: number | null;
  hi: number | null;
}

export interface Series {
  label: string;
  points: SeriesPoint[];
}

export interface HLine {
  label: string;
  value: number;
}

export interface Panel {
  title: string;
  series: Series[];
  hlines: HLine[];
}

export interface FigureOptions {
  xLabel: string;
  yLabel: string;
  xLog?: boolean;
  /** [min, max]; values outside are drawn at the edge and annotated. */
  yClamp?: [number | null, number | null];
  columns?: number;
  panelWidth?: number;
  panelHeight?: number;
}

const PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];
const MARGIN = { top: 34, right: 12, bottom: 44, left: 56 };

function colourFor(label: string, order: string[]): string {
  return PALETTE[order.indexOf(label) % PALETTE.length];
}

function dataExtent(panel: Panel, clamp?: [number | null, number | null]): [number, number] {
  const ys: number[] = [];
  for (const s of panel.series) {
    for (const p of s.points) {
      ys.push(p.mean);
      if (p.lo !== null) ys.push(p.lo);
      if (p.hi !== null) ys.push(p.hi);
    }
  }
  for (const h of panel.hlines) ys.push(h.value);
  let lo = Math.min(...ys);
  let hi = Math.max(...ys);
  if (clamp) {
    if (clamp[0] !== null) lo = Math.max(lo, clamp[0]);
    if (clamp[1] !== null) hi = Math.min(hi, clamp[1]);
  }
  if (!isFinite(lo) || !isFinite(hi)) {
    lo = 0;
    hi = 1;
  }
  const pad = (hi - lo || 1) * 0.08;
  return [lo - pad, hi + pad];
}

function clampInfo(
  v: number,
  clamp: [number | null, number | null] | undefined
): { value: number; clamped: boolean } {
  if (clamp) {
    if (clamp[0] !== null && v < clamp[0]) return { value: clamp[0], clamped: true };
    if (clamp[1] !== null && v > clamp[1]) return { value: clamp[1], clamped: true };
  }
  return { value: v, clamped: false };
}

function renderPanel(
  panel: Panel,
  labelOrder: string[],
  opts: FigureOptions,
  x0: number,
  y0: number,
  w: number,
  h: number
): string {
  const parts: string[] = [];
  const plotX = x0 + MARGIN.left;
  const plotY = y0 + MARGIN.top;
  const plotW = w - MARGIN.left - MARGIN.right;
  const plotH = h - MARGIN.top - MARGIN.bottom;

  parts.push(
    el("text", { x: x0 + w / 2, y: y0 + 16, "text-anchor": "middle", "font-size": 13, "font-weight": "bold" },
      escapeText(panel.title))
  );

  const hasPoints = panel.series.some((s) => s.points.length > 0);
  if (!hasPoints && panel.hlines.length === 0) {
    parts.push(
      el("rect", { x: plotX, y: plotY, width: plotW, height: plotH, fill: "none", stroke: "#999" }),
      el(
        "text",
        { x: plotX + plotW / 2, y: plotY + plotH / 2, "text-anchor": "middle", "font-size": 12,
          fill: "#666", "data-empty": "true" },
        "no data"
      )
    );
    return parts.join("");
  }

  const xs = panel.series.flatMap((s) => s.points.map((p) => p.x));
  const xScale: Scale = opts.xLog
    ? logPointScale(xs.length ? xs : [1, 2], [plotX, plotX + plotW])
    : linearScale(
        [Math.min(...(xs.length ? xs : [0])), Math.max(...(xs.length ? xs : [1]))],
        [plotX, plotX + plotW]
      );
  const [yLo, yHi] = dataExtent(panel, opts.yClamp);
  const yScale = linearScale([yLo, yHi], [plotY + plotH, plotY]);

  parts.push(el("rect", { x: plotX, y: plotY, width: plotW, height: plotH, fill: "none", stroke: "#333" }));
  for (const t of yScale.ticks) {
    const y = yScale(t);
    parts.push(
      el("line", { x1: plotX, y1: y, x2: plotX + plotW, y2: y, stroke: "#ddd" }),
      el("text", { x: plotX - 6, y: y + 4, "text-anchor": "end", "font-size": 10 }, String(t))
    );
  }
  for (const t of xScale.ticks) {
    const x = xScale(t);
    parts.push(
      el("line", { x1: x, y1: plotY + plotH, x2: x, y2: plotY + plotH + 4, stroke: "#333" }),
      el("text", { x, y: plotY + plotH + 16, "text-anchor": "middle", "font-size": 10 }, String(t))
    );
  }
  parts.push(
    el("text", { x: plotX + plotW / 2, y: y0 + h - 8, "text-anchor": "middle", "font-size": 11 },
      escapeText(opts.xLabel)),
    el(
      "text",
      { x: x0 + 14, y: plotY + plotH / 2, "font-size": 11, "text-anchor": "middle",
        transform: `rotate(-90 ${px(x0 + 14)} ${px(plotY + plotH / 2)})` },
      escapeText(opts.yLabel)
    )
  );

  for (const hline of panel.hlines) {
    const { value, clamped } = clampInfo(hline.value, opts.yClamp);
    const y = yScale(value);
    const colour = colourFor(hline.label, labelOrder);
    parts.push(
      el("line", {
        x1: plotX, y1: y, x2: plotX + plotW, y2: y,
        stroke: colour, "stroke-dasharray": "5 3", "stroke-width": 1.2,
        "data-hline": hline.label, "data-value": String(hline.value),
        "data-clamped": String(clamped),
      })
    );
    if (clamped) {
      parts.push(
        el(
          "text",
          { x: plotX + plotW - 4, y: y - 4, "text-anchor": "end", "font-size": 9, fill: colour,
            "data-clamp-note": hline.label },
          `${hline.label} = ${hline.value.toPrecision(3)} (clamped)`
        )
      );
    }
  }

  for (const series of panel.series) {
    const colour = colourFor(series.label, labelOrder);
    const pts = [...series.points].sort((a, b) => a.x - b.x);
    const band = pts.filter((p) => p.lo !== null && p.hi !== null);
    if (band.length > 1) {
      const top = band.map((p) => `${px(xScale(p.x))},${px(yScale(clampInfo(p.hi!, opts.yClamp).value))}`);
      const bottom = [...band]
        .reverse()
        .map((p) => `${px(xScale(p.x))},${px(yScale(clampInfo(p.lo!, opts.yClamp).value))}`);
      parts.push(
        el("polygon", {
          points: [...top, ...bottom].join(" "),
          fill: colour, opacity: 0.15, "data-band": series.label,
        })
      );
    }
    const line = pts
      .map((p) => `${px(xScale(p.x))},${px(yScale(clampInfo(p.mean, opts.yClamp).value))}`)
      .join(" ");
    if (pts.length > 1) {
      parts.push(
        el("polyline", { points: line, fill: "none", stroke: colour, "stroke-width": 1.6,
          "data-series": series.label })
      );
    }
    for (const p of pts) {
      const { value, clamped } = clampInfo(p.mean, opts.yClamp);
      parts.push(
        el("circle", {
          cx: xScale(p.x), cy: yScale(value), r: 2.6, fill: colour,
          "data-series": series.label, "data-x": String(p.x), "data-mean": String(p.mean),
          "data-clamped": String(clamped),
        })
      );
      if (clamped) {
        parts.push(
          el(
            "text",
            { x: xScale(p.x), y: yScale(value) - 6, "text-anchor": "middle", "font-size": 9,
              fill: colour, "data-clamp-note": series.label },
            `${p.mean.toPrecision(3)} (clamped)`
          )
        );
      }
    }
  }
  return parts.join("");
}

export function renderFigure(panels: Panel[], opts: FigureOptions): string {
  const panelW = opts.panelWidth ?? 320;
  const panelH = opts.panelHeight ?? 260;
  const columns = Math.max(1, Math.min(opts.columns ?? panels.length, panels.length));
  const rows = Math.ceil(panels.length / columns);
  const legendH = 26;
  const width = columns * panelW;
  const height = rows * panelH + legendH;

  const labelOrder = [
    ...new Set(
      panels.flatMap((p) => [...p.series.map((s) => s.label), ...p.hlines.map((h) => h.label)])
    ),
  ];

  const parts: string[] = [];
  panels.forEach((panel, i) => {
    const col = i % columns;
    const row = Math.floor(i / columns);
    parts.push(renderPanel(panel, labelOrder, opts, col * panelW, row * panelH, panelW, panelH));
  });

  let lx = 16;
  const ly = rows * panelH + 16;
  for (const label of labelOrder) {
    const colour = colourFor(label, labelOrder);
    parts.push(
      el("line", { x1: lx, y1: ly, x2: lx + 18, y2: ly, stroke: colour, "stroke-width": 2 }),
      el("text", { x: lx + 22, y: ly + 4, "font-size": 11, "data-legend": label }, escapeText(label))
    );
    lx += 28 + label.length * 7;
  }
  return svgDocument(width, height, parts);
}
