/** Linear and log scales with simple tick selection. */

export interface Scale {
  (v: number): number;
  ticks: number[];
  domain: [number, number];
}

function niceStep(span: number, target: number): number {
  const raw = span / target;
  const mag = 10 ** Math.floor(Math.log10(raw));
  for (const m of [1, 2, 5, 10]) {
    if (raw <= m * mag) return m * mag;
  }
  return 10 * mag;
}

export function linearScale(domain: [number, number], range: [number, number], tickCount = 5): Scale {
  let [d0, d1] = domain;
  if (d0 === d1) {
    d0 -= 1;
    d1 += 1;
  }
  const f = (v: number) => range[0] + ((v - d0) / (d1 - d0)) * (range[1] - range[0]);
  const step = niceStep(d1 - d0, tickCount);
  const ticks: number[] = [];
  for (let t = Math.ceil(d0 / step) * step; t <= d1 + 1e-12; t += step) {
    ticks.push(Number(t.toPrecision(12)));
  }
  return Object.assign(f, { ticks, domain: [d0, d1] as [number, number] });
}

/** Log scale whose ticks are exactly the distinct data positions. */
export function logPointScale(points: number[], range: [number, number]): Scale {
  const uniq = [...new Set(points)].sort((a, b) => a - b);
  if (uniq.some((p) => p <= 0)) {
    throw new Error("log scale needs positive values");
  }
  let lo = Math.log(uniq[0]);
  let hi = Math.log(uniq[uniq.length - 1]);
  if (lo === hi) {
    lo -= 1;
    hi += 1;
  }
  const f = (v: number) => range[0] + ((Math.log(v) - lo) / (hi - lo)) * (range[1] - range[0]);
  return Object.assign(f, { ticks: uniq, domain: [uniq[0], uniq[uniq.length - 1]] as [number, number] });
}
