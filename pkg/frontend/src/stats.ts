/** Replicate aggregation: mean with a 1.96 * sem 95% confidence interval. */

export interface CI {
  mean: number;
  lo: number | null;
  hi: number | null;
  n: number;
}

export function aggregateCi(values: number[]): CI {
  if (values.length === 0) {
    throw new Error("aggregateCi needs at least one value");
  }
  const n = values.length;
  const mean = values.reduce((a, b) => a + b, 0) / n;
  if (n < 2) {
    return { mean, lo: null, hi: null, n };
  }
  const variance = values.reduce((a, b) => a + (b - mean) ** 2, 0) / (n - 1);
  const half = (1.96 * Math.sqrt(variance)) / Math.sqrt(n);
  return { mean, lo: mean - half, hi: mean + half, n };
}
