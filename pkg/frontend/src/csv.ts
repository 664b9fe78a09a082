/**
 * Strict readers for the toolkit's CSV outputs. Values never contain commas
 * or quotes (they are numbers, identifiers and `key=value` condition labels),
 * so splitting on commas is exact.
 */

export interface Table {
  header: string[];
  rows: string[][];
}

export function parseCsv(text: string): Table {
  const lines = text.split(/\r?\n/).filter((l) => l.length > 0);
  if (lines.length === 0) {
    throw new Error("empty CSV");
  }
  const header = lines[0].split(",");
  const rows = lines.slice(1).map((l) => l.split(","));
  for (const [i, row] of rows.entries()) {
    if (row.length !== header.length) {
      throw new Error(`CSV row ${i + 2} has ${row.length} fields, expected ${header.length}`);
    }
  }
  return { header, rows };
}

export const RESULTS_COLUMNS = [
  "kind",
  "condition",
  "strategy",
  "n_tasks",
  "n_stations",
  "n_times",
  "replicate",
  "test_nll",
  "test_mae",
  "oracle_nll",
  "status",
] as const;

export interface ResultRow {
  kind: string;
  condition: string;
  strategy: string;
  nTasks: number | null;
  nStations: number | null;
  nTimes: number | null;
  replicate: number;
  testNll: number;
  testMae: number;
  oracleNll: number | null;
  status: string;
}

function optInt(v: string): number | null {
  return v === "" ? null : parseInt(v, 10);
}

function optFloat(v: string): number | null {
  return v === "" ? null : parseFloat(v);
}

export function checkColumns(header: string[], required: readonly string[]): void {
  const missing = required.filter((c) => !header.includes(c));
  if (missing.length > 0) {
    throw new Error(`results CSV is missing columns: ${missing.join(", ")}`);
  }
}

export function readResults(text: string): ResultRow[] {
  const { header, rows } = parseCsv(text);
  checkColumns(header, RESULTS_COLUMNS);
  const col = new Map(header.map((h, i) => [h, i]));
  const get = (row: string[], name: string) => row[col.get(name)!];
  return rows.map((row) => ({
    kind: get(row, "kind"),
    condition: get(row, "condition"),
    strategy: get(row, "strategy"),
    nTasks: optInt(get(row, "n_tasks")),
    nStations: optInt(get(row, "n_stations")),
    nTimes: optInt(get(row, "n_times")),
    replicate: parseInt(get(row, "replicate"), 10),
    testNll: parseFloat(get(row, "test_nll")),
    testMae: parseFloat(get(row, "test_mae")),
    oracleNll: optFloat(get(row, "oracle_nll")),
    status: get(row, "status"),
  }));
}

export const ARTEFACT_COLUMNS = ["task_index", "time_id", "score"] as const;

export interface ArtefactRow {
  taskIndex: number;
  timeId: number;
  score: number;
}

export function readArtefacts(text: string): ArtefactRow[] {
  const { header, rows } = parseCsv(text);
  checkColumns(header, ARTEFACT_COLUMNS);
  const col = new Map(header.map((h, i) => [h, i]));
  return rows.map((row) => ({
    taskIndex: parseInt(row[col.get("task_index")!], 10),
    timeId: parseInt(row[col.get("time_id")!], 10),
    score: parseFloat(row[col.get("score")!]),
  }));
}
