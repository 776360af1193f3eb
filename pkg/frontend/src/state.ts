/** Annotation view state: selection, undo history, dirtiness, hit-testing. */

import type { GridInfo } from "./api";

export const UNDO_DEPTH = 24;

export interface ViewState {
  volumeId: string;
  sliceIndex: number;
  nSlices: number;
  zoom: number;
  panX: number;
  panY: number;
  windowMin: number;
  windowMax: number;
  grid: GridInfo | null;
  selected: Set<number>;
  /** Server-acknowledged selection and its version tag. */
  serverTags: Set<number>;
  version: number;
  undoStack: Set<number>[];
}

export function createViewState(volumeId: string, nSlices: number): ViewState {
  return {
    volumeId,
    sliceIndex: 0,
    nSlices,
    zoom: 1,
    panX: 0,
    panY: 0,
    windowMin: 0,
    windowMax: 255,
    grid: null,
    selected: new Set(),
    serverTags: new Set(),
    version: 0,
    undoStack: [],
  };
}

export function setSliceState(
  state: ViewState,
  sliceIndex: number,
  grid: GridInfo,
  serverTags: number[],
  version: number,
): void {
  state.sliceIndex = sliceIndex;
  state.grid = grid;
  state.selected = new Set(serverTags);
  state.serverTags = new Set(serverTags);
  state.version = version;
  state.undoStack = [];
}

/** Local selection differs from the last server-acknowledged state. */
export function isDirty(state: ViewState): boolean {
  if (state.selected.size !== state.serverTags.size) return true;
  for (const c of state.selected) if (!state.serverTags.has(c)) return true;
  return false;
}

function pushUndo(state: ViewState): void {
  state.undoStack.push(new Set(state.selected));
  while (state.undoStack.length > UNDO_DEPTH) state.undoStack.shift();
}

/** Toggle one cell (a click). Out-of-range indices are ignored. */
export function toggleCell(state: ViewState, cell: number | null): void {
  if (cell === null || state.grid === null) return;
  if (cell < 0 || cell >= state.grid.offsets.length) return;
  pushUndo(state);
  if (state.selected.has(cell)) state.selected.delete(cell);
  else state.selected.add(cell);
}

export interface Stroke {
  value: boolean;
  painted: Set<number>;
}

/** Start a drag-paint stroke: the first cell fixes the painted value. */
export function beginStroke(state: ViewState, cell: number | null): Stroke | null {
  if (cell === null || state.grid === null) return null;
  if (cell < 0 || cell >= state.grid.offsets.length) return null;
  pushUndo(state);
  const value = !state.selected.has(cell);
  const stroke: Stroke = { value, painted: new Set() };
  paintCell(state, stroke, cell);
  return stroke;
}

/** Paint one more cell during a stroke with the stroke's fixed value. */
export function paintCell(state: ViewState, stroke: Stroke, cell: number | null): void {
  if (cell === null || state.grid === null) return;
  if (cell < 0 || cell >= state.grid.offsets.length) return;
  if (stroke.painted.has(cell)) return;
  stroke.painted.add(cell);
  if (stroke.value) state.selected.add(cell);
  else state.selected.delete(cell);
}

export function undo(state: ViewState): void {
  const prev = state.undoStack.pop();
  if (prev) state.selected = prev;
}

/** Record a successful submit. */
export function markSynced(state: ViewState, tags: number[], version: number): void {
  state.serverTags = new Set(tags);
  state.selected = new Set(tags);
  state.version = version;
}

/** Merge a newer server state into the local selection (union). */
export function mergeServerTags(state: ViewState, serverTags: number[], version: number): void {
  pushUndo(state);
  for (const c of serverTags) state.selected.add(c);
  state.serverTags = new Set(serverTags);
  state.version = version;
}

export function selectedCells(state: ViewState): number[] {
  return [...state.selected].sort((a, b) => a - b);
}

/** Canvas coordinates -> image coordinates under the current zoom/pan. */
export function canvasToImage(state: ViewState, x: number, y: number): [number, number] {
  return [(x - state.panX) / state.zoom, (y - state.panY) / state.zoom];
}

/**
 * Cell under an image-space point. Overlapping final tiles can both contain
 * the point; the cell whose center is nearest wins, so hits are unambiguous.
 */
export function cellAtImagePoint(grid: GridInfo, ix: number, iy: number): number | null {
  // image x runs along columns, y along rows
  const p = grid.patch_size;
  let best: number | null = null;
  let bestDist = Infinity;
  for (let k = 0; k < grid.offsets.length; k++) {
    const off = grid.offsets[k];
    if (!off) continue;
    const [r, c] = off;
    if (iy < r || iy >= r + p || ix < c || ix >= c + p) continue;
    const dy = iy - (r + p / 2);
    const dx = ix - (c + p / 2);
    const d = dx * dx + dy * dy;
    if (d < bestDist) {
      bestDist = d;
      best = k;
    }
  }
  return best;
}

/** Offsets where the final tile overlaps its predecessor (seam positions). */
export function overlapSeams(grid: GridInfo): { rows: number[]; cols: number[] } {
  const rows = [...new Set(grid.offsets.map((o) => o[0]))].sort((a, b) => a - b);
  const cols = [...new Set(grid.offsets.map((o) => o[1]))].sort((a, b) => a - b);
  const seamRows: number[] = [];
  const seamCols: number[] = [];
  for (let i = 1; i < rows.length; i++) {
    const prev = rows[i - 1]!;
    const cur = rows[i]!;
    if (cur - prev < grid.patch_size) seamRows.push(cur);
  }
  for (let i = 1; i < cols.length; i++) {
    const prev = cols[i - 1]!;
    const cur = cols[i]!;
    if (cur - prev < grid.patch_size) seamCols.push(cur);
  }
  return { rows: seamRows, cols: seamCols };
}
