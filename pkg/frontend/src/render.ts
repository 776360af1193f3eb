/** Canvas rendering: slice image, grid overlay, selection, seam markers. */

import type { GridInfo } from "./api";
import { overlapSeams, type ViewState } from "./state";

export interface RenderInputs {
  canvas: HTMLCanvasElement;
  image: HTMLImageElement | null;
  state: ViewState;
  hoverCell: number | null;
}

export function render({ canvas, image, state, hoverCell }: RenderInputs): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  ctx.setTransform(1, 0, 0, 1, 0, 0);
  ctx.fillStyle = "#14161a";
  ctx.fillRect(0, 0, canvas.width, canvas.height);
  ctx.setTransform(state.zoom, 0, 0, state.zoom, state.panX, state.panY);
  ctx.imageSmoothingEnabled = false;

  if (image && image.complete && image.naturalWidth > 0) {
    ctx.drawImage(image, 0, 0);
  }
  const grid = state.grid;
  if (!grid || grid.empty) return;

  const p = grid.patch_size;
  // selected cells
  ctx.fillStyle = "rgba(255, 170, 0, 0.28)";
  for (const cell of state.selected) {
    const off = grid.offsets[cell];
    if (!off) continue;
    const [r, c] = off;
    ctx.fillRect(c, r, p, p);
  }
  if (hoverCell !== null) {
    const off = grid.offsets[hoverCell];
    if (off) {
      ctx.fillStyle = "rgba(120, 190, 255, 0.18)";
      ctx.fillRect(off[1], off[0], p, p);
    }
  }

  // grid lines per tile
  ctx.lineWidth = 1 / state.zoom;
  ctx.strokeStyle = "rgba(140, 150, 160, 0.8)";
  for (const [r, c] of grid.offsets) {
    ctx.strokeRect(c, r, p, p);
  }

  // overlapping final tiles get a distinct seam marker
  const seams = overlapSeams(grid);
  ctx.strokeStyle = "rgba(255, 80, 80, 0.9)";
  ctx.setLineDash([4 / state.zoom, 3 / state.zoom]);
  const [h, w] = grid.slice_shape;
  for (const r of seams.rows) {
    ctx.beginPath();
    ctx.moveTo(0, r);
    ctx.lineTo(w, r);
    ctx.stroke();
  }
  for (const c of seams.cols) {
    ctx.beginPath();
    ctx.moveTo(c, 0);
    ctx.lineTo(c, h);
    ctx.stroke();
  }
  ctx.setLineDash([]);
}

export function fitZoom(canvas: HTMLCanvasElement, grid: GridInfo | null): number {
  if (!grid) return 1;
  const [h, w] = grid.slice_shape;
  return Math.min(canvas.width / w, canvas.height / h);
}
