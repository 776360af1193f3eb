/** Browser annotator: click vessel patches per slice, submit per slice. */

import { ApiClient, ConflictError, type VolumeInfo } from "./api";
import { fitZoom, render } from "./render";
import {
  beginStroke,
  canvasToImage,
  cellAtImagePoint,
  createViewState,
  isDirty,
  markSynced,
  mergeServerTags,
  paintCell,
  selectedCells,
  setSliceState,
  toggleCell,
  undo,
  type Stroke,
  type ViewState,
} from "./state";

const WINDOW_PRESETS: [number, number][] = [
  [0, 255],
  [0, 160],
  [80, 255],
];

const api = new ApiClient(
  (window as unknown as { WEAKVESSEL_API?: string }).WEAKVESSEL_API ?? "",
);

const canvas = document.getElementById("view") as HTMLCanvasElement;
const volumeSelect = document.getElementById("volume") as HTMLSelectElement;
const sliceLabel = document.getElementById("slice-label") as HTMLSpanElement;
const statusEl = document.getElementById("status") as HTMLSpanElement;
const dirtyEl = document.getElementById("dirty") as HTMLSpanElement;
const progressEl = document.getElementById("progress") as HTMLSpanElement;
const submitBtn = document.getElementById("submit") as HTMLButtonElement;
const conflictDialog = document.getElementById("conflict") as HTMLDialogElement;

let volumes: VolumeInfo[] = [];
let state: ViewState | null = null;
let sessionId: string | null = null;
let sliceImage: HTMLImageElement | null = null;
let stroke: Stroke | null = null;
let hoverCell: number | null = null;

function setStatus(message: string, isError = false): void {
  statusEl.textContent = message;
  statusEl.className = isError ? "error" : "";
}

function redraw(): void {
  if (!state) return;
  render({ canvas, image: sliceImage, state, hoverCell });
  sliceLabel.textContent = `slice ${state.sliceIndex + 1} / ${state.nSlices}`;
  dirtyEl.textContent = isDirty(state) ? "unsaved changes" : "saved";
  dirtyEl.className = isDirty(state) ? "dirty" : "clean";
}

function currentVolume(): VolumeInfo | null {
  return volumes.find((v) => v.id === volumeSelect.value) ?? null;
}

async function loadSlice(sliceIndex: number): Promise<void> {
  const vol = currentVolume();
  if (!vol || !state) return;
  if (isDirty(state) && !window.confirm("Discard unsaved changes on this slice?")) {
    return;
  }
  try {
    const [grid, tags] = await Promise.all([
      api.getGrid(vol.id, sliceIndex),
      api.getTags(vol.id, sliceIndex),
    ]);
    setSliceState(state, sliceIndex, grid, tags.tags, tags.version);
    const img = new Image();
    img.onload = () => redraw();
    img.onerror = () => setStatus("slice image failed to load", true);
    img.src = api.slicePngUrl(vol.id, sliceIndex, {
      min: state.windowMin,
      max: state.windowMax,
    });
    sliceImage = img;
    state.zoom = fitZoom(canvas, grid);
    state.panX = 0;
    state.panY = 0;
    setStatus(`loaded slice ${sliceIndex}`);
    redraw();
  } catch (err) {
    setStatus(`failed to load slice: ${String(err)}`, true);
  }
}

async function selectVolume(id: string): Promise<void> {
  const vol = volumes.find((v) => v.id === id);
  if (!vol) return;
  state = createViewState(vol.id, vol.n_slices);
  state.windowMin = vol.intensity_min;
  state.windowMax = vol.intensity_max;
  try {
    const session = await api.createSession(vol.id, "browser");
    sessionId = session.session_id;
  } catch {
    sessionId = null; // annotation still works without progress tracking
  }
  await loadSlice(0);
  void refreshProgress();
}

async function refreshProgress(): Promise<void> {
  if (!sessionId) return;
  try {
    const p = await api.progress(sessionId);
    progressEl.textContent = `${p.slices_annotated}/${p.n_slices} slices submitted`;
  } catch {
    progressEl.textContent = "";
  }
}

async function submit(): Promise<void> {
  const vol = currentVolume();
  if (!vol || !state) return;
  try {
    const saved = await api.putTags(
      vol.id,
      state.sliceIndex,
      selectedCells(state),
      state.version,
      sessionId ?? undefined,
    );
    markSynced(state, saved.tags, saved.version);
    setStatus(`saved slice ${state.sliceIndex} (version ${saved.version})`);
    redraw();
    void refreshProgress();
  } catch (err) {
    if (err instanceof ConflictError) {
      conflictDialog.returnValue = "";
      conflictDialog.showModal();
      conflictDialog.onclose = async () => {
        if (!state) return;
        if (conflictDialog.returnValue === "merge") {
          mergeServerTags(state, err.currentTags, err.currentVersion);
          redraw();
          await submit();
        } else if (conflictDialog.returnValue === "discard") {
          markSynced(state, err.currentTags, err.currentVersion);
          redraw();
        }
      };
      setStatus("another session updated this slice", true);
    } else {
      setStatus(`save failed: ${String(err)}`, true);
    }
  }
}

function cellUnderPointer(ev: PointerEvent): number | null {
  if (!state || !state.grid) return null;
  const rect = canvas.getBoundingClientRect();
  const x = ((ev.clientX - rect.left) * canvas.width) / rect.width;
  const y = ((ev.clientY - rect.top) * canvas.height) / rect.height;
  const [ix, iy] = canvasToImage(state, x, y);
  return cellAtImagePoint(state.grid, ix, iy);
}

canvas.addEventListener("pointerdown", (ev) => {
  if (!state) return;
  if (ev.shiftKey) return; // shift reserved for pan
  const cell = cellUnderPointer(ev);
  if (cell === null) return;
  stroke = beginStroke(state, cell);
  canvas.setPointerCapture(ev.pointerId);
  redraw();
});

canvas.addEventListener("pointermove", (ev) => {
  if (!state) return;
  const cell = cellUnderPointer(ev);
  if (stroke) {
    paintCell(state, stroke, cell);
    redraw();
  } else if (cell !== hoverCell) {
    hoverCell = cell;
    redraw();
  }
  if (ev.shiftKey && ev.buttons === 1) {
    state.panX += ev.movementX;
    state.panY += ev.movementY;
    redraw();
  }
});

canvas.addEventListener("pointerup", () => {
  stroke = null;
});

canvas.addEventListener(
  "wheel",
  (ev) => {
    if (!state) return;
    ev.preventDefault();
    const factor = ev.deltaY < 0 ? 1.15 : 1 / 1.15;
    const rect = canvas.getBoundingClientRect();
    const cx = ((ev.clientX - rect.left) * canvas.width) / rect.width;
    const cy = ((ev.clientY - rect.top) * canvas.height) / rect.height;
    state.panX = cx - (cx - state.panX) * factor;
    state.panY = cy - (cy - state.panY) * factor;
    state.zoom *= factor;
    redraw();
  },
  { passive: false },
);

window.addEventListener("keydown", (ev) => {
  if (!state) return;
  if (ev.key === "ArrowRight" || ev.key === "ArrowDown") {
    if (state.sliceIndex + 1 < state.nSlices) void loadSlice(state.sliceIndex + 1);
  } else if (ev.key === "ArrowLeft" || ev.key === "ArrowUp") {
    if (state.sliceIndex > 0) void loadSlice(state.sliceIndex - 1);
  } else if (ev.key === "Enter") {
    void submit();
  } else if ((ev.ctrlKey || ev.metaKey) && ev.key === "z") {
    undo(state);
    redraw();
  } else if (ev.key >= "1" && ev.key <= String(WINDOW_PRESETS.length)) {
    const vol = currentVolume();
    const preset = WINDOW_PRESETS[Number(ev.key) - 1];
    if (vol && preset) {
      const span = vol.intensity_max - vol.intensity_min;
      state.windowMin = vol.intensity_min + (span * preset[0]) / 255;
      state.windowMax = vol.intensity_min + (span * preset[1]) / 255;
      void loadSlice(state.sliceIndex);
    }
  }
});

submitBtn.addEventListener("click", () => void submit());
volumeSelect.addEventListener("change", () => void selectVolume(volumeSelect.value));

async function init(): Promise<void> {
  try {
    volumes = await api.listVolumes();
  } catch (err) {
    setStatus(`cannot reach annotation service: ${String(err)}`, true);
    return;
  }
  volumeSelect.replaceChildren(
    ...volumes.map((v) => {
      const opt = document.createElement("option");
      opt.value = v.id;
      opt.textContent = `${v.id} (${v.shape.join("x")})`;
      return opt;
    }),
  );
  if (volumes.length > 0) {
    const first = volumes[0];
    if (first) {
      volumeSelect.value = first.id;
      await selectVolume(first.id);
    }
  } else {
    setStatus("no volumes available", true);
  }
}

void init();
