/**
 * Canonical tag-file serialization.
 *
 * Mirrors the toolkit's provenance-free canonical form byte for byte:
 * recursively sorted object keys, no whitespace, tag indices ascending,
 * slices ascending by index.
 */

import type { GridInfo } from "./api";

export const FORMAT_TAG = "weakvessel-tags/1";

export interface SliceSelection {
  grid: GridInfo;
  cells: Set<number>;
}

/** JSON.stringify with object keys emitted in sorted order at every level. */
export function canonicalJson(value: unknown): string {
  if (value === null || typeof value !== "object") {
    return JSON.stringify(value);
  }
  if (Array.isArray(value)) {
    return `[${value.map(canonicalJson).join(",")}]`;
  }
  const obj = value as Record<string, unknown>;
  const keys = Object.keys(obj).sort();
  const body = keys.map((k) => `${JSON.stringify(k)}:${canonicalJson(obj[k])}`);
  return `{${body.join(",")}}`;
}

export function buildTagDocument(
  volumeId: string,
  patchSize: number,
  slices: Map<number, SliceSelection>,
): Record<string, unknown> {
  const indices = [...slices.keys()].sort((a, b) => a - b);
  return {
    format: FORMAT_TAG,
    volume_id: volumeId,
    patch_size: patchSize,
    slices: indices.map((index) => {
      const sel = slices.get(index)!;
      return {
        index,
        grid: {
          slice_shape: [...sel.grid.slice_shape],
          offsets: sel.grid.offsets.map((o) => [...o]),
        },
        tags: [...sel.cells].sort((a, b) => a - b),
      };
    }),
  };
}

/** Canonical byte form of a whole-volume tag file. */
export function canonicalTagBytes(
  volumeId: string,
  patchSize: number,
  slices: Map<number, SliceSelection>,
): string {
  return canonicalJson(buildTagDocument(volumeId, patchSize, slices));
}
