/** Pure presentation helpers: formatting, sorting, and grouping of label
 * rows. Kept DOM-free so they are directly unit-testable.
 */

import { ModelInfo } from "./api.js";
import { LabelRow } from "./state.js";

export type SortKey = "probability" | "delta";

/** Probabilities render to exactly 3 decimals; the underlying value is
 * never altered. */
export function formatProbability(p: number): string {
  return p.toFixed(3);
}

export function formatDelta(delta: number): string {
  const text = Math.abs(delta).toFixed(3);
  if (delta > 0) return `+${text}`;
  if (delta < 0) return `-${text}`;
  return text;
}

export function deltaClass(delta: number): "up" | "down" | "flat" {
  if (delta > 0) return "up";
  if (delta < 0) return "down";
  return "flat";
}

/** Descending by current probability, or by |delta|; stable on ties. */
export function sortRows(rows: LabelRow[], key: SortKey): LabelRow[] {
  const keyed = rows.map((row, i) => ({ row, i }));
  const value = (r: LabelRow) => (key === "probability" ? r.current : Math.abs(r.delta));
  keyed.sort((a, b) => value(b.row) - value(a.row) || a.i - b.i);
  return keyed.map((k) => k.row);
}

export interface Section {
  title: string;
  /** Collapsible sections hold auxiliary group labels. */
  collapsible: boolean;
  labelNames: string[];
}

/** Group the label list into sections: one flat section without group
 * metadata, otherwise the target region plus one collapsible section per
 * auxiliary group. */
export function groupSections(info: ModelInfo): Section[] {
  if (!info.groups || info.target_count === null) {
    return [{ title: "labels", collapsible: false, labelNames: info.labels }];
  }
  const sections: Section[] = [{
    title: "target labels",
    collapsible: false,
    labelNames: info.labels.slice(0, info.target_count),
  }];
  for (const [name, indexes] of Object.entries(info.groups)) {
    sections.push({
      title: name,
      collapsible: true,
      labelNames: indexes.map((i) => info.labels[i]),
    });
  }
  return sections;
}
