/** DOM wiring for the intervention console. All numbers on screen come
 * straight from the last /predict response; this file only formats them.
 */

import { ApiClient } from "./api.js";
import { SessionStore } from "./state.js";
import { SortKey, deltaClass, formatDelta, formatProbability, groupSections, sortRows } from "./view.js";

const client = new ApiClient();
const store = new SessionStore(client);

const banner = document.getElementById("banner") as HTMLDivElement;
const bannerText = document.getElementById("banner-text") as HTMLSpanElement;
const retryButton = document.getElementById("retry") as HTMLButtonElement;
const picker = document.getElementById("sample") as HTMLSelectElement;
const sortSelect = document.getElementById("sort") as HTMLSelectElement;
const resetButton = document.getElementById("reset") as HTMLButtonElement;
const table = document.getElementById("labels") as HTMLDivElement;
const toast = document.getElementById("toast") as HTMLDivElement;
const spinner = document.getElementById("busy") as HTMLSpanElement;

let catalogInfo: Awaited<ReturnType<SessionStore["loadCatalog"]>>["info"] | null = null;
let openSections = new Set<string>();
let toastTimer: number | undefined;

const STATE_SYMBOL: Record<string, string> = {
  unknown: "?",
  positive: "+",
  negative: "−",
};

function showToast(message: string): void {
  toast.textContent = message;
  toast.classList.add("visible");
  window.clearTimeout(toastTimer);
  toastTimer = window.setTimeout(() => toast.classList.remove("visible"), 4000);
}

function renderRows(): void {
  if (catalogInfo === null) return;
  spinner.classList.toggle("visible", store.requestInFlight);
  if (store.lastError !== null) {
    showToast(store.lastError);
  }
  const rows = store.rows();
  if (rows.length === 0) {
    table.innerHTML = "<p class=\"hint\">Pick a sample to see predictions.</p>";
    return;
  }
  const byName = new Map(rows.map((row) => [row.name, row]));
  const key = sortSelect.value as SortKey;
  table.innerHTML = "";
  for (const section of groupSections(catalogInfo)) {
    const sectionRows = sortRows(
      section.labelNames.map((name) => byName.get(name)!).filter(Boolean), key);
    const container = document.createElement(section.collapsible ? "details" : "section");
    if (container instanceof HTMLDetailsElement) {
      container.open = openSections.has(section.title);
      container.addEventListener("toggle", () => {
        if ((container as HTMLDetailsElement).open) openSections.add(section.title);
        else openSections.delete(section.title);
      });
      const summary = document.createElement("summary");
      summary.textContent = `${section.title} (${sectionRows.length})`;
      container.appendChild(summary);
    } else {
      const heading = document.createElement("h2");
      heading.textContent = section.title;
      container.appendChild(heading);
    }
    for (const row of sectionRows) {
      const div = document.createElement("div");
      div.className = `row state-${row.state}`;
      const button = document.createElement("button");
      button.className = "tristate";
      button.title = `state: ${row.state} (click to cycle)`;
      button.textContent = STATE_SYMBOL[row.state];
      button.addEventListener("click", () => {
        void store.cycleState(row.name);
      });
      const name = document.createElement("span");
      name.className = "name";
      name.textContent = row.name;
      const bar = document.createElement("span");
      bar.className = "bar";
      const fill = document.createElement("span");
      fill.className = "fill";
      fill.style.width = `${(row.current * 100).toFixed(1)}%`;
      bar.appendChild(fill);
      const prob = document.createElement("span");
      prob.className = "prob";
      prob.textContent = formatProbability(row.current);
      const delta = document.createElement("span");
      delta.className = `delta ${deltaClass(row.delta)}`;
      delta.textContent = formatDelta(row.delta);
      div.append(button, name, bar, prob, delta);
      container.appendChild(div);
    }
    table.appendChild(container);
  }
}

async function boot(): Promise<void> {
  banner.classList.remove("visible");
  try {
    const catalog = await store.loadCatalog();
    catalogInfo = catalog.info;
    openSections = new Set(groupSections(catalog.info)
      .filter((s) => s.collapsible).map((s) => s.title));
  } catch (err) {
    bannerText.textContent =
      `Cannot reach the intervention service: ${err instanceof Error ? err.message : err}`;
    banner.classList.add("visible");
    return;
  }
  picker.innerHTML = "";
  if (store.samples.length === 0) {
    picker.disabled = true;
    const option = document.createElement("option");
    option.textContent = "no samples available";
    picker.appendChild(option);
    table.innerHTML = "<p class=\"hint\">The service reports no demo samples.</p>";
    return;
  }
  picker.disabled = false;
  for (const sample of store.samples) {
    const option = document.createElement("option");
    option.value = sample.id;
    option.textContent = `${sample.id} (${sample.targets.reduce((a, b) => a + b, 0)} positive)`;
    picker.appendChild(option);
  }
  await store.selectSample(store.samples[0].id);
}

store.subscribe(renderRows);
picker.addEventListener("change", () => {
  void store.selectSample(picker.value);
});
sortSelect.addEventListener("change", renderRows);
resetButton.addEventListener("click", () => {
  void store.resetAll();
});
retryButton.addEventListener("click", () => {
  void boot();
});

void boot();
