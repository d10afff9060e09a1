// DOM glue. Everything interesting lives in the view-model modules; this
// file only moves render models into elements.

import { ApiClient } from "./api";
import { colorizeDiff } from "./diff";
import { SliderSpec, buildSliderSpecs } from "./sliders";
import {
  ComparisonModel,
  PaneModel,
  RequestSequencer,
  SessionState,
  applyIntervention,
  compareHistory,
  covariateTable,
  dataUrl,
  decodeComparisonHash,
  initialState,
  newSequencer,
} from "./state";
import { ApiError, SchemaError } from "./types";

export class Workbench {
  state: SessionState = initialState();
  specs: SliderSpec[] = [];
  private sequencer: RequestSequencer = newSequencer();

  constructor(
    private root: HTMLElement,
    private client: ApiClient,
  ) {}

  async start(): Promise<void> {
    this.root.innerHTML = `
      <header><h1>Counterfactual workbench</h1>
        <div id="banner" class="hidden"></div></header>
      <main>
        <section id="gallery"><h2>Observations</h2><div id="thumbs"></div></section>
        <section id="controls"><h2>Interventions</h2>
          <form id="sliders"></form>
          <button id="apply" type="button">Apply</button>
          <label><input type="checkbox" id="overlay" checked> diff overlay</label>
        </section>
        <section id="panes">
          <figure><img id="pane-original" alt="original"><figcaption>original</figcaption></figure>
          <figure><img id="pane-cf" alt="counterfactual"><figcaption>counterfactual</figcaption></figure>
          <figure><canvas id="pane-diff"></canvas>
            <figcaption>difference <span id="near-zero" class="hidden">(no visible change)</span></figcaption></figure>
        </section>
        <section id="table-section"><h2>Covariates</h2><table id="cov-table"></table></section>
        <section id="history-section"><h2>History</h2>
          <ol id="history"></ol>
          <div id="compare" class="hidden"></div></section>
      </main>`;
    try {
      this.state.modelInfo = await this.client.getModelInfo();
      this.specs = buildSliderSpecs(this.state.modelInfo);
      const page = await this.client.getObservations(0, 24);
      this.state.observations = page.records;
    } catch (error) {
      this.showBanner(bannerText(error), true);
      return;
    }
    if (this.state.observations.length === 0) {
      this.showBanner("dataset is empty: nothing to explore", false);
    }
    this.renderGallery();
    this.renderSliders();
    this.bind();
    this.restoreDeepLink();
  }

  private bind(): void {
    const apply = this.root.querySelector<HTMLButtonElement>("#apply")!;
    apply.addEventListener("click", () => void this.onApply());
    const overlay = this.root.querySelector<HTMLInputElement>("#overlay")!;
    overlay.addEventListener("change", () => {
      this.state.diffOverlay = overlay.checked;
      const pane = this.root.querySelector<HTMLElement>("#pane-diff")!;
      pane.style.display = overlay.checked ? "" : "none";
    });
  }

  private renderGallery(): void {
    const thumbs = this.root.querySelector<HTMLElement>("#thumbs")!;
    thumbs.innerHTML = "";
    for (const obs of this.state.observations) {
      const img = document.createElement("img");
      img.src = obs.thumbnail;
      img.title = Object.entries(obs.covariates)
        .map(([k, v]) => `${k}=${v.toFixed(1)}`)
        .join(" ");
      img.addEventListener("click", () => {
        this.state.selected = obs;
        thumbs.querySelectorAll("img").forEach((el) =>
          el.classList.remove("selected"),
        );
        img.classList.add("selected");
        this.renderSliders();
      });
      thumbs.appendChild(img);
    }
  }

  private renderSliders(): void {
    const form = this.root.querySelector<HTMLFormElement>("#sliders")!;
    form.innerHTML = "";
    for (const spec of this.specs) {
      const row = document.createElement("div");
      const observed = this.state.selected?.covariates[spec.name];
      row.innerHTML = `
        <label>${spec.name} (${spec.unit})
          <input type="number" name="${spec.name}" min="${spec.min}"
                 max="${spec.max}" step="${spec.step}"
                 value="${observed ?? ""}">
        </label><span class="error" data-for="${spec.name}"></span>`;
      form.appendChild(row);
    }
  }

  private async onApply(): Promise<void> {
    const form = this.root.querySelector<HTMLFormElement>("#sliders")!;
    const assignments: Record<string, number> = {};
    for (const spec of this.specs) {
      const input = form.querySelector<HTMLInputElement>(
        `input[name="${spec.name}"]`,
      );
      if (input && input.value !== "") {
        const observed = this.state.selected?.covariates[spec.name];
        const value = Number(input.value);
        if (observed === undefined || value !== observed) {
          assignments[spec.name] = value;
        }
      }
    }
    try {
      const outcome = await applyIntervention(
        this.state,
        this.specs,
        assignments,
        this.client,
        this.sequencer,
      );
      this.state = outcome.state;
      this.renderErrors();
      if (outcome.pane && !outcome.stale) {
        this.renderPanes(outcome.pane);
        this.renderTable();
        this.renderHistory();
      }
    } catch (error) {
      this.showBanner(bannerText(error), true);
    }
  }

  private renderErrors(): void {
    this.root.querySelectorAll<HTMLElement>(".error").forEach((span) => {
      const name = span.dataset.for ?? "";
      span.textContent = this.state.inlineErrors[name] ?? "";
    });
    const global = this.state.inlineErrors["_global"];
    if (global) this.showBanner(global, true);
  }

  private renderPanes(pane: PaneModel): void {
    this.root.querySelector<HTMLImageElement>("#pane-original")!.src =
      pane.originalSrc;
    this.root.querySelector<HTMLImageElement>("#pane-cf")!.src =
      pane.counterfactualSrc;
    const badge = this.root.querySelector<HTMLElement>("#near-zero")!;
    badge.classList.toggle("hidden", !pane.nearZeroDiff);
    if (pane.diffSrc) {
      void this.drawDiff(pane.diffSrc);
    }
  }

  private async drawDiff(diffSrc: string): Promise<void> {
    const canvas = this.root.querySelector<HTMLCanvasElement>("#pane-diff")!;
    const img = new Image();
    await new Promise<void>((resolve, reject) => {
      img.onload = () => resolve();
      img.onerror = () => reject(new Error("diff image failed to decode"));
      img.src = diffSrc;
    });
    canvas.width = img.width;
    canvas.height = img.height;
    const ctx = canvas.getContext("2d")!;
    ctx.drawImage(img, 0, 0);
    const pixels = ctx.getImageData(0, 0, img.width, img.height);
    const gray = new Uint8Array(pixels.data.length / 4);
    for (let i = 0; i < gray.length; i++) gray[i] = pixels.data[i * 4] ?? 128;
    pixels.data.set(colorizeDiff(gray));
    ctx.putImageData(pixels, 0, 0);
  }

  private renderTable(): void {
    if (!this.state.lastResponse) return;
    const table = this.root.querySelector<HTMLTableElement>("#cov-table")!;
    const rows = covariateTable(this.state.lastResponse);
    table.innerHTML =
      "<tr><th>variable</th><th>before</th><th>after</th></tr>" +
      rows
        .map(
          (r) =>
            `<tr class="${r.changed ? "changed" : ""}"><td>${r.name}</td>` +
            `<td>${r.before.toFixed(3)}</td><td>${r.after.toFixed(3)}</td></tr>`,
        )
        .join("");
  }

  private renderHistory(): void {
    const list = this.root.querySelector<HTMLOListElement>("#history")!;
    list.innerHTML = "";
    this.state.history.forEach((entry, index) => {
      const item = document.createElement("li");
      const label = Object.entries(entry.interventions)
        .map(([k, v]) => `do(${k}:=${v})`)
        .join(" ") || "null intervention";
      item.textContent = label;
      item.addEventListener("click", () => this.showComparison(index, index));
      list.appendChild(item);
    });
  }

  private showComparison(i: number, j: number): void {
    const model = compareHistory(this.state, i, j);
    const container = this.root.querySelector<HTMLElement>("#compare")!;
    if (!model) {
      container.classList.add("hidden");
      return;
    }
    container.classList.remove("hidden");
    container.innerHTML = "";
    for (const side of [model.left, model.right]) {
      const img = document.createElement("img");
      img.src = dataUrl(side.response.image_counterfactual);
      container.appendChild(img);
    }
    window.location.hash = `#compare=${i},${j}`;
  }

  private restoreDeepLink(): void {
    const pair = decodeComparisonHash(window.location.hash);
    if (pair) this.showComparison(pair[0], pair[1]);
  }

  private showBanner(text: string, isError: boolean): void {
    const banner = this.root.querySelector<HTMLElement>("#banner")!;
    banner.textContent = text;
    banner.className = isError ? "error-banner" : "info-banner";
  }
}

function bannerText(error: unknown): string {
  if (error instanceof SchemaError) return error.message;
  if (error instanceof ApiError) {
    return error.status === 503
      ? "service is starting up; retry shortly"
      : error.message;
  }
  return "service unreachable; retry shortly";
}

export function renderComparison(model: ComparisonModel): [string, string] {
  return [
    dataUrl(model.left.response.image_counterfactual),
    dataUrl(model.right.response.image_counterfactual),
  ];
}
