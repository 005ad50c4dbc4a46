/**
 * Editor application: wires the layer model and API client to the DOM.
 *
 * The canvas pair is locked to the service checkpoint resolution read
 * from healthz; the zoom slider only scales the displayed stack. Every
 * composited pixel shown in the base canvas came back from the server,
 * the client never blends edits locally.
 */

import { EditClient, ApiError, DirectionInfo, HistoryStep, AttrStep } from "./api.js";
import { LayerStack, LayerName, LAYER_NAMES } from "./layers.js";
import { decodePng } from "./png.js";
import { SEMANTIC_LABELS, labelColorCss } from "./palette.js";

type Tool = LayerName | "mask-eraser";

function el<T extends HTMLElement>(doc: Document, id: string): T {
  const node = doc.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function hexToRgb(hex: string): [number, number, number] {
  const v = parseInt(hex.replace("#", ""), 16);
  return [(v >> 16) & 0xff, (v >> 8) & 0xff, v & 0xff];
}

export class EditorApp {
  private readonly doc: Document;
  private client: EditClient | null = null;
  private sessionId: string | null = null;
  private resolution = 0;
  private layers: LayerStack | null = null;
  private tool: Tool = "mask";
  private brushRadius = 6;
  private semanticLabel = 17; // hair
  private paintRgb: [number, number, number] = [200, 100, 50];
  private sliderValues = new Map<string, number>();
  private directions: DirectionInfo[] = [];
  /** step output_hash -> data URL of that step's PNG */
  private readonly thumbCache = new Map<string, string>();
  private historySteps: HistoryStep[] = [];
  private painting = false;
  private lastX = 0;
  private lastY = 0;

  constructor(doc: Document) {
    this.doc = doc;
    this.bindStaticControls();
  }

  // ------------------------------------------------------------- DOM refs

  private get baseCanvas(): HTMLCanvasElement {
    return el<HTMLCanvasElement>(this.doc, "base");
  }

  private get overlayCanvas(): HTMLCanvasElement {
    return el<HTMLCanvasElement>(this.doc, "overlay");
  }

  private setStatus(message: string, isError = false): void {
    const bar = el<HTMLDivElement>(this.doc, "status");
    bar.textContent = message;
    bar.className = isError ? "panel error" : "panel";
  }

  private bindStaticControls(): void {
    const doc = this.doc;
    el<HTMLButtonElement>(doc, "connect").addEventListener("click", () => {
      void this.connect(el<HTMLInputElement>(doc, "service-url").value);
    });
    el<HTMLInputElement>(doc, "base-file").addEventListener("change", (ev) => {
      const input = ev.target as HTMLInputElement;
      const file = input.files && input.files[0];
      if (file) void this.loadBaseImage(file);
    });
    for (const radio of Array.from(
      doc.querySelectorAll<HTMLInputElement>('input[name="tool"]'),
    )) {
      radio.addEventListener("change", () => {
        if (radio.checked) this.tool = radio.value as Tool;
      });
    }
    const size = el<HTMLInputElement>(doc, "brush-size");
    size.addEventListener("input", () => {
      this.brushRadius = Number(size.value);
      el<HTMLSpanElement>(doc, "brush-size-val").textContent = size.value;
    });
    const labelSel = el<HTMLSelectElement>(doc, "semantic-label");
    for (const label of SEMANTIC_LABELS) {
      const opt = doc.createElement("option");
      opt.value = String(label.index);
      opt.textContent = `${label.index} ${label.name}`;
      opt.style.background = labelColorCss(label.index);
      labelSel.appendChild(opt);
    }
    labelSel.value = String(this.semanticLabel);
    labelSel.addEventListener("change", () => {
      this.semanticLabel = Number(labelSel.value);
    });
    el<HTMLInputElement>(doc, "swatch").addEventListener("input", (ev) => {
      this.paintRgb = hexToRgb((ev.target as HTMLInputElement).value);
    });
    for (const layer of LAYER_NAMES) {
      el<HTMLInputElement>(doc, `vis-${layer}`).addEventListener("change", (ev) => {
        if (this.layers) {
          this.layers.visible[layer] = (ev.target as HTMLInputElement).checked;
          this.renderOverlay();
        }
      });
    }
    el<HTMLButtonElement>(doc, "clear-layers").addEventListener("click", () => {
      this.layers?.clearAll();
      this.renderOverlay();
    });
    el<HTMLButtonElement>(doc, "apply").addEventListener("click", () => {
      void this.apply();
    });
    el<HTMLButtonElement>(doc, "undo").addEventListener("click", () => {
      void this.undo();
    });
    const zoom = el<HTMLInputElement>(doc, "zoom");
    const applyZoom = () => {
      el<HTMLDivElement>(doc, "stack").style.transform = `scale(${zoom.value})`;
      el<HTMLSpanElement>(doc, "zoom-val").textContent = `${zoom.value}x`;
    };
    zoom.addEventListener("input", applyZoom);
    applyZoom();
    el<HTMLButtonElement>(doc, "replay-close").addEventListener("click", () => {
      el<HTMLDivElement>(doc, "replay").className = "panel";
    });
    this.bindPainting();
  }

  private bindPainting(): void {
    const overlay = this.overlayCanvas;
    const toCanvas = (ev: PointerEvent): [number, number] => {
      const rect = overlay.getBoundingClientRect();
      const scale = overlay.width / rect.width;
      return [(ev.clientX - rect.left) * scale, (ev.clientY - rect.top) * scale];
    };
    overlay.addEventListener("pointerdown", (ev) => {
      if (!this.layers) return;
      overlay.setPointerCapture(ev.pointerId);
      this.painting = true;
      const [x, y] = toCanvas(ev);
      this.lastX = x;
      this.lastY = y;
      this.paintAt(x, y, x, y);
    });
    overlay.addEventListener("pointermove", (ev) => {
      if (!this.painting || !this.layers) return;
      const [x, y] = toCanvas(ev);
      this.paintAt(this.lastX, this.lastY, x, y);
      this.lastX = x;
      this.lastY = y;
    });
    const stop = () => {
      this.painting = false;
      this.refreshButtons();
    };
    overlay.addEventListener("pointerup", stop);
    overlay.addEventListener("pointercancel", stop);
  }

  private paintAt(x0: number, y0: number, x1: number, y1: number): void {
    if (!this.layers) return;
    this.layers.stroke(this.tool, x0, y0, x1, y1, this.brushRadius, {
      rgb: this.paintRgb,
      label: this.semanticLabel,
      intensity: 255,
    });
    this.renderOverlay();
  }

  // ------------------------------------------------------------ lifecycle

  async connect(baseUrl: string): Promise<void> {
    try {
      const client = new EditClient(baseUrl);
      const health = await client.healthz();
      this.client = client;
      this.resolution = health.resolution;
      this.layers = new LayerStack(health.resolution);
      this.baseCanvas.width = this.baseCanvas.height = health.resolution;
      this.overlayCanvas.width = this.overlayCanvas.height = health.resolution;
      el<HTMLSpanElement>(this.doc, "health").textContent =
        `ckpt ${health.ckpt_hash.slice(0, 10)} @ ${health.resolution}px`;
      el<HTMLInputElement>(this.doc, "base-file").disabled = false;
      this.directions = await client.directions();
      this.buildSliders();
      this.renderOverlay();
      this.setStatus("connected; choose a base image");
    } catch (err) {
      this.setStatus(this.describe(err), true);
    }
  }

  private buildSliders(): void {
    const box = el<HTMLDivElement>(this.doc, "sliders");
    box.textContent = "";
    this.sliderValues.clear();
    if (this.directions.length === 0) {
      const note = this.doc.createElement("span");
      note.className = "muted";
      note.textContent = "no latent directions registered";
      box.appendChild(note);
      return;
    }
    for (const dir of this.directions) {
      this.sliderValues.set(dir.name, 0);
      const row = this.doc.createElement("div");
      row.className = "slider-row";
      const name = this.doc.createElement("span");
      name.textContent = dir.name;
      const slider = this.doc.createElement("input");
      slider.type = "range";
      // slider value is the edit strength epsilon itself
      const span = Math.abs(dir.default_epsilon) * 3 || 3;
      slider.min = String(-span);
      slider.max = String(span);
      slider.step = String(span / 60);
      slider.value = "0";
      slider.dataset.direction = dir.name;
      const val = this.doc.createElement("span");
      val.className = "val";
      val.textContent = "0";
      slider.addEventListener("input", () => {
        const eps = Number(slider.value);
        this.sliderValues.set(dir.name, eps);
        val.textContent = eps.toFixed(2);
      });
      row.append(name, slider, val);
      box.appendChild(row);
    }
  }

  async loadBaseImage(file: { arrayBuffer(): Promise<ArrayBuffer> }): Promise<void> {
    if (!this.client) return;
    try {
      const bytes = new Uint8Array(await file.arrayBuffer());
      const decoded = await decodePng(bytes);
      const created = await this.client.createSession(bytes);
      this.sessionId = created.sessionId;
      this.historySteps = [];
      this.thumbCache.clear();
      this.layers = new LayerStack(this.resolution);
      if (decoded.width === this.resolution && decoded.height === this.resolution) {
        this.drawBase(decoded.data);
      } else {
        // the service resized its copy; show an approximation until the
        // first applied step returns exact server pixels
        this.drawBaseScaled(decoded);
      }
      this.renderOverlay();
      this.renderHistory();
      this.refreshButtons();
      this.setStatus(
        created.warning
          ? `session ${created.sessionId.slice(0, 8)}: ${created.warning}`
          : `session ${created.sessionId.slice(0, 8)} ready`,
        Boolean(created.warning),
      );
    } catch (err) {
      this.setStatus(this.describe(err), true);
    }
  }

  private drawBase(rgba: Uint8Array): void {
    const ctx = this.baseCanvas.getContext("2d");
    if (!ctx) return;
    const img = ctx.createImageData(this.resolution, this.resolution);
    img.data.set(rgba);
    ctx.putImageData(img, 0, 0);
  }

  private drawBaseScaled(decoded: { width: number; height: number; data: Uint8Array }): void {
    const ctx = this.baseCanvas.getContext("2d");
    if (!ctx) return;
    const src = this.doc.createElement("canvas");
    src.width = decoded.width;
    src.height = decoded.height;
    const sctx = src.getContext("2d");
    if (!sctx) return;
    const img = sctx.createImageData(decoded.width, decoded.height);
    img.data.set(decoded.data);
    sctx.putImageData(img, 0, 0);
    ctx.imageSmoothingEnabled = true;
    ctx.drawImage(src, 0, 0, this.resolution, this.resolution);
  }

  private renderOverlay(): void {
    if (!this.layers) return;
    const ctx = this.overlayCanvas.getContext("2d");
    if (!ctx) return;
    const img = ctx.createImageData(this.resolution, this.resolution);
    img.data.set(this.layers.renderOverlay());
    ctx.putImageData(img, 0, 0);
  }

  private refreshButtons(): void {
    const busy = this.client?.busy ?? false;
    const ready = Boolean(this.client && this.sessionId && this.layers);
    el<HTMLButtonElement>(this.doc, "apply").disabled =
      !ready || busy || (this.layers?.maskPixelCount() ?? 0) === 0;
    el<HTMLButtonElement>(this.doc, "undo").disabled =
      !ready || busy || this.historySteps.length === 0;
  }

  // ----------------------------------------------------------- edit steps

  private collectAttrs(): AttrStep[] {
    const attrs: AttrStep[] = [];
    for (const [name, epsilon] of this.sliderValues) {
      if (epsilon !== 0) attrs.push({ name, epsilon });
    }
    return attrs;
  }

  async apply(): Promise<void> {
    if (!this.client || !this.sessionId || !this.layers) return;
    if (this.layers.maskPixelCount() === 0) {
      this.setStatus("paint a mask before applying", true);
      return;
    }
    this.refreshButtons();
    try {
      const seed = Number(el<HTMLInputElement>(this.doc, "seed").value) || 0;
      const text = el<HTMLInputElement>(this.doc, "text-prompt").value.trim();
      const layers = this.layers;
      const payload = {
        mask: await layers.exportMask(),
        sketch: layers.hasContent("sketch") ? await layers.exportSketch() : undefined,
        color: layers.hasContent("color") ? await layers.exportColor() : undefined,
        semantic: layers.hasContent("semantic") ? await layers.exportSemantic() : undefined,
        text: text.length > 0 ? text : undefined,
        attrs: this.collectAttrs(),
        seed,
      };
      const started = performance.now();
      const res = await this.client.edit(this.sessionId, payload);
      const decoded = await decodePng(res.image);
      this.drawBase(decoded.data);
      this.resetSliders();
      await this.refreshHistory(res.imageB64);
      const ms = Math.round(performance.now() - started);
      const extras = res.warning ? `; ${res.warning}` : "";
      this.setStatus(
        `step ${res.step_index} applied in ${ms}ms, ` +
          `background deviation ${res.bg_max_dev.toExponential(2)}${extras}`,
      );
    } catch (err) {
      this.setStatus(this.describe(err), true);
    } finally {
      this.refreshButtons();
    }
  }

  async undo(): Promise<void> {
    if (!this.client || !this.sessionId) return;
    this.refreshButtons();
    try {
      const res = await this.client.undo(this.sessionId);
      const decoded = await decodePng(res.image);
      this.drawBase(decoded.data);
      await this.refreshHistory(res.imageB64);
      this.setStatus(`undo: back to step ${res.step_index}`);
    } catch (err) {
      this.setStatus(this.describe(err), true);
    } finally {
      this.refreshButtons();
    }
  }

  private resetSliders(): void {
    for (const name of this.sliderValues.keys()) this.sliderValues.set(name, 0);
    for (const slider of Array.from(
      this.doc.querySelectorAll<HTMLInputElement>("#sliders input[type=range]"),
    )) {
      slider.value = "0";
      const val = slider.parentElement?.querySelector(".val");
      if (val) val.textContent = "0";
    }
  }

  // -------------------------------------------------------------- history

  private async refreshHistory(latestImageB64?: string): Promise<void> {
    if (!this.client || !this.sessionId) return;
    this.historySteps = await this.client.history(this.sessionId);
    if (latestImageB64 && this.historySteps.length > 0) {
      const last = this.historySteps[this.historySteps.length - 1];
      // cache keyed by the server's hash of the step output
      this.thumbCache.set(last.output_hash, `data:image/png;base64,${latestImageB64}`);
    }
    this.renderHistory();
  }

  private renderHistory(): void {
    const strip = el<HTMLDivElement>(this.doc, "history");
    strip.textContent = "";
    if (this.historySteps.length === 0) {
      const note = this.doc.createElement("span");
      note.className = "muted";
      note.textContent = "no applied steps yet";
      strip.appendChild(note);
      return;
    }
    this.historySteps.forEach((step, i) => {
      const btn = this.doc.createElement("button");
      btn.className = i === this.historySteps.length - 1 ? "thumb current" : "thumb";
      btn.title = `step ${step.step_index}`;
      const img = this.doc.createElement("img");
      const url = this.thumbCache.get(step.output_hash);
      if (url) img.src = url;
      img.alt = `step ${step.step_index}`;
      btn.appendChild(img);
      btn.addEventListener("click", () => this.showReplay(step));
      strip.appendChild(btn);
    });
  }

  private showReplay(step: HistoryStep): void {
    const panel = el<HTMLDivElement>(this.doc, "replay");
    panel.className = "panel open";
    el<HTMLSpanElement>(this.doc, "replay-step").textContent = String(step.step_index);
    const img = el<HTMLImageElement>(this.doc, "replay-img");
    img.src = this.thumbCache.get(step.output_hash) ?? "";
    const attrs = step.summary.attrs.map(([n, e]) => `${n}=${e}`).join(", ");
    el<HTMLDivElement>(this.doc, "replay-meta").textContent =
      `modalities: ${step.summary.modalities.join(", ") || "mask only"}` +
      (step.summary.text ? `; text: ${step.summary.text}` : "") +
      (attrs ? `; attrs: ${attrs}` : "") +
      `; seed ${step.seed}; output ${step.output_hash.slice(0, 10)}`;
  }

  private describe(err: unknown): string {
    if (err instanceof ApiError) return err.display();
    return err instanceof Error ? err.message : String(err);
  }
}
