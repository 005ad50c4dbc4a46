/**
 * Pixel-layer model behind the editor canvas.
 *
 * One square stack of guidance layers at the checkpoint resolution:
 * a binary edit mask, a grayscale sketch layer, an RGB color layer and
 * a semantic label layer. Painting happens client-side into these
 * buffers only for display and upload; the client never composites
 * edited pixels itself, the service does that and returns the result.
 *
 * Exports produce PNGs in exactly the shapes the service decodes:
 * mask and sketch as 8-bit grayscale, color as 8-bit RGB, semantic as
 * 8-bit grayscale whose pixel values are label indices.
 */

import { encodeGrayPng, encodeRgbPng } from "./png.js";
import { labelByName, NUM_LABELS, SEMANTIC_LABELS } from "./palette.js";

export type LayerName = "mask" | "sketch" | "color" | "semantic";

export const LAYER_NAMES: ReadonlyArray<LayerName> = [
  "mask",
  "sketch",
  "color",
  "semantic",
];

export interface StampOptions {
  /** Sketch stroke value, 0..255. Defaults to full white. */
  intensity?: number;
  /** Color brush paint. Defaults to mid gray. */
  rgb?: [number, number, number];
  /** Semantic brush label index. */
  label?: number;
}

export class LayerStack {
  readonly size: number;
  readonly mask: Uint8Array;
  readonly sketch: Uint8Array;
  readonly sketchPainted: Uint8Array;
  readonly color: Uint8Array;
  readonly colorPainted: Uint8Array;
  readonly semantic: Uint8Array;
  readonly semanticPainted: Uint8Array;
  readonly visible: Record<LayerName, boolean>;

  constructor(size: number) {
    if (!Number.isInteger(size) || size <= 0) {
      throw new Error(`layer size must be a positive integer, got ${size}`);
    }
    this.size = size;
    const n = size * size;
    this.mask = new Uint8Array(n);
    this.sketch = new Uint8Array(n);
    this.sketchPainted = new Uint8Array(n);
    this.color = new Uint8Array(n * 3);
    this.colorPainted = new Uint8Array(n);
    this.semantic = new Uint8Array(n);
    this.semanticPainted = new Uint8Array(n);
    this.visible = { mask: true, sketch: true, color: true, semantic: true };
  }

  /**
   * Stamp a filled disc of the given tool at (cx, cy). Oversized or
   * off-canvas strokes are clipped to the canvas bounds rather than
   * rejected, so dragging past the edge just paints up to it.
   */
  stamp(
    tool: LayerName | "mask-eraser",
    cx: number,
    cy: number,
    radius: number,
    opts: StampOptions = {},
  ): void {
    const r = Math.max(0, radius);
    const x0 = Math.max(0, Math.floor(cx - r));
    const x1 = Math.min(this.size - 1, Math.ceil(cx + r));
    const y0 = Math.max(0, Math.floor(cy - r));
    const y1 = Math.min(this.size - 1, Math.ceil(cy + r));
    const label = opts.label ?? 1;
    if (tool === "semantic" && (label < 0 || label >= NUM_LABELS)) {
      throw new Error(`semantic label index out of range: ${label}`);
    }
    const [cr, cg, cb] = opts.rgb ?? [128, 128, 128];
    const intensity = opts.intensity ?? 255;
    const r2 = r * r;
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        const dx = x - cx;
        const dy = y - cy;
        if (dx * dx + dy * dy > r2) continue;
        const i = y * this.size + x;
        switch (tool) {
          case "mask":
            this.mask[i] = 255;
            break;
          case "mask-eraser":
            this.mask[i] = 0;
            break;
          case "sketch":
            this.sketch[i] = intensity;
            this.sketchPainted[i] = 1;
            break;
          case "color":
            this.color[3 * i] = cr;
            this.color[3 * i + 1] = cg;
            this.color[3 * i + 2] = cb;
            this.colorPainted[i] = 1;
            break;
          case "semantic":
            this.semantic[i] = label;
            this.semanticPainted[i] = 1;
            break;
        }
      }
    }
  }

  /** Stamp along a drag segment so fast pointer moves leave no gaps. */
  stroke(
    tool: LayerName | "mask-eraser",
    x0: number,
    y0: number,
    x1: number,
    y1: number,
    radius: number,
    opts: StampOptions = {},
  ): void {
    const steps = Math.max(1, Math.ceil(Math.hypot(x1 - x0, y1 - y0)));
    for (let s = 0; s <= steps; s++) {
      const t = s / steps;
      this.stamp(tool, x0 + (x1 - x0) * t, y0 + (y1 - y0) * t, radius, opts);
    }
  }

  hasContent(layer: LayerName): boolean {
    switch (layer) {
      case "mask":
        return this.mask.some((v) => v !== 0);
      case "sketch":
        return this.sketchPainted.some((v) => v !== 0);
      case "color":
        return this.colorPainted.some((v) => v !== 0);
      case "semantic":
        return this.semanticPainted.some((v) => v !== 0);
    }
  }

  maskPixelCount(): number {
    let n = 0;
    for (const v of this.mask) if (v !== 0) n++;
    return n;
  }

  clear(layer: LayerName): void {
    switch (layer) {
      case "mask":
        this.mask.fill(0);
        break;
      case "sketch":
        this.sketch.fill(0);
        this.sketchPainted.fill(0);
        break;
      case "color":
        this.color.fill(0);
        this.colorPainted.fill(0);
        break;
      case "semantic":
        this.semantic.fill(0);
        this.semanticPainted.fill(0);
        break;
    }
  }

  clearAll(): void {
    for (const layer of LAYER_NAMES) this.clear(layer);
  }

  /** Binary mask as 0/255 grayscale. The service thresholds at 0.5. */
  exportMask(): Promise<Uint8Array> {
    return encodeGrayPng(this.size, this.size, this.mask);
  }

  /** Sketch strokes as grayscale; unpainted pixels stay black. */
  exportSketch(): Promise<Uint8Array> {
    return encodeGrayPng(this.size, this.size, this.sketch);
  }

  /**
   * Color guidance as RGB. Unpainted pixels export as mid gray, the
   * neutral value of the service's signed color range.
   */
  exportColor(): Promise<Uint8Array> {
    const out = new Uint8Array(this.size * this.size * 3);
    for (let i = 0; i < this.size * this.size; i++) {
      if (this.colorPainted[i]) {
        out[3 * i] = this.color[3 * i];
        out[3 * i + 1] = this.color[3 * i + 1];
        out[3 * i + 2] = this.color[3 * i + 2];
      } else {
        out[3 * i] = out[3 * i + 1] = out[3 * i + 2] = 128;
      }
    }
    return encodeRgbPng(this.size, this.size, out);
  }

  /**
   * Semantic map as grayscale label indices; unpainted pixels carry
   * label 0 (background). The service reads pixel value as class id.
   */
  exportSemantic(): Promise<Uint8Array> {
    return encodeGrayPng(this.size, this.size, this.semantic);
  }

  /**
   * Composite the visible layers into one straight-alpha RGBA overlay
   * for display. Purely cosmetic: uploads always use the raw buffers.
   */
  renderOverlay(): Uint8Array {
    const n = this.size * this.size;
    const out = new Uint8Array(n * 4);
    const blend = (i: number, r: number, g: number, b: number, a: number) => {
      const j = 4 * i;
      const srcA = a / 255;
      const dstA = out[j + 3] / 255;
      const outA = srcA + dstA * (1 - srcA);
      if (outA <= 0) return;
      out[j] = Math.round((r * srcA + out[j] * dstA * (1 - srcA)) / outA);
      out[j + 1] = Math.round((g * srcA + out[j + 1] * dstA * (1 - srcA)) / outA);
      out[j + 2] = Math.round((b * srcA + out[j + 2] * dstA * (1 - srcA)) / outA);
      out[j + 3] = Math.round(outA * 255);
    };
    for (let i = 0; i < n; i++) {
      if (this.visible.color && this.colorPainted[i]) {
        blend(i, this.color[3 * i], this.color[3 * i + 1], this.color[3 * i + 2], 200);
      }
      if (this.visible.semantic && this.semanticPainted[i]) {
        const [r, g, b] = SEMANTIC_LABELS[this.semantic[i]].rgb;
        blend(i, r, g, b, 170);
      }
      if (this.visible.sketch && this.sketchPainted[i]) {
        const v = this.sketch[i];
        blend(i, v, v, v, 220);
      }
      if (this.visible.mask && this.mask[i]) {
        blend(i, 255, 64, 64, 90);
      }
    }
    return out;
  }
}

export { labelByName };
