/**
 * Minimal PNG codec covering exactly what the edit service speaks.
 *
 * Encoding targets the two layouts the service accepts on upload:
 * 8-bit grayscale (color type 0) for mask / sketch / semantic-label
 * layers, and 8-bit RGB (color type 2) for the base image and color
 * layer. Decoding accepts what the service (Pillow) emits: 8-bit
 * non-interlaced color types 0, 2, 3 and 6 with scanline filters 0-4.
 *
 * Compression rides on CompressionStream / DecompressionStream
 * ("deflate" is the zlib framing PNG requires), so the same module
 * runs unchanged in the browser and under Node's test runner.
 */

export interface RgbaImage {
  width: number;
  height: number;
  /** Tightly packed RGBA, 4 bytes per pixel. */
  data: Uint8Array;
}

const SIGNATURE = new Uint8Array([137, 80, 78, 71, 13, 10, 26, 10]);

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[n] = c >>> 0;
  }
  return table;
})();

function crc32(...parts: Uint8Array[]): number {
  let c = 0xffffffff;
  for (const part of parts) {
    for (let i = 0; i < part.length; i++) {
      c = CRC_TABLE[(c ^ part[i]) & 0xff] ^ (c >>> 8);
    }
  }
  return (c ^ 0xffffffff) >>> 0;
}

function concat(parts: Uint8Array[]): Uint8Array {
  let total = 0;
  for (const p of parts) total += p.length;
  const out = new Uint8Array(total);
  let off = 0;
  for (const p of parts) {
    out.set(p, off);
    off += p.length;
  }
  return out;
}

async function pipeThrough(
  data: Uint8Array,
  transform: CompressionStream | DecompressionStream,
): Promise<Uint8Array> {
  const stream = new Blob([data as BlobPart]).stream().pipeThrough(transform);
  const buf = await new Response(stream).arrayBuffer();
  return new Uint8Array(buf);
}

function deflate(data: Uint8Array): Promise<Uint8Array> {
  return pipeThrough(data, new CompressionStream("deflate"));
}

function inflate(data: Uint8Array): Promise<Uint8Array> {
  return pipeThrough(data, new DecompressionStream("deflate"));
}

function chunk(type: string, data: Uint8Array): Uint8Array {
  const head = new Uint8Array(8);
  const view = new DataView(head.buffer);
  view.setUint32(0, data.length);
  for (let i = 0; i < 4; i++) head[4 + i] = type.charCodeAt(i);
  const crc = new Uint8Array(4);
  new DataView(crc.buffer).setUint32(0, crc32(head.subarray(4), data));
  return concat([head, data, crc]);
}

function ihdr(width: number, height: number, colorType: number): Uint8Array {
  const data = new Uint8Array(13);
  const view = new DataView(data.buffer);
  view.setUint32(0, width);
  view.setUint32(4, height);
  data[8] = 8; // bit depth
  data[9] = colorType;
  // compression 0, filter 0, interlace 0
  return chunk("IHDR", data);
}

async function encode(
  width: number,
  height: number,
  colorType: 0 | 2,
  pixels: Uint8Array,
): Promise<Uint8Array> {
  const bpp = colorType === 0 ? 1 : 3;
  if (pixels.length !== width * height * bpp) {
    throw new Error(
      `pixel buffer is ${pixels.length} bytes, expected ${width * height * bpp}`,
    );
  }
  const stride = width * bpp;
  const raw = new Uint8Array((stride + 1) * height);
  for (let y = 0; y < height; y++) {
    // filter byte 0 (None) then the scanline verbatim
    raw.set(pixels.subarray(y * stride, (y + 1) * stride), y * (stride + 1) + 1);
  }
  const idat = await deflate(raw);
  return concat([
    SIGNATURE,
    ihdr(width, height, colorType),
    chunk("IDAT", idat),
    chunk("IEND", new Uint8Array(0)),
  ]);
}

/** Encode one byte per pixel as an 8-bit grayscale PNG. */
export function encodeGrayPng(
  width: number,
  height: number,
  pixels: Uint8Array,
): Promise<Uint8Array> {
  return encode(width, height, 0, pixels);
}

/** Encode three bytes per pixel as an 8-bit RGB PNG. */
export function encodeRgbPng(
  width: number,
  height: number,
  pixels: Uint8Array,
): Promise<Uint8Array> {
  return encode(width, height, 2, pixels);
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

function unfilter(raw: Uint8Array, width: number, height: number, bpp: number): Uint8Array {
  const stride = width * bpp;
  if (raw.length < (stride + 1) * height) {
    throw new Error("truncated PNG image data");
  }
  const out = new Uint8Array(stride * height);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)];
    const row = raw.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1));
    const cur = y * stride;
    const prev = cur - stride;
    for (let x = 0; x < stride; x++) {
      const left = x >= bpp ? out[cur + x - bpp] : 0;
      const up = y > 0 ? out[prev + x] : 0;
      const upLeft = y > 0 && x >= bpp ? out[prev + x - bpp] : 0;
      let v = row[x];
      switch (filter) {
        case 0:
          break;
        case 1:
          v += left;
          break;
        case 2:
          v += up;
          break;
        case 3:
          v += (left + up) >> 1;
          break;
        case 4:
          v += paeth(left, up, upLeft);
          break;
        default:
          throw new Error(`unsupported PNG scanline filter ${filter}`);
      }
      out[cur + x] = v & 0xff;
    }
  }
  return out;
}

/**
 * Decode an 8-bit non-interlaced PNG (color types 0, 2, 3, 6) to RGBA.
 */
export async function decodePng(bytes: Uint8Array): Promise<RgbaImage> {
  for (let i = 0; i < 8; i++) {
    if (bytes[i] !== SIGNATURE[i]) throw new Error("not a PNG file");
  }
  let width = 0;
  let height = 0;
  let colorType = -1;
  let palette: Uint8Array | null = null;
  const idat: Uint8Array[] = [];
  let off = 8;
  while (off + 8 <= bytes.length) {
    const view = new DataView(bytes.buffer, bytes.byteOffset + off);
    const len = view.getUint32(0);
    const type = String.fromCharCode(bytes[off + 4], bytes[off + 5], bytes[off + 6], bytes[off + 7]);
    const data = bytes.subarray(off + 8, off + 8 + len);
    if (type === "IHDR") {
      const hv = new DataView(data.buffer, data.byteOffset, data.byteLength);
      width = hv.getUint32(0);
      height = hv.getUint32(4);
      const bitDepth = data[8];
      colorType = data[9];
      if (bitDepth !== 8) throw new Error(`unsupported PNG bit depth ${bitDepth}`);
      if (data[12] !== 0) throw new Error("interlaced PNG not supported");
      if (![0, 2, 3, 6].includes(colorType)) {
        throw new Error(`unsupported PNG color type ${colorType}`);
      }
    } else if (type === "PLTE") {
      palette = data.slice();
    } else if (type === "IDAT") {
      idat.push(data);
    } else if (type === "IEND") {
      break;
    }
    off += 12 + len; // length + type + data + crc
  }
  if (width === 0 || height === 0 || colorType < 0) {
    throw new Error("PNG header missing");
  }
  const bpp = colorType === 2 ? 3 : colorType === 6 ? 4 : 1;
  const raw = await inflate(concat(idat));
  const px = unfilter(raw, width, height, bpp);
  const out = new Uint8Array(width * height * 4);
  for (let i = 0; i < width * height; i++) {
    let r: number;
    let g: number;
    let b: number;
    let a = 255;
    if (colorType === 0) {
      r = g = b = px[i];
    } else if (colorType === 2) {
      r = px[3 * i];
      g = px[3 * i + 1];
      b = px[3 * i + 2];
    } else if (colorType === 3) {
      if (!palette) throw new Error("palette PNG without PLTE chunk");
      const idx = px[i] * 3;
      r = palette[idx];
      g = palette[idx + 1];
      b = palette[idx + 2];
    } else {
      r = px[4 * i];
      g = px[4 * i + 1];
      b = px[4 * i + 2];
      a = px[4 * i + 3];
    }
    out[4 * i] = r;
    out[4 * i + 1] = g;
    out[4 * i + 2] = b;
    out[4 * i + 3] = a;
  }
  return { width, height, data: out };
}

/**
 * Decode a palette or grayscale PNG back to its per-pixel index values
 * rather than RGB. Used for semantic-label round trips.
 */
export async function decodeIndexPng(bytes: Uint8Array): Promise<{
  width: number;
  height: number;
  data: Uint8Array;
}> {
  for (let i = 0; i < 8; i++) {
    if (bytes[i] !== SIGNATURE[i]) throw new Error("not a PNG file");
  }
  let width = 0;
  let height = 0;
  let colorType = -1;
  const idat: Uint8Array[] = [];
  let off = 8;
  while (off + 8 <= bytes.length) {
    const view = new DataView(bytes.buffer, bytes.byteOffset + off);
    const len = view.getUint32(0);
    const type = String.fromCharCode(bytes[off + 4], bytes[off + 5], bytes[off + 6], bytes[off + 7]);
    const data = bytes.subarray(off + 8, off + 8 + len);
    if (type === "IHDR") {
      const hv = new DataView(data.buffer, data.byteOffset, data.byteLength);
      width = hv.getUint32(0);
      height = hv.getUint32(4);
      colorType = data[9];
      if (data[8] !== 8 || data[12] !== 0 || (colorType !== 0 && colorType !== 3)) {
        throw new Error("expected an 8-bit non-interlaced index or grayscale PNG");
      }
    } else if (type === "IDAT") {
      idat.push(data);
    } else if (type === "IEND") {
      break;
    }
    off += 12 + len;
  }
  const raw = await inflate(concat(idat));
  return { width, height, data: unfilter(raw, width, height, 1) };
}
