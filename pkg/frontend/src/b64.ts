/** Base64 helpers over the atob/btoa globals shared by browsers and Node. */

export function toBase64(bytes: Uint8Array): string {
  let binary = "";
  // chunked to stay under the argument-count limit of fromCharCode
  const step = 0x8000;
  for (let i = 0; i < bytes.length; i += step) {
    binary += String.fromCharCode(...bytes.subarray(i, i + step));
  }
  return btoa(binary);
}

export function fromBase64(text: string): Uint8Array {
  const binary = atob(text);
  const out = new Uint8Array(binary.length);
  for (let i = 0; i < binary.length; i++) out[i] = binary.charCodeAt(i);
  return out;
}
