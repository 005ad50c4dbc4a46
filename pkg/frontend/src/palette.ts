/**
 * Semantic label vocabulary shared with the edit service. Index order
 * is the wire format: the semantic layer uploads as a grayscale PNG
 * whose pixel values are these indices. The display colors mirror the
 * service's own label palette so painted regions look the same in the
 * UI and in any server-side rendering of the map.
 */

export interface SemanticLabel {
  index: number;
  name: string;
  rgb: [number, number, number];
}

const NAMES = [
  "background",
  "skin",
  "l_brow",
  "r_brow",
  "l_eye",
  "r_eye",
  "eye_g",
  "l_ear",
  "r_ear",
  "ear_r",
  "nose",
  "mouth",
  "u_lip",
  "l_lip",
  "neck",
  "neck_l",
  "cloth",
  "hair",
  "hat",
] as const;

const COLORS: ReadonlyArray<[number, number, number]> = [
  [0, 0, 0],
  [204, 0, 0],
  [76, 153, 0],
  [204, 204, 0],
  [51, 51, 255],
  [204, 0, 204],
  [0, 255, 255],
  [255, 204, 204],
  [102, 51, 0],
  [255, 0, 0],
  [102, 204, 0],
  [255, 255, 0],
  [0, 0, 153],
  [0, 0, 204],
  [255, 51, 153],
  [0, 204, 204],
  [0, 51, 0],
  [255, 153, 51],
  [0, 204, 0],
];

export const SEMANTIC_LABELS: ReadonlyArray<SemanticLabel> = NAMES.map(
  (name, index) => ({ index, name, rgb: COLORS[index] }),
);

export const NUM_LABELS = SEMANTIC_LABELS.length;

export function labelByName(name: string): SemanticLabel {
  const hit = SEMANTIC_LABELS.find((l) => l.name === name);
  if (!hit) throw new Error(`unknown semantic label: ${name}`);
  return hit;
}

export function labelColorCss(index: number): string {
  const [r, g, b] = SEMANTIC_LABELS[index].rgb;
  return `rgb(${r}, ${g}, ${b})`;
}
