/** Minimal OBJ reader used by export tests to cross-check CLI output. */
export interface ParsedObj {
  positions: number[];
  faces: number[];
}

export function parseObj(text: string): ParsedObj {
  const positions: number[] = [];
  const faces: number[] = [];
  for (const raw of text.split("\n")) {
    const line = raw.trim();
    if (line.startsWith("v ")) {
      const parts = line.split(/\s+/);
      positions.push(Number(parts[1]), Number(parts[2]), Number(parts[3]));
    } else if (line.startsWith("f ")) {
      const idx = line.split(/\s+/).slice(1, 4).map((t) => Number(t.split("/")[0]) - 1);
      faces.push(idx[0], idx[1], idx[2]);
    }
  }
  return { positions, faces };
}

/** Symmetric chamfer distance (mm^2) between two vertex arrays. */
export function chamfer(a: number[], b: number[]): number {
  const directed = (src: number[], dst: number[]): number => {
    let total = 0;
    const n = src.length / 3;
    for (let i = 0; i < n; i++) {
      let best = Infinity;
      for (let j = 0; j < dst.length / 3; j++) {
        const dx = src[3 * i] - dst[3 * j];
        const dy = src[3 * i + 1] - dst[3 * j + 1];
        const dz = src[3 * i + 2] - dst[3 * j + 2];
        const d = dx * dx + dy * dy + dz * dz;
        if (d < best) best = d;
      }
      total += best;
    }
    return total / n;
  };
  return 0.5 * (directed(a, b) + directed(b, a));
}
