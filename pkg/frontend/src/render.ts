import type { GeometryPayload } from "./types.js";

export interface Camera {
  yaw: number;    // radians about the vertical axis
  pitch: number;
  distance: number;
}

export interface ProjectedFace {
  points: [number, number][];
  depth: number;
  shade: number;
  part: string;
}

function rotate(p: [number, number, number], cam: Camera): [number, number, number] {
  const [x, y, z] = p;
  const cy = Math.cos(cam.yaw), sy = Math.sin(cam.yaw);
  const cp = Math.cos(cam.pitch), sp = Math.sin(cam.pitch);
  const x1 = cy * x + sy * z;
  const z1 = -sy * x + cy * z;
  const y2 = cp * y - sp * z1;
  const z2 = sp * y + cp * z1;
  return [x1, y2, z2];
}

function partOf(index: number, ranges: Record<string, [number, number]>): string {
  for (const [name, [lo, hi]] of Object.entries(ranges)) {
    if (index >= lo && index < hi) return name;
  }
  return "unknown";
}

/**
 * Project faces for a painter's-algorithm canvas draw: orthographic after a
 * yaw/pitch rotation, back-to-front by centroid depth, flat shading from the
 * face normal. Pure math — the canvas wiring lives in main.ts.
 */
export function projectFaces(
  geo: GeometryPayload,
  cam: Camera,
  width: number,
  height: number,
): ProjectedFace[] {
  const n = geo.positions.length / 3;
  const rotated: [number, number, number][] = new Array(n);
  let minX = Infinity, maxX = -Infinity, minY = Infinity, maxY = -Infinity;
  for (let i = 0; i < n; i++) {
    const p = rotate(
      [geo.positions[3 * i], geo.positions[3 * i + 1], geo.positions[3 * i + 2]],
      cam,
    );
    rotated[i] = p;
    minX = Math.min(minX, p[0]); maxX = Math.max(maxX, p[0]);
    minY = Math.min(minY, p[1]); maxY = Math.max(maxY, p[1]);
  }
  const scale = 0.9 * Math.min(width / (maxX - minX + 1e-9), height / (maxY - minY + 1e-9));
  const cx = (minX + maxX) / 2, cy = (minY + maxY) / 2;
  const toScreen = (p: [number, number, number]): [number, number] => [
    width / 2 + (p[0] - cx) * scale,
    height / 2 - (p[1] - cy) * scale,
  ];

  const out: ProjectedFace[] = [];
  const faces = geo.faces;
  for (let f = 0; f < faces.length; f += 3) {
    const a = rotated[faces[f]], b = rotated[faces[f + 1]], c = rotated[faces[f + 2]];
    const ux = b[0] - a[0], uy = b[1] - a[1], uz = b[2] - a[2];
    const vx = c[0] - a[0], vy = c[1] - a[1], vz = c[2] - a[2];
    const nx = uy * vz - uz * vy, ny = uz * vx - ux * vz, nz = ux * vy - uy * vx;
    const len = Math.hypot(nx, ny, nz) || 1;
    const shade = 0.35 + 0.65 * Math.max(0, nz / len);
    out.push({
      points: [toScreen(a), toScreen(b), toScreen(c)],
      depth: (a[2] + b[2] + c[2]) / 3,
      shade,
      part: partOf(faces[f], geo.part_ranges),
    });
  }
  out.sort((p, q) => p.depth - q.depth);
  return out;
}
