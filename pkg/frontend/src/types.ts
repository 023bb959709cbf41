export interface ModelMeta {
  ranks: { beta: number; gamma: number; theta: number; phi: number; alpha: number };
  sigma: { beta: number[]; gamma: number[]; phi: number[]; alpha: number[] };
  trait_axis_names: string[];
  vertex_count: number;
  part_ranges: Record<string, [number, number]>;
  texture_shape: number[] | null;
}

export type Block = "beta" | "gamma" | "theta" | "phi" | "alpha";

export interface Params {
  beta: number[];
  gamma: number[];
  theta: number[];
  phi: number[];
  alpha: number[];
}

export interface GeometryPayload {
  positions: number[];
  faces: number[];
  uv: number[];
  jaw_joint: number[];
  part_ranges: Record<string, [number, number]>;
  texture_png_base64: string | null;
  warnings: string[];
}
