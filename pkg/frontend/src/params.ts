import type { Block, ModelMeta, Params } from "./types.js";

export const THETA_DIM = 9;

export function zeroParams(meta: ModelMeta): Params {
  return {
    beta: new Array(meta.ranks.beta).fill(0),
    gamma: new Array(meta.ranks.gamma).fill(0),
    theta: new Array(THETA_DIM).fill(0),
    phi: new Array(meta.ranks.phi).fill(0),
    alpha: new Array(meta.ranks.alpha).fill(0),
  };
}

export function cloneParams(p: Params): Params {
  return {
    beta: [...p.beta],
    gamma: [...p.gamma],
    theta: [...p.theta],
    phi: [...p.phi],
    alpha: [...p.alpha],
  };
}

export function paramsEqual(a: Params, b: Params): boolean {
  const blocks: Block[] = ["beta", "gamma", "theta", "phi", "alpha"];
  return blocks.every(
    (k) => a[k].length === b[k].length && a[k].every((v, i) => v === b[k][i]),
  );
}

/** Slider range for one axis: +/- 3 sigma (pose axes get fixed ranges). */
export function axisRange(meta: ModelMeta, block: Block, index: number): [number, number] {
  if (block === "theta") {
    // rotations in radians, jaw translation in mm
    return index < 6 ? [-0.5, 0.5] : [-8, 8];
  }
  const sigma = meta.sigma[block][index] ?? 1;
  return [-3 * sigma, 3 * sigma];
}

export function clampToRange(value: number, range: [number, number]): number {
  return Math.min(range[1], Math.max(range[0], value));
}

/** CLI-compatible params JSON (the `generate` subcommand consumes this). */
export function paramsToJson(p: Params): string {
  return JSON.stringify(
    { beta: p.beta, gamma: p.gamma, theta: p.theta, phi: p.phi, alpha: p.alpha },
    null,
    2,
  );
}
