import { describe, expect, it } from "vitest";

import { GenerateScheduler } from "../src/scheduler.js";
import type { GeometryPayload, Params } from "../src/types.js";

function params(tag: number): Params {
  return { beta: [tag], gamma: [], theta: new Array(9).fill(0), phi: [], alpha: [] };
}

function payload(tag: number): GeometryPayload {
  return {
    positions: [tag, 0, 0],
    faces: [],
    uv: [],
    jaw_joint: [0, 0, 0],
    part_ranges: {},
    texture_png_base64: null,
    warnings: [],
  };
}

const sleep = (ms: number) => new Promise((r) => setTimeout(r, ms));

describe("GenerateScheduler", () => {
  it("debounces a rapid scrub into a single request", async () => {
    const calls: number[] = [];
    const displayed: number[] = [];
    const sched = new GenerateScheduler(
      async (p) => {
        calls.push(p.beta[0]);
        return payload(p.beta[0]);
      },
      (pl) => displayed.push(pl.positions[0]),
      () => {},
      20,
    );
    for (let i = 0; i <= 30; i++) sched.request(params(i));
    await sched.settle();
    expect(calls).toEqual([30]);
    expect(displayed).toEqual([30]);
  });

  it("discards stale responses by sequence number (last write wins)", async () => {
    const displayed: number[] = [];
    const delays = new Map<number, number>([[1, 60], [2, 5]]); // first reply arrives last
    const sched = new GenerateScheduler(
      async (p) => {
        await sleep(delays.get(p.beta[0]) ?? 0);
        return payload(p.beta[0]);
      },
      (pl) => displayed.push(pl.positions[0]),
      () => {},
      1,
    );
    sched.requestNow(params(1));
    await sleep(10);
    sched.requestNow(params(2));
    await sched.settle();
    await sleep(80); // let the slow response 1 arrive after 2 was displayed
    expect(displayed).toEqual([2]);
    expect(sched.lastDisplayedSeq).toBe(2);
  });

  it("final frame always corresponds to the final requested value", async () => {
    const displayed: number[] = [];
    const sched = new GenerateScheduler(
      async (p) => {
        await sleep(Math.random() * 20);
        return payload(p.beta[0]);
      },
      (pl) => displayed.push(pl.positions[0]),
      () => {},
      2,
    );
    for (let i = 0; i < 25; i++) {
      sched.request(params(i));
      if (i % 7 === 0) await sleep(8);
    }
    sched.requestNow(params(99));
    await sched.settle();
    await sleep(40);
    expect(displayed[displayed.length - 1]).toBe(99);
    // displayed sequence is strictly increasing: no stale frame ever shown
    const seqs = [...displayed];
    expect([...seqs].sort((a, b) => a - b)).toEqual(seqs);
  });

  it("reports errors through the error callback", async () => {
    const errors: unknown[] = [];
    const sched = new GenerateScheduler(
      async () => {
        throw new Error("boom");
      },
      () => {},
      (e) => errors.push(e),
      1,
    );
    sched.requestNow(params(0));
    await sched.settle();
    expect(errors).toHaveLength(1);
  });
});
