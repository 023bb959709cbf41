import { ServiceClient } from "./api.js";
import { axisRange, paramsToJson } from "./params.js";
import { projectFaces } from "./render.js";
import { GenerateScheduler } from "./scheduler.js";
import { EditorState } from "./state.js";
import type { Block, GeometryPayload, ModelMeta } from "./types.js";

const SERVICE_URL =
  new URLSearchParams(location.search).get("service") ?? "http://127.0.0.1:7461";

const PART_COLORS: Record<string, string> = {
  face: "#d9a184",
  mandible: "#c8cedd",
  maxilla: "#b5bccf",
};

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  parent?: HTMLElement,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  parent?.appendChild(node);
  return node;
}

function banner(message: string): void {
  const b = document.getElementById("banner")!;
  b.textContent = message;
  b.style.display = message ? "block" : "none";
}

function download(name: string, content: string, mime: string): void {
  const a = el("a", { download: name });
  a.href = URL.createObjectURL(new Blob([content], { type: mime }));
  a.click();
  URL.revokeObjectURL(a.href);
}

class Editor {
  state!: EditorState;
  scheduler!: GenerateScheduler;
  lastGeometry: GeometryPayload | null = null;
  camera = { yaw: 0.4, pitch: 0.1, distance: 300 };
  sliders = new Map<string, HTMLInputElement>();

  constructor(
    readonly client: ServiceClient,
    readonly canvas: HTMLCanvasElement,
    readonly panel: HTMLElement,
  ) {}

  async bind(): Promise<void> {
    const meta = await this.client.meta();
    this.state = EditorState.fromQuery(meta, new URLSearchParams(location.search).get("p"));
    this.scheduler = new GenerateScheduler(
      (p) => this.client.generate(p, false),
      (payload) => this.display(payload),
      (err) => banner(`generation failed: ${err}`),
    );
    this.buildPanels(meta);
    this.scheduler.requestNow(this.state.params);
  }

  axisLabel(meta: ModelMeta, block: Block, i: number): string {
    if (block === "gamma" && meta.trait_axis_names[i]) return meta.trait_axis_names[i];
    if (block === "theta") {
      const names = ["head rx", "head ry", "head rz", "jaw rx", "jaw ry", "jaw rz",
        "jaw tx", "jaw ty", "jaw tz"];
      return names[i];
    }
    return `${block} ${i + 1}`;
  }

  buildPanels(meta: ModelMeta): void {
    this.panel.innerHTML = "";
    const blocks: Block[] = ["beta", "gamma", "theta", "phi", "alpha"];
    const counts: Record<Block, number> = {
      beta: meta.ranks.beta, gamma: meta.ranks.gamma, theta: meta.ranks.theta,
      phi: meta.ranks.phi, alpha: meta.ranks.alpha,
    };
    for (const block of blocks) {
      if (!counts[block]) continue;
      const group = el("fieldset", {}, this.panel);
      el("legend", {}, group).textContent = block;
      for (let i = 0; i < counts[block]; i++) {
        const row = el("div", { class: "slider-row" }, group);
        el("label", {}, row).textContent = this.axisLabel(meta, block, i);
        const [lo, hi] = axisRange(meta, block, i);
        const input = el("input", {
          type: "range", min: String(lo), max: String(hi),
          step: String((hi - lo) / 200), value: String(this.state.params[block][i]),
        }, row);
        input.addEventListener("input", () => {
          const v = this.state.setAxis(block, i, Number(input.value));
          input.value = String(v);
          this.syncUrl();
          this.scheduler.request(this.state.params);
        });
        this.sliders.set(`${block}:${i}`, input);
      }
    }

    const controls = el("div", { class: "controls" }, this.panel);
    for (const [name, key] of [["face", "face"], ["skull", "skull"], ["x-ray", "xray"]] as const) {
      const lbl = el("label", {}, controls);
      const box = el("input", { type: "checkbox" }, lbl);
      box.checked = this.state.view[key];
      box.addEventListener("change", () => {
        this.state.view[key] = box.checked;
        this.redraw();
      });
      lbl.append(` ${name}`);
    }
    const mkButton = (label: string, fn: () => void) => {
      const b = el("button", {}, controls);
      b.textContent = label;
      b.addEventListener("click", fn);
    };
    mkButton("undo", () => this.afterHistory(this.state.undo()));
    mkButton("redo", () => this.afterHistory(this.state.redo()));
    mkButton("reset", () => { this.state.reset(); this.afterHistory(true); });
    mkButton("export params", () =>
      download("params.json", paramsToJson(this.state.params), "application/json"));
    mkButton("export mesh", () => {
      this.client.generateObj(this.state.params)
        .then((obj) => download("head.obj", obj, "text/plain"))
        .catch((err) => banner(`export failed: ${err}`));
    });
  }

  afterHistory(changed: boolean): void {
    if (!changed) return;
    for (const [key, input] of this.sliders) {
      const [block, idx] = key.split(":") as [Block, string];
      input.value = String(this.state.params[block][Number(idx)]);
    }
    this.syncUrl();
    this.scheduler.requestNow(this.state.params);
  }

  syncUrl(): void {
    const url = new URL(location.href);
    url.searchParams.set("p", this.state.toQuery());
    history.replaceState(null, "", url.toString());
  }

  display(payload: GeometryPayload): void {
    this.lastGeometry = payload;
    banner(payload.warnings.length ? payload.warnings.join("; ") : "");
    this.redraw();
  }

  redraw(): void {
    const geo = this.lastGeometry;
    const ctx = this.canvas.getContext("2d")!;
    ctx.clearRect(0, 0, this.canvas.width, this.canvas.height);
    if (!geo) return;
    const faces = projectFaces(geo, this.camera, this.canvas.width, this.canvas.height);
    for (const f of faces) {
      const isSkull = f.part !== "face";
      if (isSkull && !this.state.view.skull) continue;
      if (!isSkull && !this.state.view.face) continue;
      const rgb = PART_COLORS[f.part] ?? "#999999";
      ctx.globalAlpha = isSkull && this.state.view.xray && this.state.view.face ? 0.35 : 1.0;
      ctx.fillStyle = shade(rgb, f.shade);
      ctx.beginPath();
      ctx.moveTo(f.points[0][0], f.points[0][1]);
      ctx.lineTo(f.points[1][0], f.points[1][1]);
      ctx.lineTo(f.points[2][0], f.points[2][1]);
      ctx.closePath();
      ctx.fill();
    }
    ctx.globalAlpha = 1.0;
  }
}

function shade(hex: string, factor: number): string {
  const n = parseInt(hex.slice(1), 16);
  const ch = (shift: number) =>
    Math.round(Math.min(255, ((n >> shift) & 0xff) * factor));
  return `rgb(${ch(16)}, ${ch(8)}, ${ch(0)})`;
}

async function start(): Promise<void> {
  const canvas = document.getElementById("viewport") as HTMLCanvasElement;
  const panel = document.getElementById("panel")!;
  const editor = new Editor(new ServiceClient(SERVICE_URL), canvas, panel);
  canvas.addEventListener("pointermove", (ev) => {
    if (ev.buttons & 1) {
      editor.camera.yaw += ev.movementX * 0.01;
      editor.camera.pitch += ev.movementY * 0.01;
      editor.redraw();
    }
  });
  try {
    await editor.bind();
  } catch (err) {
    banner(`service unreachable at ${SERVICE_URL}: ${err}`);
    for (const input of document.querySelectorAll("input, button")) {
      (input as HTMLInputElement).disabled = true;
    }
  }
}

start();
