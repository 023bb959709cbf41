import type { GeometryPayload, ModelMeta, Params } from "./types.js";

/** Thin client over the generation service's HTTP API. */
export class ServiceClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: typeof fetch = fetch,
  ) {}

  async meta(): Promise<ModelMeta> {
    const r = await this.fetchImpl(`${this.baseUrl}/model/meta`);
    if (!r.ok) throw new Error(`meta failed: HTTP ${r.status}`);
    return (await r.json()) as ModelMeta;
  }

  async generate(params: Params, wantTexture: boolean): Promise<GeometryPayload> {
    const r = await this.fetchImpl(`${this.baseUrl}/generate`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ params, want_texture: wantTexture, format: "json-geometry" }),
    });
    if (!r.ok) throw new Error(`generate failed: HTTP ${r.status}`);
    return (await r.json()) as GeometryPayload;
  }

  async generateObj(params: Params): Promise<string> {
    const r = await this.fetchImpl(`${this.baseUrl}/generate`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ params, want_texture: false, format: "obj" }),
    });
    if (!r.ok) throw new Error(`generate failed: HTTP ${r.status}`);
    return await r.text();
  }
}
