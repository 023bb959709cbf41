import type { GeometryPayload, Params } from "./types.js";

export interface GenerateFn {
  (params: Params): Promise<GeometryPayload>;
}

/**
 * Debounced, superseding generate requests: rapid slider scrubs collapse into
 * one request after the debounce window, and responses that arrive out of
 * order are discarded by sequence number so the viewport never shows a stale
 * frame (last write wins).
 */
export class GenerateScheduler {
  private seq = 0;
  private displayedSeq = -1;
  private timer: ReturnType<typeof setTimeout> | null = null;
  private pendingParams: Params | null = null;
  inflight = 0;

  constructor(
    private readonly generate: GenerateFn,
    private readonly onResult: (payload: GeometryPayload, seq: number) => void,
    private readonly onError: (err: unknown) => void = () => {},
    readonly debounceMs = 80,
  ) {}

  /** Queue a request for these params; earlier queued values are replaced. */
  request(params: Params): void {
    this.pendingParams = params;
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => this.fire(), this.debounceMs);
  }

  /** Bypass the debounce (initial load, undo/redo). */
  requestNow(params: Params): void {
    this.pendingParams = params;
    if (this.timer !== null) {
      clearTimeout(this.timer);
      this.timer = null;
    }
    this.fire();
  }

  private fire(): void {
    this.timer = null;
    const params = this.pendingParams;
    if (!params) return;
    this.pendingParams = null;
    const seq = ++this.seq;
    this.inflight += 1;
    this.generate(params)
      .then((payload) => {
        if (seq > this.displayedSeq) {
          this.displayedSeq = seq;
          this.onResult(payload, seq);
        }
      })
      .catch((err) => this.onError(err))
      .finally(() => {
        this.inflight -= 1;
      });
  }

  get lastDisplayedSeq(): number {
    return this.displayedSeq;
  }

  get issuedSeq(): number {
    return this.seq;
  }

  async settle(): Promise<void> {
    while (this.timer !== null || this.inflight > 0 || this.pendingParams !== null) {
      await new Promise((resolve) => setTimeout(resolve, 5));
    }
  }
}
