import { axisRange, clampToRange, cloneParams, paramsEqual, zeroParams } from "./params.js";
import type { Block, ModelMeta, Params } from "./types.js";

export interface ViewToggles {
  face: boolean;
  skull: boolean;
  xray: boolean;
}

/**
 * Editor state: the current parameter vector, slider clamping against the
 * advertised ranges, view toggles and an exact, bounded undo/redo stack.
 * The state never touches geometry; the service is the single source of truth.
 */
export class EditorState {
  readonly meta: ModelMeta;
  params: Params;
  view: ViewToggles = { face: true, skull: true, xray: true };
  private undoStack: Params[] = [];
  private redoStack: Params[] = [];
  readonly undoLimit: number;

  constructor(meta: ModelMeta, undoLimit = 64) {
    this.meta = meta;
    this.undoLimit = Math.max(50, undoLimit);
    this.params = zeroParams(meta);
  }

  /** Set one axis (clamped to its slider range), snapshotting for undo. */
  setAxis(block: Block, index: number, value: number): number {
    const clamped = clampToRange(value, axisRange(this.meta, block, index));
    if (this.params[block][index] === clamped) return clamped;
    this.pushUndo();
    this.params = cloneParams(this.params);
    this.params[block][index] = clamped;
    return clamped;
  }

  setParams(params: Params): void {
    if (paramsEqual(this.params, params)) return;
    this.pushUndo();
    this.params = cloneParams(params);
  }

  reset(): void {
    this.setParams(zeroParams(this.meta));
  }

  private pushUndo(): void {
    this.undoStack.push(cloneParams(this.params));
    if (this.undoStack.length > this.undoLimit) this.undoStack.shift();
    this.redoStack.length = 0;
  }

  get undoDepth(): number {
    return this.undoStack.length;
  }

  undo(): boolean {
    const prev = this.undoStack.pop();
    if (!prev) return false;
    this.redoStack.push(cloneParams(this.params));
    this.params = prev;
    return true;
  }

  redo(): boolean {
    const next = this.redoStack.pop();
    if (!next) return false;
    this.undoStack.push(cloneParams(this.params));
    this.params = next;
    return true;
  }

  /** Round-trippable snapshot for URL sharing. */
  toQuery(): string {
    return encodeURIComponent(JSON.stringify(this.params));
  }

  static fromQuery(meta: ModelMeta, query: string | null): EditorState {
    const state = new EditorState(meta);
    if (!query) return state;
    try {
      const parsed = JSON.parse(decodeURIComponent(query)) as Partial<Params>;
      const base = zeroParams(meta);
      for (const block of ["beta", "gamma", "theta", "phi", "alpha"] as Block[]) {
        const src = parsed[block];
        if (!Array.isArray(src)) continue;
        for (let i = 0; i < Math.min(src.length, base[block].length); i++) {
          base[block][i] = clampToRange(Number(src[i]) || 0,
            axisRange(meta, block, i));
        }
      }
      state.params = base;
    } catch {
      // malformed query: fall back to zeros
    }
    return state;
  }
}
