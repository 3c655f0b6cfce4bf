/* tslint:disable */
/* eslint-disable */

/**
 * A composed prompt plus a display raster. Sequences are shown side by side.
 */
export class DemoPrompt {
    free(): void;
    [Symbol.dispose](): void;
    ground_truth(): string;
    height(): number;
    /**
     * Samples `k` answers from an untrained toy model and measures how much
     * of their image attention lands on the target.
     */
    mine(k: number, temperature: number, seed: bigint): Mining;
    /**
     * `format` is `sequence`, `grid` or `pip`; `target` is 1-based.
     */
    constructor(format: string, n_images: number, target: number, seed: bigint);
    question(): string;
    /**
     * Flat `[x, y, w, h]` per logical image.
     */
    rects(): Uint32Array;
    rgba(): Uint8Array;
    target_index(): number;
    tau(): number;
    width(): number;
}

export class Mining {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Per-image attention share, `n_images` values per candidate.
     */
    masses(): Float64Array;
    ratios(): Float64Array;
    /**
     * Index of the rejected answer, or -1 when no candidate is at or below τ.
     */
    selected(): number;
    text(i: number): string;
}

/**
 * Trains the toy model on synthetic color pairs. Returns
 * `[l_dpo, margin_mean, pref_accuracy]` per step, flattened.
 */
export function train_curve(n_pairs: number, epochs: number, beta: number, gamma: number, learning_rate: number, seed: bigint): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demoprompt_free: (a: number, b: number) => void;
    readonly __wbg_mining_free: (a: number, b: number) => void;
    readonly demoprompt_ground_truth: (a: number) => [number, number];
    readonly demoprompt_height: (a: number) => number;
    readonly demoprompt_mine: (a: number, b: number, c: number, d: bigint) => [number, number, number];
    readonly demoprompt_new: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number];
    readonly demoprompt_question: (a: number) => [number, number];
    readonly demoprompt_rects: (a: number) => [number, number];
    readonly demoprompt_rgba: (a: number) => [number, number];
    readonly demoprompt_target_index: (a: number) => number;
    readonly demoprompt_tau: (a: number) => [number, number, number];
    readonly demoprompt_width: (a: number) => number;
    readonly mining_masses: (a: number) => [number, number];
    readonly mining_ratios: (a: number) => [number, number];
    readonly mining_selected: (a: number) => number;
    readonly mining_text: (a: number, b: number) => [number, number];
    readonly train_curve: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
