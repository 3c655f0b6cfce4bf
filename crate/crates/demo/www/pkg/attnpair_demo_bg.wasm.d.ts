/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demoprompt_free: (a: number, b: number) => void;
export const __wbg_mining_free: (a: number, b: number) => void;
export const demoprompt_ground_truth: (a: number) => [number, number];
export const demoprompt_height: (a: number) => number;
export const demoprompt_mine: (a: number, b: number, c: number, d: bigint) => [number, number, number];
export const demoprompt_new: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number];
export const demoprompt_question: (a: number) => [number, number];
export const demoprompt_rects: (a: number) => [number, number];
export const demoprompt_rgba: (a: number) => [number, number];
export const demoprompt_target_index: (a: number) => number;
export const demoprompt_tau: (a: number) => [number, number, number];
export const demoprompt_width: (a: number) => number;
export const mining_masses: (a: number) => [number, number];
export const mining_ratios: (a: number) => [number, number];
export const mining_selected: (a: number) => number;
export const mining_text: (a: number, b: number) => [number, number];
export const train_curve: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
