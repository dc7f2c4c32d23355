/* tslint:disable */
/* eslint-disable */

export function filteredSlice(size: number, seed: number, noise: number, mode: string, threshold: number, tau: number): Float32Array;

export function lesionSlice(size: number, seed: number, noise: number, blur: number): Float32Array;

export function maskCurve(mode: string, threshold: number, tau: number, n: number): Float32Array;

export function maskPlane(size: number, mode: string, threshold: number, tau: number): Float32Array;

export function orderPositions(d: number, h: number, w: number, k: number, kind: string): Uint32Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly filteredSlice: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly lesionSlice: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly maskCurve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly maskPlane: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly orderPositions: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
