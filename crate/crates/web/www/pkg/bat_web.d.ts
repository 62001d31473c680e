/* tslint:disable */
/* eslint-disable */

/**
 * Aligns two random models whose topics share a hidden pairing: model B's
 * topics are noisy copies of model A's, mixed with uniform noise by `noise`.
 */
export function align_random(topics_a: number, topics_b: number, vocab: number, noise: number, seed: bigint): string;

/**
 * KL weight at every step of a run with `total_steps` steps.
 */
export function kl_curve(total_steps: number, anneal: number): string;

/**
 * Softened, optionally clipped teacher distribution for logits `z`.
 */
export function pseudo_document(z: Float64Array, doc_len: number, temperature: number, clip: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly align_random: (a: number, b: number, c: number, d: number, e: bigint) => [number, number];
    readonly kl_curve: (a: number, b: number) => [number, number];
    readonly pseudo_document: (a: number, b: number, c: number, d: number, e: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
