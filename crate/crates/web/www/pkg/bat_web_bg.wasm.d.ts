/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const align_random: (a: number, b: number, c: number, d: number, e: bigint) => [number, number];
export const kl_curve: (a: number, b: number) => [number, number];
export const pseudo_document: (a: number, b: number, c: number, d: number, e: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
