/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demomodel_free: (a: number, b: number) => void;
export const demomodel_domains: (a: number) => [number, number];
export const demomodel_inspect: (a: number, b: number, c: number) => [number, number, number, number];
export const demomodel_losses: (a: number) => [number, number];
export const demomodel_new: (a: number, b: bigint) => [number, number, number];
export const metrics: (a: number, b: number) => [number, number, number, number];
export const sequence: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
