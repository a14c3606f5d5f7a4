/* tslint:disable */
/* eslint-disable */

export class DemoModel {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Vocabulary domains as a JSON array.
     */
    domains(): string;
    inspect(sequence: string): string;
    /**
     * Loss per step as a JSON array.
     */
    losses(): string;
    constructor(steps: number, seed: bigint);
}

export function metrics(text: string): string;

export function sequence(text: string, strategy: string, max_len: number, delta_intra: number, delta_base: number, delta_inter: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demomodel_free: (a: number, b: number) => void;
    readonly demomodel_domains: (a: number) => [number, number];
    readonly demomodel_inspect: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demomodel_losses: (a: number) => [number, number];
    readonly demomodel_new: (a: number, b: bigint) => [number, number, number];
    readonly metrics: (a: number, b: number) => [number, number, number, number];
    readonly sequence: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
