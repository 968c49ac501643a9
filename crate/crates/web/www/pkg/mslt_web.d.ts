/* tslint:disable */
/* eslint-disable */

export class Race {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * JSON lane updates after up to `n` more steps per lane.
     */
    advance(n: number): string;
    /**
     * JSON heatmap of one head of a lane's current model.
     */
    attention(lane: number, layer: number, head: number): string;
    done(): boolean;
    constructor(seed: number, total_steps: number);
}

/**
 * JSON per-stage costs of a layerwise plan and its ratios to scratch.
 */
export function plan_costs(num_layers: number, hidden: number, heads: number, num_stages: number, total_steps: number, retrain_fraction: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_race_free: (a: number, b: number) => void;
    readonly plan_costs: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly race_advance: (a: number, b: number) => [number, number, number, number];
    readonly race_attention: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly race_done: (a: number) => number;
    readonly race_new: (a: number, b: number) => [number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
