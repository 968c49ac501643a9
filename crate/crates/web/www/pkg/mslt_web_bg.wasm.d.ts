/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_race_free: (a: number, b: number) => void;
export const plan_costs: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const race_advance: (a: number, b: number) => [number, number, number, number];
export const race_attention: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const race_done: (a: number) => number;
export const race_new: (a: number, b: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
