/** Deterministic PRNG utilities for seeded weight initialization. */

export type Rand = () => number;

/** mulberry32: fast 32-bit PRNG with uniform output in [0, 1). */
export function mulberry32(seed: number): Rand {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) | 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

/** Box-Muller standard normal draw. */
export function gaussian(rand: Rand): number {
  let u = 0;
  let v = 0;
  while (u === 0) u = rand();
  while (v === 0) v = rand();
  return Math.sqrt(-2 * Math.log(u)) * Math.cos(2 * Math.PI * v);
}

/** Matrix of seeded gaussians scaled by `scale`, row-major rows x cols. */
export function gaussianMatrix(rand: Rand, rows: number, cols: number, scale: number): Float64Array {
  const out = new Float64Array(rows * cols);
  for (let i = 0; i < out.length; i++) out[i] = gaussian(rand) * scale;
  return out;
}
