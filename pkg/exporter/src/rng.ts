/**
 * Counter-based SplitMix64 stream, matching the replay engine's generator:
 *
 *   state_i = (seed + (i + 1) * 0x9E3779B97F4A7C15) mod 2^64
 *   z = state_i
 *   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9   (mod 2^64)
 *   z = (z ^ (z >> 27)) * 0x94D049BB133111EB   (mod 2^64)
 *   out_i = z ^ (z >> 31)
 *
 * Uniform doubles take the top 53 bits; Gaussians use Box-Muller pairs.
 * BigInt arithmetic keeps the 64-bit stream exact.
 */

const MASK = (1n << 64n) - 1n;
const GOLDEN = 0x9e3779b97f4a7c15n;
const MIX1 = 0xbf58476d1ce4e5b9n;
const MIX2 = 0x94d049bb133111ebn;
const INV53 = Math.pow(2, -53);

export class SplitMix64 {
  private seed: bigint;
  private counter: bigint;

  constructor(seed: number | bigint) {
    this.seed = BigInt(seed) & MASK;
    this.counter = 0n;
  }

  nextU64(): bigint {
    this.counter += 1n;
    let z = (this.seed + this.counter * GOLDEN) & MASK;
    z = ((z ^ (z >> 30n)) * MIX1) & MASK;
    z = ((z ^ (z >> 27n)) * MIX2) & MASK;
    return z ^ (z >> 31n);
  }

  uniform(): number {
    return Number(this.nextU64() >> 11n) * INV53;
  }

  /** Standard Gaussians, two per Box-Muller draw. */
  normals(n: number): Float64Array {
    const out = new Float64Array(n);
    for (let i = 0; i < n; i += 2) {
      const u1 = this.uniform();
      const u2 = this.uniform();
      const r = Math.sqrt(-2.0 * Math.log1p(-u1));
      const theta = 2.0 * Math.PI * u2;
      out[i] = r * Math.cos(theta);
      if (i + 1 < n) out[i + 1] = r * Math.sin(theta);
    }
    return out;
  }
}
