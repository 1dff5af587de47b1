/**
 * A small from-scratch causal transformer with multi-head attention,
 * RMS normalization, a GELU MLP, learned additive positional embeddings,
 * and a tied output head. Everything runs in float64 with a fixed
 * operation order, so a (checkpoint, prompt) pair always reproduces the
 * same bytes.
 *
 * The forward pass can record every position's per-(layer, head) Q/K/V
 * rows, which is what the trace exporter consumes.
 */

import { SplitMix64 } from "./rng";

export class ModelError extends Error {}

export interface ModelConfig {
  name: string;
  vocabSize: number;
  layers: number;
  heads: number;
  headDim: number;
  maxSeq: number;
  mlpDim: number;
}

export interface LayerWeights {
  wq: Float64Array; // (dModel, dModel) row-major
  wk: Float64Array;
  wv: Float64Array;
  wo: Float64Array;
  w1: Float64Array; // (dModel, mlpDim)
  b1: Float64Array;
  w2: Float64Array; // (mlpDim, dModel)
  b2: Float64Array;
}

export interface ModelWeights {
  tokEmb: Float64Array; // (vocabSize, dModel)
  posEmb: Float64Array; // (maxSeq, dModel)
  layers: LayerWeights[];
}

/** Q/K/V rows for every token, indexed [layer][head][position * headDim + c]. */
export type Capture = { q: Float64Array[][]; k: Float64Array[][]; v: Float64Array[][] };

export function dModel(config: ModelConfig): number {
  return config.heads * config.headDim;
}

export function initWeights(config: ModelConfig, seed: number): ModelWeights {
  const d = dModel(config);
  const rng = new SplitMix64(seed);
  const scaled = (n: number, scale: number) => {
    const w = rng.normals(n);
    for (let i = 0; i < n; i++) w[i] *= scale;
    return w;
  };
  const layers: LayerWeights[] = [];
  for (let l = 0; l < config.layers; l++) {
    layers.push({
      wq: scaled(d * d, 1 / Math.sqrt(d)),
      wk: scaled(d * d, 1 / Math.sqrt(d)),
      wv: scaled(d * d, 1 / Math.sqrt(d)),
      wo: scaled(d * d, 1 / Math.sqrt(d)),
      w1: scaled(d * config.mlpDim, 1 / Math.sqrt(d)),
      b1: new Float64Array(config.mlpDim),
      w2: scaled(config.mlpDim * d, 1 / Math.sqrt(config.mlpDim)),
      b2: new Float64Array(d),
    });
  }
  return {
    tokEmb: scaled(config.vocabSize * d, 1.0),
    posEmb: scaled(config.maxSeq * d, 0.3),
    layers,
  };
}

function rmsNorm(x: Float64Array, d: number): Float64Array {
  const out = new Float64Array(x.length);
  const rows = x.length / d;
  for (let r = 0; r < rows; r++) {
    let sq = 0.0;
    for (let c = 0; c < d; c++) sq += x[r * d + c] * x[r * d + c];
    const inv = 1.0 / Math.sqrt(sq / d + 1e-8);
    for (let c = 0; c < d; c++) out[r * d + c] = x[r * d + c] * inv;
  }
  return out;
}

function gelu(x: number): number {
  // tanh approximation, fixed so reruns are bit-identical
  return 0.5 * x * (1.0 + Math.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)));
}

/** out(rows, cols) = x(rows, inner) @ w(inner, cols) */
function matmul(x: Float64Array, w: Float64Array, rows: number, inner: number, cols: number): Float64Array {
  const out = new Float64Array(rows * cols);
  for (let r = 0; r < rows; r++) {
    for (let i = 0; i < inner; i++) {
      const xv = x[r * inner + i];
      if (xv === 0.0) continue;
      for (let c = 0; c < cols; c++) {
        out[r * cols + c] += xv * w[i * cols + c];
      }
    }
  }
  return out;
}

export class TinyTransformer {
  constructor(public config: ModelConfig, public weights: ModelWeights) {
    const d = dModel(config);
    if (weights.tokEmb.length !== config.vocabSize * d) {
      throw new ModelError("model error: token embedding shape mismatch");
    }
    if (weights.posEmb.length !== config.maxSeq * d) {
      throw new ModelError("model error: positional embedding shape mismatch");
    }
    if (weights.layers.length !== config.layers) {
      throw new ModelError("model error: layer count mismatch");
    }
  }

  /**
   * Full causal forward over `tokens`, returning last-position logits and,
   * when `capture` is set, filling it with per-(layer, head) Q/K/V rows.
   */
  forward(tokens: number[], capture?: Capture): Float64Array {
    const { heads, headDim, vocabSize } = this.config;
    const d = dModel(this.config);
    const n = tokens.length;
    if (n > this.config.maxSeq) {
      throw new ModelError(
        `model error: sequence length ${n} exceeds model context ${this.config.maxSeq}`);
    }
    let x = new Float64Array(n * d);
    for (let t = 0; t < n; t++) {
      const tok = tokens[t];
      if (tok < 0 || tok >= vocabSize) {
        throw new ModelError(`model error: token id ${tok} outside vocab ${vocabSize}`);
      }
      for (let c = 0; c < d; c++) {
        x[t * d + c] = this.weights.tokEmb[tok * d + c] + this.weights.posEmb[t * d + c];
      }
    }

    const scale = 1.0 / Math.sqrt(headDim);
    for (let l = 0; l < this.config.layers; l++) {
      const lw = this.weights.layers[l];
      const normed = rmsNorm(x, d);
      const q = matmul(normed, lw.wq, n, d, d);
      const k = matmul(normed, lw.wk, n, d, d);
      const v = matmul(normed, lw.wv, n, d, d);
      if (capture) {
        for (let h = 0; h < heads; h++) {
          for (let t = 0; t < n; t++) {
            for (let c = 0; c < headDim; c++) {
              capture.q[l][h][t * headDim + c] = q[t * d + h * headDim + c];
              capture.k[l][h][t * headDim + c] = k[t * d + h * headDim + c];
              capture.v[l][h][t * headDim + c] = v[t * d + h * headDim + c];
            }
          }
        }
      }
      const attnOut = new Float64Array(n * d);
      for (let h = 0; h < heads; h++) {
        const off = h * headDim;
        for (let t = 0; t < n; t++) {
          // causal attention of position t over 0..t for this head
          const logits = new Float64Array(t + 1);
          let mx = -Infinity;
          for (let s = 0; s <= t; s++) {
            let dot = 0.0;
            for (let c = 0; c < headDim; c++) {
              dot += q[t * d + off + c] * k[s * d + off + c];
            }
            logits[s] = dot * scale;
            if (logits[s] > mx) mx = logits[s];
          }
          let z = 0.0;
          for (let s = 0; s <= t; s++) {
            logits[s] = Math.exp(logits[s] - mx);
            z += logits[s];
          }
          for (let s = 0; s <= t; s++) {
            const w = logits[s] / z;
            for (let c = 0; c < headDim; c++) {
              attnOut[t * d + off + c] += w * v[s * d + off + c];
            }
          }
        }
      }
      const projected = matmul(attnOut, lw.wo, n, d, d);
      for (let i = 0; i < x.length; i++) x[i] += projected[i];

      const mlpIn = rmsNorm(x, d);
      const hidden = matmul(mlpIn, lw.w1, n, d, this.config.mlpDim);
      for (let t = 0; t < n; t++) {
        for (let c = 0; c < this.config.mlpDim; c++) {
          hidden[t * this.config.mlpDim + c] = gelu(
            hidden[t * this.config.mlpDim + c] + lw.b1[c]);
        }
      }
      const mlpOut = matmul(hidden, lw.w2, n, this.config.mlpDim, d);
      for (let t = 0; t < n; t++) {
        for (let c = 0; c < d; c++) {
          x[t * d + c] += mlpOut[t * d + c] + lw.b2[c];
        }
      }
    }

    // tied output head over the final position
    const finalNorm = rmsNorm(x.subarray((n - 1) * d, n * d), d);
    const logits = new Float64Array(vocabSize);
    for (let tok = 0; tok < vocabSize; tok++) {
      let dot = 0.0;
      for (let c = 0; c < d; c++) dot += finalNorm[c] * this.weights.tokEmb[tok * d + c];
      logits[tok] = dot;
    }
    return logits;
  }

  /** Greedy decoding: argmax next token, lowest id on exact ties. */
  generate(prompt: number[], steps: number): number[] {
    const tokens = [...prompt];
    for (let i = 0; i < steps; i++) {
      const logits = this.forward(tokens);
      let best = 0;
      for (let tok = 1; tok < logits.length; tok++) {
        if (logits[tok] > logits[best]) best = tok;
      }
      tokens.push(best);
    }
    return tokens;
  }

  newCapture(length: number): Capture {
    const make = () =>
      Array.from({ length: this.config.layers }, () =>
        Array.from({ length: this.config.heads }, () =>
          new Float64Array(length * this.config.headDim)));
    return { q: make(), k: make(), v: make() };
  }
}
