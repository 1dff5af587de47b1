/**
 * Checkpoint loading: a model identifier is either a builtin preset name
 * (deterministic seeded weights) or a path to a JSON checkpoint file.
 */

import * as fs from "fs";

import { initWeights, ModelConfig, ModelError, ModelWeights, TinyTransformer } from "./model";

export const CHECKPOINT_FORMAT = "kvtrace-exporter-checkpoint-v1";

export interface BuiltinSpec {
  config: ModelConfig;
  seed: number;
}

export const BUILTINS: Record<string, BuiltinSpec> = {
  tiny: {
    config: { name: "tiny", vocabSize: 256, layers: 2, heads: 2, headDim: 8, maxSeq: 128, mlpDim: 32 },
    seed: 1234,
  },
  small: {
    config: { name: "small", vocabSize: 256, layers: 3, heads: 4, headDim: 8, maxSeq: 160, mlpDim: 64 },
    seed: 4321,
  },
};

export function buildBuiltin(name: string): TinyTransformer {
  const spec = BUILTINS[name];
  if (!spec) {
    throw new ModelError(
      `model error: unknown builtin model ${JSON.stringify(name)}; ` +
      `choose from ${Object.keys(BUILTINS).join(", ")} or pass a checkpoint path`);
  }
  return new TinyTransformer(spec.config, initWeights(spec.config, spec.seed));
}

export function serializeCheckpoint(model: TinyTransformer): string {
  const w = model.weights;
  return JSON.stringify({
    format: CHECKPOINT_FORMAT,
    config: model.config,
    weights: {
      tokEmb: Array.from(w.tokEmb),
      posEmb: Array.from(w.posEmb),
      layers: w.layers.map((l) => ({
        wq: Array.from(l.wq), wk: Array.from(l.wk), wv: Array.from(l.wv), wo: Array.from(l.wo),
        w1: Array.from(l.w1), b1: Array.from(l.b1), w2: Array.from(l.w2), b2: Array.from(l.b2),
      })),
    },
  });
}

function asArray(value: unknown, what: string): Float64Array {
  if (!Array.isArray(value) || value.some((x) => typeof x !== "number" || !Number.isFinite(x))) {
    throw new ModelError(`model error: checkpoint field ${what} is not a finite number array`);
  }
  return Float64Array.from(value as number[]);
}

export function parseCheckpoint(text: string): TinyTransformer {
  let raw: any;
  try {
    raw = JSON.parse(text);
  } catch (err) {
    throw new ModelError(`model error: checkpoint is not valid JSON (${(err as Error).message})`);
  }
  if (raw?.format !== CHECKPOINT_FORMAT) {
    throw new ModelError(
      `model error: unsupported checkpoint format ${JSON.stringify(raw?.format)}; ` +
      `expected ${CHECKPOINT_FORMAT}`);
  }
  const config = raw.config as ModelConfig;
  for (const field of ["name", "vocabSize", "layers", "heads", "headDim", "maxSeq", "mlpDim"]) {
    if (!(field in (config ?? {}))) {
      throw new ModelError(`model error: checkpoint config is missing ${field}`);
    }
  }
  const weights: ModelWeights = {
    tokEmb: asArray(raw.weights?.tokEmb, "tokEmb"),
    posEmb: asArray(raw.weights?.posEmb, "posEmb"),
    layers: (raw.weights?.layers ?? []).map((l: any, i: number) => ({
      wq: asArray(l?.wq, `layers[${i}].wq`),
      wk: asArray(l?.wk, `layers[${i}].wk`),
      wv: asArray(l?.wv, `layers[${i}].wv`),
      wo: asArray(l?.wo, `layers[${i}].wo`),
      w1: asArray(l?.w1, `layers[${i}].w1`),
      b1: asArray(l?.b1, `layers[${i}].b1`),
      w2: asArray(l?.w2, `layers[${i}].w2`),
      b2: asArray(l?.b2, `layers[${i}].b2`),
    })),
  };
  return new TinyTransformer(config, weights);
}

/** Resolve a model identifier: builtin name first, then checkpoint path. */
export function loadModel(identifier: string): TinyTransformer {
  if (identifier in BUILTINS) {
    return buildBuiltin(identifier);
  }
  if (!fs.existsSync(identifier)) {
    throw new ModelError(
      `model error: ${JSON.stringify(identifier)} is neither a builtin model ` +
      `(${Object.keys(BUILTINS).join(", ")}) nor an existing checkpoint file`);
  }
  return parseCheckpoint(fs.readFileSync(identifier, "utf-8"));
}
