/**
 * Export orchestration: run the model over a prompt with greedy decoding,
 * capture per-(layer, head) Q/K/V for every token, and write the trace.
 */

import * as fs from "fs";
import * as path from "path";

import { loadModel } from "./checkpoint";
import { ModelError, TinyTransformer } from "./model";
import { tokenize } from "./tokenizer";
import { encodeTrace, Trace } from "./traceFormat";

export class WriteError extends Error {}

export interface ExportConfig {
  model: string;          // builtin name or checkpoint path
  prompt: string;
  genLen: number;         // >= 0 greedy continuation steps
  out: string;
  heads?: number[];       // optional subset of head indices to export
}

export interface ExportResult {
  trace: Trace;
  bytes: number;
  tokens: number[];
}

export function buildTrace(model: TinyTransformer, prompt: string, genLen: number,
                           heads?: number[]): Trace {
  if (genLen < 0) {
    throw new ModelError(`model error: generation length must be >= 0, got ${genLen}`);
  }
  const promptTokens = tokenize(prompt);
  const tokens = model.generate(promptTokens, genLen);

  // One full forward over the final sequence records every position's
  // projections; with deterministic weights this equals cached decoding.
  const capture = model.newCapture(tokens.length);
  model.forward(tokens, capture);

  const allHeads = Array.from({ length: model.config.heads }, (_, i) => i);
  const subset = heads === undefined || heads.length === 0 ? allHeads : [...heads].sort((a, b) => a - b);
  for (const h of subset) {
    if (!Number.isInteger(h) || h < 0 || h >= model.config.heads) {
      throw new ModelError(
        `model error: head index ${h} outside [0, ${model.config.heads})`);
    }
  }
  if (new Set(subset).size !== subset.length) {
    throw new ModelError("model error: duplicate head indices in filter");
  }

  const pick = (blocks: Float64Array[][]) =>
    blocks.map((layer) => subset.map((h) => layer[h]));
  return {
    modelName: model.config.name,
    numLayers: model.config.layers,
    numHeads: subset.length,
    headDim: model.config.headDim,
    promptLen: promptTokens.length,
    totalLen: tokens.length,
    flags: 0,  // additive positions only: keys are raw projections, plain MHA
    q: pick(capture.q),
    k: pick(capture.k),
    v: pick(capture.v),
  };
}

export function exportTrace(config: ExportConfig): ExportResult {
  const model = loadModel(config.model);
  const trace = buildTrace(model, config.prompt, config.genLen, config.heads);
  const encoded = encodeTrace(trace);
  try {
    const dir = path.dirname(config.out);
    if (dir && !fs.existsSync(dir)) {
      fs.mkdirSync(dir, { recursive: true });
    }
    fs.writeFileSync(config.out, encoded);
  } catch (err) {
    throw new WriteError(`write error: cannot write ${config.out} (${(err as Error).message})`);
  }
  const promptTokens = tokenize(config.prompt);
  return {
    trace,
    bytes: encoded.length,
    tokens: promptTokens,
  };
}
