#!/usr/bin/env node
/**
 * Export a KVTRACE1 attention trace from a small deterministic transformer.
 *
 * Exit codes: 0 success; 1 with a distinct "model error:", "tokenizer
 * error:", or "write error:" message on failure.
 */

import yargs from "yargs";
import { hideBin } from "yargs/helpers";

import { BUILTINS } from "./checkpoint";
import { exportTrace } from "./export";
import { ModelError } from "./model";
import { TokenizerError } from "./tokenizer";
import { WriteError } from "./export";

async function main(): Promise<number> {
  const argv = await yargs(hideBin(process.argv))
    .usage("$0 --model <name|checkpoint.json> --prompt <text> --out <file>")
    .option("model", {
      type: "string",
      default: "tiny",
      describe: `Builtin model (${Object.keys(BUILTINS).join(", ")}) or checkpoint path`,
    })
    .option("prompt", { type: "string", demandOption: true, describe: "Prompt text (byte-level tokens)" })
    .option("gen-len", { type: "number", default: 16, describe: "Greedy continuation steps" })
    .option("out", { type: "string", demandOption: true, describe: "Output trace path" })
    .option("heads", {
      type: "string",
      describe: "Comma-separated head subset to export, e.g. 0,2",
    })
    .strict()
    .help()
    .parse();

  const heads = argv.heads === undefined
    ? undefined
    : String(argv.heads).split(",").filter((s) => s.length).map((s) => {
        const n = Number(s);
        if (!Number.isInteger(n)) {
          throw new ModelError(`model error: head filter entry ${JSON.stringify(s)} is not an integer`);
        }
        return n;
      });

  const result = exportTrace({
    model: argv.model,
    prompt: argv.prompt,
    genLen: argv["gen-len"],
    out: argv.out,
    heads,
  });
  const t = result.trace;
  console.log(
    `wrote ${argv.out}: model=${t.modelName} layers=${t.numLayers} heads=${t.numHeads} ` +
    `head_dim=${t.headDim} prompt_len=${t.promptLen} total_len=${t.totalLen} ` +
    `(${result.bytes} bytes)`);
  return 0;
}

main()
  .then((code) => process.exit(code))
  .catch((err) => {
    if (err instanceof ModelError || err instanceof TokenizerError || err instanceof WriteError) {
      console.error(err.message);
    } else {
      console.error(`error: ${err?.message ?? err}`);
    }
    process.exit(1);
  });
