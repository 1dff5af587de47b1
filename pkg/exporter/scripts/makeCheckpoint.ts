/** Regenerate the committed checkpoint file from the builtin "tiny" preset. */

import * as fs from "fs";
import * as path from "path";

import { buildBuiltin, serializeCheckpoint } from "../src/checkpoint";

const out = process.argv[2] ?? path.join(__dirname, "..", "..", "models", "tiny.json");
const model = buildBuiltin("tiny");
fs.mkdirSync(path.dirname(out), { recursive: true });
fs.writeFileSync(out, serializeCheckpoint(model));
console.log(`wrote ${out}`);
