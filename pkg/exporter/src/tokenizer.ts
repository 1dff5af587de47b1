/** Byte-level tokenizer: UTF-8 bytes are the token ids (vocab 256). */

export class TokenizerError extends Error {}

export function tokenize(prompt: string): number[] {
  const bytes = Buffer.from(prompt, "utf-8");
  if (bytes.length === 0) {
    throw new TokenizerError("tokenizer error: prompt produced zero tokens");
  }
  return Array.from(bytes);
}

export function detokenize(tokens: number[]): string {
  return Buffer.from(tokens).toString("utf-8");
}
