/**
 * KVTRACE1 binary writer/reader. The byte layout is the cross-language
 * contract with the replay engine (see ../docs/trace_format.md): little
 * endian throughout, float64 payload in layer-major, head-minor order
 * with Q, K, V blocks per (layer, head).
 */

export const MAGIC = "KVTRACE1";
export const FORMAT_VERSION = 1;

export class TraceFormatError extends Error {}

export interface Trace {
  modelName: string;
  numLayers: number;
  numHeads: number;
  headDim: number;
  promptLen: number;
  totalLen: number;
  flags: number;
  /** [layer][head] -> Float64Array(totalLen * headDim), row-major */
  q: Float64Array[][];
  k: Float64Array[][];
  v: Float64Array[][];
}

export function encodeTrace(trace: Trace): Buffer {
  const name = Buffer.from(trace.modelName, "utf-8");
  const blockBytes = trace.totalLen * trace.headDim * 8;
  const headerBytes = 8 + 4 + 4 + 4 + name.length + 5 * 4;
  const payloadBytes = trace.numLayers * trace.numHeads * 3 * blockBytes;
  const buf = Buffer.alloc(headerBytes + payloadBytes);

  let off = 0;
  buf.write(MAGIC, off, "ascii"); off += 8;
  buf.writeUInt32LE(FORMAT_VERSION, off); off += 4;
  buf.writeUInt32LE(trace.flags >>> 0, off); off += 4;
  buf.writeUInt32LE(name.length, off); off += 4;
  name.copy(buf, off); off += name.length;
  for (const dim of [trace.numLayers, trace.numHeads, trace.headDim,
                     trace.promptLen, trace.totalLen]) {
    buf.writeUInt32LE(dim, off); off += 4;
  }

  const values = trace.totalLen * trace.headDim;
  for (let l = 0; l < trace.numLayers; l++) {
    for (let h = 0; h < trace.numHeads; h++) {
      for (const block of [trace.q[l][h], trace.k[l][h], trace.v[l][h]]) {
        if (block.length !== values) {
          throw new TraceFormatError(
            `block has ${block.length} values, expected ${values}`);
        }
        for (let i = 0; i < values; i++) {
          buf.writeDoubleLE(block[i], off); off += 8;
        }
      }
    }
  }
  return buf;
}

export function decodeTrace(buf: Buffer): Trace {
  const need = (bytes: number, off: number, what: string) => {
    if (off + bytes > buf.length) {
      throw new TraceFormatError(
        `truncated ${what}: expected ${off + bytes} bytes so far, file has ${buf.length}`);
    }
  };

  let off = 0;
  need(8, off, "magic");
  const magic = buf.toString("ascii", 0, 8); off = 8;
  if (magic !== MAGIC) {
    throw new TraceFormatError(`bad magic: expected "${MAGIC}", found "${magic}"`);
  }
  need(8, off, "header");
  const version = buf.readUInt32LE(off); off += 4;
  if (version !== FORMAT_VERSION) {
    throw new TraceFormatError(
      `unsupported trace version ${version}; this reader handles ${FORMAT_VERSION}`);
  }
  const flags = buf.readUInt32LE(off); off += 4;
  need(4, off, "name length");
  const nameLen = buf.readUInt32LE(off); off += 4;
  need(nameLen, off, "model name");
  const modelName = buf.toString("utf-8", off, off + nameLen); off += nameLen;
  need(20, off, "dimensions");
  const numLayers = buf.readUInt32LE(off); off += 4;
  const numHeads = buf.readUInt32LE(off); off += 4;
  const headDim = buf.readUInt32LE(off); off += 4;
  const promptLen = buf.readUInt32LE(off); off += 4;
  const totalLen = buf.readUInt32LE(off); off += 4;

  const values = totalLen * headDim;
  const expected = numLayers * numHeads * 3 * values * 8;
  const actual = buf.length - off;
  if (actual < expected) {
    throw new TraceFormatError(
      `truncated payload: expected ${expected} bytes, found ${actual}`);
  }
  if (actual > expected) {
    throw new TraceFormatError(
      `trailing bytes after payload: expected ${expected}, found ${actual}`);
  }

  const read = () => {
    const block = new Float64Array(values);
    for (let i = 0; i < values; i++) {
      block[i] = buf.readDoubleLE(off); off += 8;
    }
    return block;
  };
  const q: Float64Array[][] = [];
  const k: Float64Array[][] = [];
  const v: Float64Array[][] = [];
  for (let l = 0; l < numLayers; l++) {
    q.push([]); k.push([]); v.push([]);
    for (let h = 0; h < numHeads; h++) {
      q[l].push(read());
      k[l].push(read());
      v[l].push(read());
    }
  }
  return { modelName, numLayers, numHeads, headDim, promptLen, totalLen, flags, q, k, v };
}
