/**
 * Binary .imtrace encoding, bit-compatible with the Python reader.
 *
 * Layout, little-endian throughout:
 *   header: magic "IMT1" | version u32 (=1) | layers u32 | heads u32 | flags u32
 *   events: tag u8 + payload
 *     1 ROUND_START   round_id u32 | prompt_len u32
 *     2 TOKENS        count u32 | count modality bytes (0 text, 1 visual)
 *     3 ATTN_ROW      layer u32 | n u32 | n float32 probabilities
 *     4 SADDLE_TRUTH  round_id u32 | count u32 | count u32 column ids
 */

export const MAGIC = 'IMT1';
export const VERSION = 1;
export const FLAG_HEAD_AGGREGATED = 1;
export const HEADER_BYTES = 20;
export const ROW_SUM_TOLERANCE = 1e-3;

export const TAG_ROUND_START = 1;
export const TAG_TOKENS = 2;
export const TAG_ATTN_ROW = 3;
export const TAG_SADDLE_TRUTH = 4;

export interface TraceHeader {
  layers: number;
  heads: number;
  flags: number;
  version: number;
}

export type TraceEvent =
  | { kind: 'roundStart'; roundId: number; promptLen: number }
  | { kind: 'tokens'; modality: Uint8Array }
  | { kind: 'attnRow'; layer: number; probs: Float32Array }
  | { kind: 'saddleTruth'; roundId: number; ids: Uint32Array };

export class TraceFormatError extends Error {
  readonly offset: number | null;

  constructor(message: string, offset: number | null = null) {
    super(offset === null ? message : `${message} (byte offset ${offset})`);
    this.name = 'TraceFormatError';
    this.offset = offset;
  }
}

function rowSum(probs: Float32Array): number {
  let total = 0;
  for (let i = 0; i < probs.length; i++) total += probs[i];
  return total;
}

export function encodeHeader(header: TraceHeader): Buffer {
  const buf = Buffer.alloc(HEADER_BYTES);
  buf.write(MAGIC, 0, 'ascii');
  buf.writeUInt32LE(header.version, 4);
  buf.writeUInt32LE(header.layers, 8);
  buf.writeUInt32LE(header.heads, 12);
  buf.writeUInt32LE(header.flags, 16);
  return buf;
}

export function encodeEvent(event: TraceEvent): Buffer {
  switch (event.kind) {
    case 'roundStart': {
      const buf = Buffer.alloc(9);
      buf.writeUInt8(TAG_ROUND_START, 0);
      buf.writeUInt32LE(event.roundId, 1);
      buf.writeUInt32LE(event.promptLen, 5);
      return buf;
    }
    case 'tokens': {
      const buf = Buffer.alloc(5 + event.modality.length);
      buf.writeUInt8(TAG_TOKENS, 0);
      buf.writeUInt32LE(event.modality.length, 1);
      Buffer.from(event.modality).copy(buf, 5);
      return buf;
    }
    case 'attnRow': {
      if (event.probs.length === 0) {
        throw new TraceFormatError('ATTN_ROW must have at least one column');
      }
      const total = rowSum(event.probs);
      if (Math.abs(total - 1.0) > ROW_SUM_TOLERANCE) {
        throw new TraceFormatError(
          `ATTN_ROW sums to ${total.toFixed(6)}, expected 1 +/- ${ROW_SUM_TOLERANCE}`,
        );
      }
      const buf = Buffer.alloc(9 + 4 * event.probs.length);
      buf.writeUInt8(TAG_ATTN_ROW, 0);
      buf.writeUInt32LE(event.layer, 1);
      buf.writeUInt32LE(event.probs.length, 5);
      for (let i = 0; i < event.probs.length; i++) {
        buf.writeFloatLE(event.probs[i], 9 + 4 * i);
      }
      return buf;
    }
    case 'saddleTruth': {
      const buf = Buffer.alloc(9 + 4 * event.ids.length);
      buf.writeUInt8(TAG_SADDLE_TRUTH, 0);
      buf.writeUInt32LE(event.roundId, 1);
      buf.writeUInt32LE(event.ids.length, 5);
      for (let i = 0; i < event.ids.length; i++) {
        buf.writeUInt32LE(event.ids[i], 9 + 4 * i);
      }
      return buf;
    }
  }
}

export function encodeTrace(header: TraceHeader, events: TraceEvent[]): Buffer {
  return Buffer.concat([encodeHeader(header), ...events.map(encodeEvent)]);
}

export interface ParsedTrace {
  header: TraceHeader;
  events: TraceEvent[];
}

/** Parse a complete trace buffer; strict mode validates row sums and n growth. */
export function parseTrace(data: Buffer, strict = true): ParsedTrace {
  if (data.length < HEADER_BYTES) {
    throw new TraceFormatError(`truncated header: ${data.length} bytes`, 0);
  }
  if (data.toString('ascii', 0, 4) !== MAGIC) {
    throw new TraceFormatError(`bad magic ${JSON.stringify(data.toString('ascii', 0, 4))}`, 0);
  }
  const version = data.readUInt32LE(4);
  if (version !== VERSION) {
    throw new TraceFormatError(`unsupported version ${version}`, 4);
  }
  const header: TraceHeader = {
    version,
    layers: data.readUInt32LE(8),
    heads: data.readUInt32LE(12),
    flags: data.readUInt32LE(16),
  };

  const events: TraceEvent[] = [];
  let offset = HEADER_BYTES;
  let lastN = 0;
  const need = (bytes: number, what: string) => {
    if (offset + bytes > data.length) {
      throw new TraceFormatError(`truncated ${what}`, offset);
    }
  };
  while (offset < data.length) {
    const start = offset;
    const tag = data.readUInt8(offset);
    offset += 1;
    if (tag === TAG_ROUND_START) {
      need(8, 'ROUND_START');
      events.push({
        kind: 'roundStart',
        roundId: data.readUInt32LE(offset),
        promptLen: data.readUInt32LE(offset + 4),
      });
      offset += 8;
      lastN = 0;
    } else if (tag === TAG_TOKENS) {
      need(4, 'TOKENS count');
      const count = data.readUInt32LE(offset);
      offset += 4;
      need(count, 'TOKENS modality bytes');
      events.push({ kind: 'tokens', modality: new Uint8Array(data.subarray(offset, offset + count)) });
      offset += count;
    } else if (tag === TAG_ATTN_ROW) {
      need(8, 'ATTN_ROW header');
      const layer = data.readUInt32LE(offset);
      const n = data.readUInt32LE(offset + 4);
      offset += 8;
      need(4 * n, 'ATTN_ROW probabilities');
      const probs = new Float32Array(n);
      for (let i = 0; i < n; i++) probs[i] = data.readFloatLE(offset + 4 * i);
      offset += 4 * n;
      if (strict) {
        const total = rowSum(probs);
        if (Math.abs(total - 1.0) > ROW_SUM_TOLERANCE) {
          throw new TraceFormatError(`ATTN_ROW sums to ${total.toFixed(6)}`, start);
        }
        if (n < lastN) {
          throw new TraceFormatError(`ATTN_ROW n decreased within a round (${n} < ${lastN})`, start);
        }
      }
      lastN = Math.max(lastN, n);
      events.push({ kind: 'attnRow', layer, probs });
    } else if (tag === TAG_SADDLE_TRUTH) {
      need(8, 'SADDLE_TRUTH header');
      const roundId = data.readUInt32LE(offset);
      const count = data.readUInt32LE(offset + 4);
      offset += 8;
      need(4 * count, 'SADDLE_TRUTH ids');
      const ids = new Uint32Array(count);
      for (let i = 0; i < count; i++) ids[i] = data.readUInt32LE(offset + 4 * i);
      offset += 4 * count;
      events.push({ kind: 'saddleTruth', roundId, ids });
    } else {
      throw new TraceFormatError(`unknown event tag ${tag}`, start);
    }
  }
  return { header, events };
}
