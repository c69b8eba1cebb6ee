/**
 * Scripted multi-round capture: run a model over prompts, record per-layer
 * head-aggregated attention rows, and write them as a .imtrace file.
 *
 * The KV cache persists across rounds (the multi-round streaming setting),
 * so row widths grow monotonically over the whole session. Files are written
 * to a temporary sibling and renamed on success, never left half-written.
 */

import { promises as fs } from 'node:fs';
import path from 'node:path';

import {
  FLAG_HEAD_AGGREGATED,
  TraceEvent,
  TraceHeader,
  encodeTrace,
} from './trace.js';
import { ToyModel, parseModelId, tokenize } from './toyModel.js';

export type HeadAggregation = 'mean' | 'max';

export interface ExportSpec {
  model: string;
  rounds: string[];
  maxDecodeSteps: number;
  headAggregation: HeadAggregation;
  out: string;
}

export interface CaptureStats {
  layers: number;
  heads: number;
  roundCount: number;
  tokenCount: number;
  attnRowCount: number;
  bytes: number;
}

export function aggregateHeads(perHead: Float32Array[], how: HeadAggregation): Float32Array {
  const n = perHead[0].length;
  const out = new Float32Array(n);
  if (how === 'mean') {
    for (const row of perHead) {
      for (let i = 0; i < n; i++) out[i] += row[i];
    }
    for (let i = 0; i < n; i++) out[i] = Math.fround(out[i] / perHead.length);
  } else {
    out.set(perHead[0]);
    for (const row of perHead.slice(1)) {
      for (let i = 0; i < n; i++) if (row[i] > out[i]) out[i] = row[i];
    }
  }
  return out;
}

function renormalise(row: Float32Array): Float32Array {
  let total = 0;
  for (const v of row) total += v;
  const out = new Float32Array(row.length);
  for (let i = 0; i < row.length; i++) out[i] = Math.fround(row[i] / total);
  return out;
}

export function captureEvents(spec: ExportSpec): { header: TraceHeader; events: TraceEvent[] } {
  if (spec.rounds.length === 0) {
    throw new Error('at least one round prompt is required');
  }
  if (spec.maxDecodeSteps < 0) {
    throw new Error('maxDecodeSteps must be >= 0');
  }
  const model = new ToyModel(parseModelId(spec.model));
  const { layers, heads } = model.config;
  const events: TraceEvent[] = [];

  for (let roundId = 0; roundId < spec.rounds.length; roundId++) {
    const promptTokens = tokenize(spec.rounds[roundId]);
    if (promptTokens.length === 0) {
      throw new Error(`round ${roundId} prompt is empty`);
    }
    const roundTokens = promptTokens.length + spec.maxDecodeSteps;
    events.push({ kind: 'roundStart', roundId, promptLen: promptTokens.length });
    events.push({ kind: 'tokens', modality: new Uint8Array(roundTokens) });

    let state: Float32Array | null = null;
    for (const token of promptTokens) {
      const result = model.step(token);
      state = result.state;
      for (let l = 0; l < layers; l++) {
        // max-aggregated rows are not probability rows until renormalised
        const row = aggregateHeads(result.attention.perHead[l], spec.headAggregation);
        events.push({
          kind: 'attnRow',
          layer: l,
          probs: spec.headAggregation === 'mean' ? row : renormalise(row),
        });
      }
    }
    for (let step = 0; step < spec.maxDecodeSteps; step++) {
      const token = model.greedyNext(state as Float32Array);
      const result = model.step(token);
      state = result.state;
      for (let l = 0; l < layers; l++) {
        const row = aggregateHeads(result.attention.perHead[l], spec.headAggregation);
        events.push({
          kind: 'attnRow',
          layer: l,
          probs: spec.headAggregation === 'mean' ? row : renormalise(row),
        });
      }
    }
  }

  const header: TraceHeader = { layers, heads, flags: FLAG_HEAD_AGGREGATED, version: 1 };
  return { header, events };
}

export async function capture(spec: ExportSpec): Promise<CaptureStats> {
  const { header, events } = captureEvents(spec);
  const data = encodeTrace(header, events);
  const tmp = path.join(
    path.dirname(path.resolve(spec.out)),
    `.${path.basename(spec.out)}.tmp-${process.pid}`,
  );
  await fs.writeFile(tmp, data);
  await fs.rename(tmp, spec.out);
  const attnRowCount = events.filter((e) => e.kind === 'attnRow').length;
  const tokenCount = events
    .filter((e) => e.kind === 'tokens')
    .reduce((acc, e) => acc + (e.kind === 'tokens' ? e.modality.length : 0), 0);
  return {
    layers: header.layers,
    heads: header.heads,
    roundCount: spec.rounds.length,
    tokenCount,
    attnRowCount,
    bytes: data.length,
  };
}
