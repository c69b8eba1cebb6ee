/** Human-readable trace summaries: header fields, event counts, n growth. */

import { promises as fs } from 'node:fs';

import { ParsedTrace, parseTrace } from './trace.js';

export interface RoundSummary {
  roundId: number;
  promptLen: number;
  attnRows: number;
  nStart: number;
  nEnd: number;
}

export interface TraceSummary {
  layers: number;
  heads: number;
  flags: number;
  eventCount: number;
  attnRowCount: number;
  tokenCount: number;
  rounds: RoundSummary[];
}

export function summarise(trace: ParsedTrace): TraceSummary {
  const rounds: RoundSummary[] = [];
  let tokenCount = 0;
  let attnRowCount = 0;
  let current: RoundSummary | null = null;
  for (const event of trace.events) {
    if (event.kind === 'roundStart') {
      current = {
        roundId: event.roundId,
        promptLen: event.promptLen,
        attnRows: 0,
        nStart: 0,
        nEnd: 0,
      };
      rounds.push(current);
    } else if (event.kind === 'tokens') {
      tokenCount += event.modality.length;
    } else if (event.kind === 'attnRow') {
      attnRowCount += 1;
      if (current) {
        if (current.attnRows === 0) current.nStart = event.probs.length;
        current.attnRows += 1;
        current.nEnd = Math.max(current.nEnd, event.probs.length);
      }
    }
  }
  return {
    layers: trace.header.layers,
    heads: trace.header.heads,
    flags: trace.header.flags,
    eventCount: trace.events.length,
    attnRowCount,
    tokenCount,
    rounds,
  };
}

export function formatSummary(summary: TraceSummary): string {
  const lines = [
    `layers=${summary.layers} heads=${summary.heads} flags=${summary.flags}`,
    `events=${summary.eventCount} attn_rows=${summary.attnRowCount} tokens=${summary.tokenCount} rounds=${summary.rounds.length}`,
  ];
  for (const round of summary.rounds) {
    lines.push(
      `round ${round.roundId}: prompt_len=${round.promptLen} rows=${round.attnRows} n=${round.nStart}..${round.nEnd}`,
    );
  }
  return lines.join('\n');
}

export async function inspectFile(file: string, strict = true): Promise<TraceSummary> {
  const data = await fs.readFile(file);
  return summarise(parseTrace(data, strict));
}
