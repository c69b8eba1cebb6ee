#!/usr/bin/env node
/**
 * imtrace-export capture --model toy:2,2,8,1 --round "..." [--round "..."]
 *     --decode-steps 4 [--head-agg mean|max] --out file.imtrace
 * imtrace-export inspect --trace file.imtrace
 */

import { capture, ExportSpec, HeadAggregation } from './capture.js';
import { formatSummary, inspectFile } from './inspect.js';
import { TraceFormatError } from './trace.js';

function usage(message?: string): never {
  if (message) console.error(`error: ${message}`);
  console.error(
    'usage: imtrace-export capture --model <id> --round <prompt> [--round ...] ' +
      '[--decode-steps N] [--head-agg mean|max] --out <file>\n' +
      '       imtrace-export inspect --trace <file>',
  );
  process.exit(2);
}

interface Flags {
  positional: string[];
  single: Map<string, string>;
  multi: Map<string, string[]>;
}

function parseFlags(argv: string[], multiKeys: Set<string>): Flags {
  const flags: Flags = { positional: [], single: new Map(), multi: new Map() };
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (!arg.startsWith('--')) {
      flags.positional.push(arg);
      continue;
    }
    const key = arg.slice(2);
    const value = argv[i + 1];
    if (value === undefined) usage(`missing value for --${key}`);
    i += 1;
    if (multiKeys.has(key)) {
      const list = flags.multi.get(key) ?? [];
      list.push(value);
      flags.multi.set(key, list);
    } else if (flags.single.has(key)) {
      usage(`duplicate flag --${key}`);
    } else {
      flags.single.set(key, value);
    }
  }
  return flags;
}

async function runCapture(argv: string[]): Promise<number> {
  const flags = parseFlags(argv, new Set(['round']));
  const model = flags.single.get('model') ?? usage('--model is required');
  const out = flags.single.get('out') ?? usage('--out is required');
  const rounds = flags.multi.get('round') ?? usage('at least one --round is required');
  const decodeSteps = Number(flags.single.get('decode-steps') ?? '0');
  if (!Number.isInteger(decodeSteps) || decodeSteps < 0) {
    usage('--decode-steps must be a non-negative integer');
  }
  const headAgg = (flags.single.get('head-agg') ?? 'mean') as HeadAggregation;
  if (headAgg !== 'mean' && headAgg !== 'max') usage('--head-agg must be mean or max');
  const spec: ExportSpec = {
    model,
    rounds,
    maxDecodeSteps: decodeSteps,
    headAggregation: headAgg,
    out,
  };
  const stats = await capture(spec);
  console.log(
    `captured ${stats.roundCount} rounds, ${stats.attnRowCount} attention rows ` +
      `(${stats.layers} layers x ${stats.heads} heads) -> ${out} [${stats.bytes} bytes]`,
  );
  return 0;
}

async function runInspect(argv: string[]): Promise<number> {
  const flags = parseFlags(argv, new Set());
  const trace = flags.single.get('trace') ?? usage('--trace is required');
  const summary = await inspectFile(trace);
  console.log(formatSummary(summary));
  return 0;
}

async function main(): Promise<number> {
  const [command, ...rest] = process.argv.slice(2);
  try {
    if (command === 'capture') return await runCapture(rest);
    if (command === 'inspect') return await runInspect(rest);
    usage(command ? `unknown command ${command}` : undefined);
  } catch (err) {
    if (err instanceof TraceFormatError) {
      console.error(`trace error: ${err.message}`);
      return 1;
    }
    if (err instanceof Error) {
      console.error(`error: ${err.message}`);
      return 1;
    }
    throw err;
  }
}

main().then((code) => process.exit(code));
