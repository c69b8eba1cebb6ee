/**
 * A tiny deterministic decoder-only transformer for capture testing.
 *
 * All weights derive from a seed via splitmix32, tokens are UTF-8 bytes, and
 * decoding is greedy, so captures are reproducible bit-for-bit. The model
 * keeps a growing KV cache across rounds and exposes per-layer, per-head
 * attention probabilities for every token it processes.
 */

export const VOCAB_SIZE = 256;

export interface ToyModelConfig {
  layers: number;
  heads: number;
  headDim: number;
  seed: number;
}

export interface StepAttention {
  /** per layer: heads x n probabilities over the cache (token included) */
  perHead: Float32Array[][];
}

function splitmix32(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x9e3779b9) >>> 0;
    let z = state;
    z ^= z >>> 16;
    z = Math.imul(z, 0x21f0aaad);
    z ^= z >>> 15;
    z = Math.imul(z, 0x735a2d97);
    z ^= z >>> 15;
    return (z >>> 0) / 0x100000000;
  };
}

function randomMatrix(rand: () => number, rows: number, cols: number, scale: number): Float32Array {
  const out = new Float32Array(rows * cols);
  for (let i = 0; i < out.length; i++) out[i] = (rand() - 0.5) * scale;
  return out;
}

function matVec(mat: Float32Array, rows: number, cols: number, vec: Float32Array): Float32Array {
  const out = new Float32Array(rows);
  for (let r = 0; r < rows; r++) {
    let acc = 0;
    const base = r * cols;
    for (let c = 0; c < cols; c++) acc += mat[base + c] * vec[c];
    out[r] = Math.fround(acc);
  }
  return out;
}

function softmaxInPlace(row: Float32Array): void {
  let max = -Infinity;
  for (const v of row) if (v > max) max = v;
  let total = 0;
  for (let i = 0; i < row.length; i++) {
    row[i] = Math.fround(Math.exp(row[i] - max));
    total += row[i];
  }
  for (let i = 0; i < row.length; i++) row[i] = Math.fround(row[i] / total);
}

export class ToyModel {
  readonly config: ToyModelConfig;
  readonly modelDim: number;
  private readonly embeddings: Float32Array; // VOCAB x modelDim
  private readonly wq: Float32Array[];
  private readonly wk: Float32Array[];
  private readonly wv: Float32Array[];
  private readonly readout: Float32Array; // VOCAB x modelDim
  private keys: Float32Array[][][] = []; // [layer][head][entry]
  private values: Float32Array[][][] = [];

  constructor(config: ToyModelConfig) {
    if (config.layers < 1 || config.heads < 1 || config.headDim < 1) {
      throw new Error('layers, heads and headDim must be positive');
    }
    this.config = config;
    this.modelDim = config.heads * config.headDim;
    const rand = splitmix32(config.seed);
    const scale = 1 / Math.sqrt(config.headDim);
    this.embeddings = randomMatrix(rand, VOCAB_SIZE, this.modelDim, 1.0);
    this.wq = [];
    this.wk = [];
    this.wv = [];
    for (let l = 0; l < config.layers; l++) {
      this.wq.push(randomMatrix(rand, this.modelDim, this.modelDim, scale));
      this.wk.push(randomMatrix(rand, this.modelDim, this.modelDim, scale));
      this.wv.push(randomMatrix(rand, this.modelDim, this.modelDim, scale));
    }
    this.readout = randomMatrix(rand, VOCAB_SIZE, this.modelDim, 1.0);
    this.reset();
  }

  reset(): void {
    const { layers, heads } = this.config;
    this.keys = Array.from({ length: layers }, () =>
      Array.from({ length: heads }, () => [] as Float32Array[]),
    );
    this.values = Array.from({ length: layers }, () =>
      Array.from({ length: heads }, () => [] as Float32Array[]),
    );
  }

  cacheLength(): number {
    return this.keys[0][0].length;
  }

  /** Process one token: returns attention per layer and the output state. */
  step(tokenId: number): { attention: StepAttention; state: Float32Array } {
    const { layers, heads, headDim } = this.config;
    if (tokenId < 0 || tokenId >= VOCAB_SIZE) {
      throw new Error(`token id ${tokenId} outside vocabulary`);
    }
    let x = Float32Array.from(
      this.embeddings.subarray(tokenId * this.modelDim, (tokenId + 1) * this.modelDim),
    );
    const perLayer: Float32Array[][] = [];
    const invSqrt = 1 / Math.sqrt(headDim);
    for (let l = 0; l < layers; l++) {
      const q = matVec(this.wq[l], this.modelDim, this.modelDim, x);
      const k = matVec(this.wk[l], this.modelDim, this.modelDim, x);
      const v = matVec(this.wv[l], this.modelDim, this.modelDim, x);
      const outs = new Float32Array(this.modelDim);
      const headProbs: Float32Array[] = [];
      for (let h = 0; h < heads; h++) {
        const hk = Float32Array.from(k.subarray(h * headDim, (h + 1) * headDim));
        const hv = Float32Array.from(v.subarray(h * headDim, (h + 1) * headDim));
        this.keys[l][h].push(hk);
        this.values[l][h].push(hv);
        const cacheK = this.keys[l][h];
        const cacheV = this.values[l][h];
        const n = cacheK.length;
        const logits = new Float32Array(n);
        for (let i = 0; i < n; i++) {
          let dot = 0;
          for (let d = 0; d < headDim; d++) dot += cacheK[i][d] * q[h * headDim + d];
          logits[i] = Math.fround(dot * invSqrt);
        }
        softmaxInPlace(logits);
        headProbs.push(logits);
        for (let d = 0; d < headDim; d++) {
          let acc = 0;
          for (let i = 0; i < n; i++) acc += logits[i] * cacheV[i][d];
          outs[h * headDim + d] = Math.fround(acc);
        }
      }
      perLayer.push(headProbs);
      const next = new Float32Array(this.modelDim);
      for (let d = 0; d < this.modelDim; d++) next[d] = Math.fround(x[d] + outs[d]);
      x = next;
    }
    return { attention: { perHead: perLayer }, state: x };
  }

  /** Greedy next token from the final state; ties go to the lowest id. */
  greedyNext(state: Float32Array): number {
    let best = 0;
    let bestScore = -Infinity;
    for (let t = 0; t < VOCAB_SIZE; t++) {
      let acc = 0;
      const base = t * this.modelDim;
      for (let d = 0; d < this.modelDim; d++) acc += this.readout[base + d] * state[d];
      if (acc > bestScore) {
        bestScore = acc;
        best = t;
      }
    }
    return best;
  }
}

/** Parse a model identifier of the form "toy:layers,heads,headDim,seed". */
export function parseModelId(id: string): ToyModelConfig {
  const match = /^toy:(\d+),(\d+),(\d+),(\d+)$/.exec(id);
  if (!match) {
    throw new Error(
      `unsupported model identifier ${JSON.stringify(id)}; expected "toy:layers,heads,headDim,seed"`,
    );
  }
  return {
    layers: Number(match[1]),
    heads: Number(match[2]),
    headDim: Number(match[3]),
    seed: Number(match[4]),
  };
}

/** UTF-8 byte tokenizer; the toy vocabulary is exactly the byte range. */
export function tokenize(text: string): number[] {
  return Array.from(Buffer.from(text, 'utf-8'));
}
