/**
 * A small self-contained multimodal transformer.
 *
 * Byte-level text tokens plus image patch embeddings run through a causal
 * pre-norm transformer; the final layer's hidden states feed mean pooling
 * (for /embed) and a greedy byte decoder (for /generate). Weights come from
 * a seeded PRNG, so every output is a pure function of (seed, inputs) --
 * the model is a deterministic stand-in wired exactly like a production
 * checkpoint would be behind the same interface.
 */

import { Rand, gaussianMatrix, mulberry32 } from "./rng.js";

export const PATCH_BYTES = 16;
export const MAX_PATCHES = 16;
export const MAX_TEXT_BYTES = 512;
export const GENERATION_CAP = 256;

const BYTE_VOCAB = 256;
const BOS = 256;
const EOS = 257;
const IMG_START = 258;
const IMG_END = 259;
const VOCAB = 260;

// Greedy decoding is masked to printable ASCII plus EOS so answers are
// readable strings rather than raw byte soup.
const FIRST_PRINTABLE = 32;
const LAST_PRINTABLE = 126;

interface LayerWeights {
  ln1g: Float64Array;
  ln1b: Float64Array;
  wq: Float64Array;
  wk: Float64Array;
  wv: Float64Array;
  wo: Float64Array;
  ln2g: Float64Array;
  ln2b: Float64Array;
  w1: Float64Array; // (4d x d)
  b1: Float64Array;
  w2: Float64Array; // (d x 4d)
  b2: Float64Array;
}

interface LayerCache {
  keys: Float64Array[];
  values: Float64Array[];
}

export interface PooledVectors {
  qPooled: Float64Array;
  vPooled: Float64Array;
}

function layerNorm(x: Float64Array, gain: Float64Array, bias: Float64Array): Float64Array {
  const n = x.length;
  let mean = 0;
  for (let i = 0; i < n; i++) mean += x[i];
  mean /= n;
  let variance = 0;
  for (let i = 0; i < n; i++) {
    const d = x[i] - mean;
    variance += d * d;
  }
  variance /= n;
  const inv = 1 / Math.sqrt(variance + 1e-5);
  const out = new Float64Array(n);
  for (let i = 0; i < n; i++) out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
  return out;
}

function matVec(w: Float64Array, rows: number, cols: number, x: Float64Array): Float64Array {
  const out = new Float64Array(rows);
  for (let r = 0; r < rows; r++) {
    let acc = 0;
    const base = r * cols;
    for (let c = 0; c < cols; c++) acc += w[base + c] * x[c];
    out[r] = acc;
  }
  return out;
}

function gelu(x: number): number {
  return 0.5 * x * (1 + Math.tanh(Math.sqrt(2 / Math.PI) * (x + 0.044715 * x * x * x)));
}

export class TinyVlm {
  readonly dModel: number;
  readonly nLayers: number;
  readonly nHeads: number;
  readonly modelName: string;

  private tokenEmbed: Float64Array; // (VOCAB x d)
  private patchEmbed: Float64Array; // (d x PATCH_BYTES)
  private layers: LayerWeights[];
  private lnfG: Float64Array;
  private lnfB: Float64Array;
  private head: Float64Array; // (VOCAB x d)

  constructor(seed: number, dModel = 64, nLayers = 2, nHeads = 4) {
    if (dModel % nHeads !== 0) throw new Error("dModel must divide into heads");
    this.dModel = dModel;
    this.nLayers = nLayers;
    this.nHeads = nHeads;
    this.modelName = `tiny-vlm-${dModel}-seed${seed}`;
    const rand: Rand = mulberry32(seed);
    const scale = 1 / Math.sqrt(dModel);
    this.tokenEmbed = gaussianMatrix(rand, VOCAB, dModel, 1.0);
    this.patchEmbed = gaussianMatrix(rand, dModel, PATCH_BYTES, 1 / Math.sqrt(PATCH_BYTES));
    this.layers = [];
    for (let l = 0; l < nLayers; l++) {
      this.layers.push({
        ln1g: new Float64Array(dModel).fill(1),
        ln1b: new Float64Array(dModel),
        wq: gaussianMatrix(rand, dModel, dModel, scale),
        wk: gaussianMatrix(rand, dModel, dModel, scale),
        wv: gaussianMatrix(rand, dModel, dModel, scale),
        wo: gaussianMatrix(rand, dModel, dModel, scale),
        ln2g: new Float64Array(dModel).fill(1),
        ln2b: new Float64Array(dModel),
        w1: gaussianMatrix(rand, 4 * dModel, dModel, scale),
        b1: new Float64Array(4 * dModel),
        w2: gaussianMatrix(rand, dModel, 4 * dModel, 1 / Math.sqrt(4 * dModel)),
        b2: new Float64Array(dModel),
      });
    }
    this.lnfG = new Float64Array(dModel).fill(1);
    this.lnfB = new Float64Array(dModel);
    this.head = gaussianMatrix(rand, VOCAB, dModel, scale);
  }

  private tokenEmbedding(id: number): Float64Array {
    return this.tokenEmbed.subarray(id * this.dModel, (id + 1) * this.dModel);
  }

  private patchEmbedding(patch: Uint8Array): Float64Array {
    const normalized = new Float64Array(PATCH_BYTES);
    for (let i = 0; i < PATCH_BYTES; i++) {
      normalized[i] = (patch[i] ?? 0) / 127.5 - 1;
    }
    return matVec(this.patchEmbed, this.dModel, PATCH_BYTES, normalized);
  }

  private position(index: number): Float64Array {
    const out = new Float64Array(this.dModel);
    for (let i = 0; i < this.dModel; i += 2) {
      const freq = 1 / Math.pow(10000, i / this.dModel);
      out[i] = Math.sin(index * freq);
      if (i + 1 < this.dModel) out[i + 1] = Math.cos(index * freq);
    }
    return out;
  }

  private freshCache(): LayerCache[] {
    return this.layers.map(() => ({ keys: [], values: [] }));
  }

  /** One causal step: feed an input embedding, return final-layer hidden. */
  private step(embedding: Float64Array, position: number, cache: LayerCache[]): Float64Array {
    const d = this.dModel;
    const dh = d / this.nHeads;
    const pos = this.position(position);
    let h = new Float64Array(d);
    for (let i = 0; i < d; i++) h[i] = embedding[i] + pos[i];

    for (let l = 0; l < this.nLayers; l++) {
      const w = this.layers[l];
      const c = cache[l];
      const normed = layerNorm(h, w.ln1g, w.ln1b);
      const q = matVec(w.wq, d, d, normed);
      const k = matVec(w.wk, d, d, normed);
      const v = matVec(w.wv, d, d, normed);
      c.keys.push(k);
      c.values.push(v);

      const attnOut = new Float64Array(d);
      const steps = c.keys.length;
      for (let head = 0; head < this.nHeads; head++) {
        const offset = head * dh;
        const scores = new Float64Array(steps);
        let maxScore = -Infinity;
        for (let t = 0; t < steps; t++) {
          let score = 0;
          const key = c.keys[t];
          for (let i = 0; i < dh; i++) score += q[offset + i] * key[offset + i];
          score /= Math.sqrt(dh);
          scores[t] = score;
          if (score > maxScore) maxScore = score;
        }
        let denom = 0;
        for (let t = 0; t < steps; t++) {
          scores[t] = Math.exp(scores[t] - maxScore);
          denom += scores[t];
        }
        for (let t = 0; t < steps; t++) {
          const weight = scores[t] / denom;
          const value = c.values[t];
          for (let i = 0; i < dh; i++) attnOut[offset + i] += weight * value[offset + i];
        }
      }
      const projected = matVec(w.wo, d, d, attnOut);
      for (let i = 0; i < d; i++) h[i] += projected[i];

      const normed2 = layerNorm(h, w.ln2g, w.ln2b);
      const hidden = matVec(w.w1, 4 * d, d, normed2);
      for (let i = 0; i < 4 * d; i++) hidden[i] = gelu(hidden[i] + w.b1[i]);
      const mlpOut = matVec(w.w2, d, 4 * d, hidden);
      for (let i = 0; i < d; i++) h[i] += mlpOut[i] + w.b2[i];
    }
    return layerNorm(h, this.lnfG, this.lnfB);
  }

  private imagePatches(image: Uint8Array): Uint8Array[] {
    const patches: Uint8Array[] = [];
    for (let start = 0; start < image.length && patches.length < MAX_PATCHES; start += PATCH_BYTES) {
      const patch = new Uint8Array(PATCH_BYTES);
      patch.set(image.subarray(start, start + PATCH_BYTES));
      patches.push(patch);
    }
    if (patches.length === 0) patches.push(new Uint8Array(PATCH_BYTES));
    return patches;
  }

  private textBytes(text: string): number[] {
    const encoded = new TextEncoder().encode(text);
    return Array.from(encoded.subarray(0, MAX_TEXT_BYTES));
  }

  /**
   * Pooled final-layer features. The question pool averages question byte
   * positions; the visual pool averages patch positions. Template tokens
   * (BOS/EOS and the image delimiters) are excluded from both pools.
   */
  embed(image: Uint8Array, question: string, systemPrompt: string): PooledVectors {
    const cache = this.freshCache();
    const d = this.dModel;
    let position = 0;
    const run = (embedding: Float64Array) => this.step(embedding, position++, cache);

    run(this.tokenEmbedding(BOS));
    run(this.tokenEmbedding(IMG_START));
    const vSum = new Float64Array(d);
    const patches = this.imagePatches(image);
    for (const patch of patches) {
      const hidden = run(this.patchEmbedding(patch));
      for (let i = 0; i < d; i++) vSum[i] += hidden[i];
    }
    run(this.tokenEmbedding(IMG_END));
    for (const byte of this.textBytes(systemPrompt)) run(this.tokenEmbedding(byte));
    const qSum = new Float64Array(d);
    const questionBytes = this.textBytes(question);
    for (const byte of questionBytes) {
      const hidden = run(this.tokenEmbedding(byte));
      for (let i = 0; i < d; i++) qSum[i] += hidden[i];
    }
    run(this.tokenEmbedding(EOS));

    const qPooled = new Float64Array(d);
    const vPooled = new Float64Array(d);
    const qCount = Math.max(questionBytes.length, 1);
    for (let i = 0; i < d; i++) {
      qPooled[i] = qSum[i] / qCount;
      vPooled[i] = vSum[i] / patches.length;
    }
    return { qPooled, vPooled };
  }

  /** Greedy decoding over printable bytes, at most maxNewTokens of them. */
  generate(
    image: Uint8Array,
    question: string,
    systemPrompt: string,
    wrappedContext: string,
    maxNewTokens: number,
  ): string {
    const budget = Math.min(Math.max(maxNewTokens, 1), GENERATION_CAP);
    const cache = this.freshCache();
    let position = 0;
    const run = (embedding: Float64Array) => this.step(embedding, position++, cache);

    run(this.tokenEmbedding(BOS));
    run(this.tokenEmbedding(IMG_START));
    for (const patch of this.imagePatches(image)) run(this.patchEmbedding(patch));
    let hidden = run(this.tokenEmbedding(IMG_END));
    const prompt = `${systemPrompt}\n${wrappedContext}${question}\n`;
    for (const byte of this.textBytes(prompt)) hidden = run(this.tokenEmbedding(byte));

    const produced: number[] = [];
    for (let step = 0; step < budget; step++) {
      let bestToken = EOS;
      let bestLogit = -Infinity;
      for (let token = FIRST_PRINTABLE; token <= LAST_PRINTABLE; token++) {
        const logit = this.logit(hidden, token);
        if (logit > bestLogit) {
          bestLogit = logit;
          bestToken = token;
        }
      }
      if (this.logit(hidden, EOS) > bestLogit) break;
      produced.push(bestToken);
      hidden = run(this.tokenEmbedding(bestToken));
    }
    return String.fromCharCode(...produced).trim();
  }

  private logit(hidden: Float64Array, token: number): number {
    const base = token * this.dModel;
    let acc = 0;
    for (let i = 0; i < this.dModel; i++) acc += this.head[base + i] * hidden[i];
    return acc;
  }
}
