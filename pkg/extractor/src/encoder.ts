import { UsageError } from './errors'
import { RawImage } from './png'
import { resizeSquare, toGrayscale } from './image'

export interface ModelSpec {
  dOut: number
  hidden: number
  description: string
}

// frozen random-feature encoders: weights are derived from the model
// name alone, so the same name always produces the same network
export const MODELS: Record<string, ModelSpec> = {
  'frozen-rp-512': {
    dOut: 512,
    hidden: 48,
    description:
      'patched random-projection encoder, 32x32 gray input, 512-d output',
  },
  'frozen-rp-64': {
    dOut: 64,
    hidden: 16,
    description:
      'patched random-projection encoder, 32x32 gray input, 64-d output',
  },
}

export const INPUT_SIZE = 32
export const PATCH = 8

function fnv1a(text: string): number {
  let h = 0x811c9dc5
  for (let i = 0; i < text.length; i++) {
    h ^= text.charCodeAt(i)
    h = Math.imul(h, 0x01000193) >>> 0
  }
  return h >>> 0
}

/** splitmix32: tiny deterministic PRNG for frozen weight generation. */
function splitmix32(seed: number): () => number {
  let state = seed >>> 0
  return () => {
    state = (state + 0x9e3779b9) >>> 0
    let z = state
    z = Math.imul(z ^ (z >>> 16), 0x21f0aaad) >>> 0
    z = Math.imul(z ^ (z >>> 15), 0x735a2d97) >>> 0
    return ((z ^ (z >>> 15)) >>> 0) / 4294967296
  }
}

function gaussians(count: number, next: () => number): Float64Array {
  const out = new Float64Array(count)
  for (let i = 0; i < count; i += 2) {
    let u = next()
    while (u === 0) u = next()
    const r = Math.sqrt(-2 * Math.log(u))
    const t = 2 * Math.PI * next()
    out[i] = r * Math.cos(t)
    if (i + 1 < count) out[i + 1] = r * Math.sin(t)
  }
  return out
}

function gelu(x: number): number {
  // tanh approximation
  const c = Math.sqrt(2 / Math.PI)
  return 0.5 * x * (1 + Math.tanh(c * (x + 0.044715 * x * x * x)))
}

export class FrozenEncoder {
  readonly name: string
  readonly spec: ModelSpec
  private readonly w1: Float64Array // (PATCH*PATCH, hidden)
  private readonly b1: Float64Array
  private readonly w2: Float64Array // (nPatches*hidden, dOut)
  private readonly b2: Float64Array
  private readonly nPatches: number

  constructor(name: string) {
    const spec = MODELS[name]
    if (!spec) {
      const known = Object.keys(MODELS).sort().join(', ')
      throw new UsageError(`unknown model "${name}" (available: ${known})`)
    }
    this.name = name
    this.spec = spec
    this.nPatches = (INPUT_SIZE / PATCH) ** 2
    const next = splitmix32(fnv1a(name))
    const dPatch = PATCH * PATCH
    const dMid = this.nPatches * spec.hidden
    // generation order is part of the model definition: w1, b1, w2, b2
    this.w1 = gaussians(dPatch * spec.hidden, next)
    this.b1 = gaussians(spec.hidden, next)
    this.w2 = gaussians(dMid * spec.dOut, next)
    this.b2 = gaussians(spec.dOut, next)
    const s1 = 1 / Math.sqrt(dPatch)
    for (let i = 0; i < this.w1.length; i++) this.w1[i] *= s1
    const s2 = 1 / Math.sqrt(dMid)
    for (let i = 0; i < this.w2.length; i++) this.w2[i] *= s2
    for (let i = 0; i < this.b1.length; i++) this.b1[i] *= 0.1
    for (let i = 0; i < this.b2.length; i++) this.b2[i] *= 0.1
  }

  /** Encode one decoded image to an un-normalized feature vector. */
  encode(img: RawImage): Float32Array {
    const gray = resizeSquare(
      toGrayscale(img),
      img.width,
      img.height,
      INPUT_SIZE,
    )
    const { hidden, dOut } = this.spec
    const perSide = INPUT_SIZE / PATCH
    const mid = new Float64Array(this.nPatches * hidden)
    for (let py = 0; py < perSide; py++) {
      for (let px = 0; px < perSide; px++) {
        const p = py * perSide + px
        for (let h = 0; h < hidden; h++) {
          let acc = this.b1[h]
          for (let yy = 0; yy < PATCH; yy++) {
            const rowBase = (py * PATCH + yy) * INPUT_SIZE + px * PATCH
            const wBase = yy * PATCH * hidden + h
            for (let xx = 0; xx < PATCH; xx++) {
              acc += gray[rowBase + xx] * this.w1[wBase + xx * hidden]
            }
          }
          mid[p * hidden + h] = gelu(acc)
        }
      }
    }
    const out = new Float32Array(dOut)
    for (let o = 0; o < dOut; o++) {
      let acc = this.b2[o]
      for (let m = 0; m < mid.length; m++) {
        acc += mid[m] * this.w2[m * dOut + o]
      }
      out[o] = Math.fround(acc)
    }
    return out
  }
}
