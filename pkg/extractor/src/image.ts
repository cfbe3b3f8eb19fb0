import * as fs from 'node:fs'
import * as path from 'node:path'

import { DecodeError } from './errors'
import { RawImage, decodePng } from './png'
import { decodePnm } from './ppm'

export const SUPPORTED_EXTENSIONS = ['.png', '.ppm', '.pgm'] as const

export function decodeImageFile(filePath: string): RawImage {
  const ext = path.extname(filePath).toLowerCase()
  const buf = fs.readFileSync(filePath)
  switch (ext) {
    case '.png':
      return decodePng(buf)
    case '.ppm':
    case '.pgm':
      return decodePnm(buf)
    default:
      throw new DecodeError(`no decoder for extension ${ext}`)
  }
}

/** Rec. 601 luma in [0, 1]; alpha, if present, is ignored. */
export function toGrayscale(img: RawImage): Float64Array {
  const { width, height, channels, data } = img
  const out = new Float64Array(width * height)
  if (channels === 1) {
    for (let i = 0; i < out.length; i++) out[i] = data[i] / 255
    return out
  }
  for (let i = 0; i < out.length; i++) {
    const p = i * channels
    out[i] =
      (0.299 * data[p] + 0.587 * data[p + 1] + 0.114 * data[p + 2]) / 255
  }
  return out
}

/** Bilinear resample of a grayscale image to size x size. */
export function resizeSquare(
  gray: Float64Array,
  width: number,
  height: number,
  size: number,
): Float64Array {
  const out = new Float64Array(size * size)
  const sx = width / size
  const sy = height / size
  for (let oy = 0; oy < size; oy++) {
    const fy = Math.min((oy + 0.5) * sy - 0.5, height - 1)
    const y0 = Math.max(Math.floor(fy), 0)
    const y1 = Math.min(y0 + 1, height - 1)
    const wy = Math.max(fy - y0, 0)
    for (let ox = 0; ox < size; ox++) {
      const fx = Math.min((ox + 0.5) * sx - 0.5, width - 1)
      const x0 = Math.max(Math.floor(fx), 0)
      const x1 = Math.min(x0 + 1, width - 1)
      const wx = Math.max(fx - x0, 0)
      const top = gray[y0 * width + x0] * (1 - wx) + gray[y0 * width + x1] * wx
      const bot = gray[y1 * width + x0] * (1 - wx) + gray[y1 * width + x1] * wx
      out[oy * size + ox] = top * (1 - wy) + bot * wy
    }
  }
  return out
}
