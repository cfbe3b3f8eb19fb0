import * as zlib from 'node:zlib'

import { DecodeError } from './errors'

export interface RawImage {
  width: number
  height: number
  channels: number // 1 = gray, 3 = RGB, 4 = RGBA
  data: Uint8Array // row-major, channels interleaved
}

const SIGNATURE = Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a])

const CHANNELS_BY_COLOR_TYPE: Record<number, number> = {
  0: 1, // grayscale
  2: 3, // RGB
  6: 4, // RGBA
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c
  const pa = Math.abs(p - a)
  const pb = Math.abs(p - b)
  const pc = Math.abs(p - c)
  if (pa <= pb && pa <= pc) return a
  if (pb <= pc) return b
  return c
}

/** Decode an 8-bit non-interlaced PNG (color types 0, 2, 6). */
export function decodePng(buf: Buffer): RawImage {
  if (buf.length < SIGNATURE.length || !buf.subarray(0, 8).equals(SIGNATURE)) {
    throw new DecodeError('not a PNG file (bad signature)')
  }
  let width = 0
  let height = 0
  let channels = 0
  const idat: Buffer[] = []
  let sawIhdr = false
  let sawIend = false
  let offset = 8
  while (offset + 8 <= buf.length) {
    const length = buf.readUInt32BE(offset)
    const type = buf.toString('ascii', offset + 4, offset + 8)
    const dataStart = offset + 8
    if (dataStart + length + 4 > buf.length) {
      throw new DecodeError(`truncated ${type} chunk`)
    }
    const data = buf.subarray(dataStart, dataStart + length)
    if (type === 'IHDR') {
      if (length !== 13) throw new DecodeError('malformed IHDR chunk')
      width = data.readUInt32BE(0)
      height = data.readUInt32BE(4)
      const bitDepth = data.readUInt8(8)
      const colorType = data.readUInt8(9)
      const interlace = data.readUInt8(12)
      if (bitDepth !== 8) {
        throw new DecodeError(`unsupported bit depth ${bitDepth}`)
      }
      if (!(colorType in CHANNELS_BY_COLOR_TYPE)) {
        throw new DecodeError(`unsupported color type ${colorType}`)
      }
      if (interlace !== 0) {
        throw new DecodeError('interlaced PNG is not supported')
      }
      channels = CHANNELS_BY_COLOR_TYPE[colorType]
      sawIhdr = true
    } else if (type === 'IDAT') {
      idat.push(data)
    } else if (type === 'IEND') {
      sawIend = true
      break
    }
    offset = dataStart + length + 4 // skip CRC
  }
  if (!sawIhdr || !sawIend || idat.length === 0) {
    throw new DecodeError('missing IHDR, IDAT, or IEND chunk')
  }
  if (width === 0 || height === 0) {
    throw new DecodeError('empty image')
  }

  let raw: Buffer
  try {
    raw = zlib.inflateSync(Buffer.concat(idat))
  } catch (err) {
    throw new DecodeError(`corrupt pixel stream: ${(err as Error).message}`)
  }
  const stride = width * channels
  if (raw.length !== (stride + 1) * height) {
    throw new DecodeError(
      `pixel stream has ${raw.length} bytes, expected ${(stride + 1) * height}`,
    )
  }

  const out = new Uint8Array(stride * height)
  for (let y = 0; y < height; y++) {
    const filter = raw[y * (stride + 1)]
    const row = raw.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1))
    const prev = y > 0 ? out.subarray((y - 1) * stride, y * stride) : null
    const cur = out.subarray(y * stride, (y + 1) * stride)
    for (let x = 0; x < stride; x++) {
      const left = x >= channels ? cur[x - channels] : 0
      const up = prev ? prev[x] : 0
      const upLeft = prev && x >= channels ? prev[x - channels] : 0
      let value: number
      switch (filter) {
        case 0:
          value = row[x]
          break
        case 1:
          value = row[x] + left
          break
        case 2:
          value = row[x] + up
          break
        case 3:
          value = row[x] + ((left + up) >> 1)
          break
        case 4:
          value = row[x] + paeth(left, up, upLeft)
          break
        default:
          throw new DecodeError(`unknown scanline filter ${filter}`)
      }
      cur[x] = value & 0xff
    }
  }
  return { width, height, channels, data: out }
}
