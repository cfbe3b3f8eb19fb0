import { DecodeError } from './errors'
import { RawImage } from './png'

/** Decode binary netpbm images: P5 (grayscale) and P6 (RGB), maxval 255. */
export function decodePnm(buf: Buffer): RawImage {
  const magic = buf.toString('ascii', 0, 2)
  if (magic !== 'P5' && magic !== 'P6') {
    throw new DecodeError(`not a binary netpbm file (magic ${magic})`)
  }
  // header = magic + width + height + maxval as whitespace-separated
  // tokens; '#' starts a comment running to end of line
  const tokens: number[] = []
  let pos = 2
  while (tokens.length < 3 && pos < buf.length) {
    const ch = buf[pos]
    if (ch === 0x23) {
      while (pos < buf.length && buf[pos] !== 0x0a) pos++
    } else if (ch === 0x20 || ch === 0x09 || ch === 0x0a || ch === 0x0d) {
      pos++
    } else {
      let start = pos
      while (pos < buf.length && buf[pos] >= 0x30 && buf[pos] <= 0x39) pos++
      if (pos === start) throw new DecodeError('malformed netpbm header')
      tokens.push(parseInt(buf.toString('ascii', start, pos), 10))
    }
  }
  if (tokens.length < 3) throw new DecodeError('truncated netpbm header')
  const [width, height, maxval] = tokens
  if (width < 1 || height < 1) throw new DecodeError('empty image')
  if (maxval !== 255) {
    throw new DecodeError(`unsupported maxval ${maxval}, expected 255`)
  }
  pos++ // single whitespace byte separates header from pixel data
  const channels = magic === 'P6' ? 3 : 1
  const need = width * height * channels
  if (buf.length - pos < need) {
    throw new DecodeError(
      `pixel data has ${buf.length - pos} bytes, expected ${need}`,
    )
  }
  return {
    width,
    height,
    channels,
    data: new Uint8Array(buf.subarray(pos, pos + need)),
  }
}
