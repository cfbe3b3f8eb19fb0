import * as fs from 'node:fs'
import * as path from 'node:path'
import * as zlib from 'node:zlib'

function chunk(type: string, data: Buffer): Buffer {
  const head = Buffer.alloc(8)
  head.writeUInt32BE(data.length, 0)
  head.write(type, 4, 'ascii')
  const crc = Buffer.alloc(4)
  crc.writeUInt32BE(zlib.crc32(Buffer.concat([head.subarray(4), data])), 0)
  return Buffer.concat([head, data, crc])
}

/** Minimal RGB PNG writer (8-bit, color type 2, filter 0, no interlace). */
export function encodePng(
  width: number,
  height: number,
  rgb: Uint8Array,
): Buffer {
  const ihdr = Buffer.alloc(13)
  ihdr.writeUInt32BE(width, 0)
  ihdr.writeUInt32BE(height, 4)
  ihdr.writeUInt8(8, 8) // bit depth
  ihdr.writeUInt8(2, 9) // color type RGB
  const stride = width * 3
  const raw = Buffer.alloc((stride + 1) * height)
  for (let y = 0; y < height; y++) {
    raw[y * (stride + 1)] = 0
    Buffer.from(rgb.buffer, rgb.byteOffset + y * stride, stride).copy(
      raw,
      y * (stride + 1) + 1,
    )
  }
  return Buffer.concat([
    Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]),
    chunk('IHDR', ihdr),
    chunk('IDAT', zlib.deflateSync(raw)),
    chunk('IEND', Buffer.alloc(0)),
  ])
}

export function patternImage(
  width: number,
  height: number,
  variant: number,
): Buffer {
  const rgb = new Uint8Array(width * height * 3)
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const p = (y * width + x) * 3
      rgb[p] = (x * 7 + y * 13 + variant * 31) % 256
      rgb[p + 1] = (x * 3 + y * 5 + variant * 17) % 256
      rgb[p + 2] = (x * 11 + y * 2 + variant * 43) % 256
    }
  }
  return encodePng(width, height, rgb)
}

/** 2 classes x 3 images with varied sizes; returns the fixture root. */
export function makeFixture(base: string): string {
  const root = path.join(base, 'images')
  const sizes: Array<[number, number]> = [
    [16, 16],
    [24, 20],
    [20, 24],
  ]
  const classes = ['crop_a', 'weed_b']
  classes.forEach((cls, c) => {
    const dir = path.join(root, cls)
    fs.mkdirSync(dir, { recursive: true })
    sizes.forEach(([w, h], i) => {
      fs.writeFileSync(
        path.join(dir, `img_${i}.png`),
        patternImage(w, h, c * 3 + i),
      )
    })
  })
  return root
}
