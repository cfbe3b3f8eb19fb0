import * as fs from 'node:fs'

import { UsageError } from './errors'

export const MAGIC = 'FEDR'
export const FORMAT_VERSION = 1
const HEADER_BYTES = 22 // magic(4) + version u16 + d_in u32 + classes u32 + records u64

/**
 * Serialize labeled feature vectors to the little-endian FEDR layout:
 * header, then u16-length-prefixed UTF-8 class names, then records of
 * u32 label + d_in float32 values.
 */
export function encodeFedr(
  classNames: string[],
  labels: number[],
  vectors: Float32Array[],
  dIn: number,
): Buffer {
  if (labels.length !== vectors.length) {
    throw new UsageError(
      `${labels.length} labels for ${vectors.length} vectors`,
    )
  }
  const names = classNames.map(n => Buffer.from(n, 'utf-8'))
  const namesBytes = names.reduce((sum, n) => sum + 2 + n.length, 0)
  const recordBytes = 4 + dIn * 4
  const buf = Buffer.alloc(
    HEADER_BYTES + namesBytes + recordBytes * labels.length,
  )
  buf.write(MAGIC, 0, 'ascii')
  buf.writeUInt16LE(FORMAT_VERSION, 4)
  buf.writeUInt32LE(dIn, 6)
  buf.writeUInt32LE(classNames.length, 10)
  buf.writeBigUInt64LE(BigInt(labels.length), 14)
  let offset = HEADER_BYTES
  for (const n of names) {
    buf.writeUInt16LE(n.length, offset)
    n.copy(buf, offset + 2)
    offset += 2 + n.length
  }
  const view = new DataView(buf.buffer, buf.byteOffset)
  for (let i = 0; i < labels.length; i++) {
    const label = labels[i]
    const vec = vectors[i]
    if (!Number.isInteger(label) || label < 0 || label >= classNames.length) {
      throw new UsageError(`record ${i} has label ${label}, ` +
        `expected 0..${classNames.length - 1}`)
    }
    if (vec.length !== dIn) {
      throw new UsageError(
        `record ${i} has ${vec.length} values, expected ${dIn}`,
      )
    }
    view.setUint32(offset, label, true)
    offset += 4
    for (let j = 0; j < dIn; j++) {
      view.setFloat32(offset, vec[j], true)
      offset += 4
    }
  }
  return buf
}

export function writeFedr(
  path: string,
  classNames: string[],
  labels: number[],
  vectors: Float32Array[],
  dIn: number,
): void {
  fs.writeFileSync(path, encodeFedr(classNames, labels, vectors, dIn))
}
