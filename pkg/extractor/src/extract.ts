import * as fs from 'node:fs'
import * as path from 'node:path'

import { FrozenEncoder, INPUT_SIZE, PATCH } from './encoder'
import { UsageError } from './errors'
import { writeFedr, FORMAT_VERSION, MAGIC } from './fedr'
import { SUPPORTED_EXTENSIONS, decodeImageFile } from './image'

export interface ExtractOptions {
  root: string
  model: string
  out: string
  batch: number
  /** Receives one line per skipped (unreadable) image. */
  warn?: (message: string) => void
}

export interface ExtractResult {
  recordCount: number
  classNames: string[]
  skipped: string[]
  discovered: number
}

interface Candidate {
  filePath: string
  label: number
}

/**
 * Labeled folder tree: each direct subdirectory of the root is one
 * class; the label is the index of the directory name in sorted order.
 */
export function discoverImages(root: string): {
  classNames: string[]
  candidates: Candidate[]
} {
  let entries: fs.Dirent[]
  try {
    entries = fs.readdirSync(root, { withFileTypes: true })
  } catch (err) {
    throw new UsageError(`cannot read root: ${(err as Error).message}`)
  }
  const classNames = entries
    .filter(e => e.isDirectory())
    .map(e => e.name)
    .sort()
  if (classNames.length === 0) {
    throw new UsageError(`no class subdirectories under ${root}`)
  }
  const candidates: Candidate[] = []
  classNames.forEach((name, label) => {
    const dir = path.join(root, name)
    const files = fs
      .readdirSync(dir, { withFileTypes: true })
      .filter(e => e.isFile())
      .map(e => e.name)
      .filter(n =>
        (SUPPORTED_EXTENSIONS as readonly string[]).includes(
          path.extname(n).toLowerCase(),
        ),
      )
      .sort()
    for (const file of files) {
      candidates.push({ filePath: path.join(dir, file), label })
    }
  })
  return { classNames, candidates }
}

export function extract(opts: ExtractOptions): ExtractResult {
  if (!Number.isInteger(opts.batch) || opts.batch < 1) {
    throw new UsageError(`batch must be a positive integer, got ${opts.batch}`)
  }
  const warn = opts.warn ?? (msg => process.stderr.write(msg + '\n'))
  const encoder = new FrozenEncoder(opts.model)
  const { classNames, candidates } = discoverImages(opts.root)

  const labels: number[] = []
  const vectors: Float32Array[] = []
  const skipped: string[] = []
  for (let start = 0; start < candidates.length; start += opts.batch) {
    for (const cand of candidates.slice(start, start + opts.batch)) {
      let vec: Float32Array
      try {
        vec = encoder.encode(decodeImageFile(cand.filePath))
      } catch (err) {
        warn(`skipping ${cand.filePath}: ${(err as Error).message}`)
        skipped.push(path.relative(opts.root, cand.filePath))
        continue
      }
      labels.push(cand.label)
      vectors.push(vec)
    }
  }
  if (labels.length === 0) {
    throw new UsageError(
      `no readable images under ${opts.root} ` +
      `(${skipped.length} skipped, extensions ${SUPPORTED_EXTENSIONS.join(' ')})`,
    )
  }

  writeFedr(opts.out, classNames, labels, vectors, encoder.spec.dOut)
  const manifest = {
    format: MAGIC,
    version: FORMAT_VERSION,
    d_in: encoder.spec.dOut,
    record_count: labels.length,
    class_names: classNames,
    provenance:
      `extract(root=${path.basename(opts.root)}, model=${opts.model}, ` +
      `batch=${opts.batch})`,
    model: opts.model,
    encoder: encoder.spec.description,
    output_stage: 'raw encoder output, un-normalized',
    input_size: INPUT_SIZE,
    patch_size: PATCH,
    discovered_count: candidates.length,
    image_count: labels.length,
    skipped_count: skipped.length,
    skipped,
  }
  const manifestPath = opts.out.replace(/\.[^./\\]*$/, '') + '.json'
  fs.writeFileSync(manifestPath, JSON.stringify(manifest, null, 2) + '\n')
  return {
    recordCount: labels.length,
    classNames,
    skipped,
    discovered: candidates.length,
  }
}
