#!/usr/bin/env node
import { parseArgs } from 'node:util'

import { ExtractorError } from './errors'
import { extract } from './extract'

const USAGE =
  'usage: extract --root <dir> --model <name> --out <file.fedr> [--batch <n>]'

export function main(argv: string[]): number {
  // tolerate being invoked both as `extract --root ...` and as
  // `node cli.js extract --root ...`
  const args = argv[0] === 'extract' ? argv.slice(1) : argv
  let parsed
  try {
    parsed = parseArgs({
      args,
      options: {
        root: { type: 'string' },
        model: { type: 'string' },
        out: { type: 'string' },
        batch: { type: 'string', default: '32' },
        help: { type: 'boolean', default: false },
      },
      allowPositionals: false,
    })
  } catch (err) {
    process.stderr.write(`${(err as Error).message}\n${USAGE}\n`)
    return 2
  }
  if (parsed.values.help) {
    process.stdout.write(USAGE + '\n')
    return 0
  }
  const { root, model, out } = parsed.values
  if (!root || !model || !out) {
    process.stderr.write(`--root, --model, and --out are required\n${USAGE}\n`)
    return 2
  }
  const batch = Number(parsed.values.batch)
  try {
    const result = extract({ root, model, out, batch })
    process.stdout.write(
      `wrote ${result.recordCount} records ` +
      `(${result.classNames.length} classes, ` +
      `${result.skipped.length} skipped) to ${out}\n`,
    )
    return 0
  } catch (err) {
    if (err instanceof ExtractorError) {
      process.stderr.write(`error: ${err.message}\n`)
      return 2
    }
    throw err
  }
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)))
}
