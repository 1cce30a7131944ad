/**
 * nfseg-export: write per-view `.nsf` feature maps (and optional `.nst`
 * token grids) into an nfseg scene directory.
 *
 *   nfseg-export features --scene <dir> [--backend handcrafted|tfjs]
 *                         [--model <dir>] [--layer <name>] [--stride 4]
 *   nfseg-export tokens   --scene <dir> --grid 4x4 [...same flags]
 */

import { DEFAULT_CONFIG, ExportConfig, exportPatchTokens, exportSceneFeatures } from './export.js'

function parseArgs(argv: string[]) {
  const [command, ...rest] = argv
  const flags = new Map<string, string>()
  for (let i = 0; i < rest.length; i += 2) {
    if (!rest[i].startsWith('--') || i + 1 >= rest.length) {
      throw new Error(`malformed flag ${rest[i]}`)
    }
    flags.set(rest[i].slice(2), rest[i + 1])
  }
  return { command, flags }
}

export async function main(argv: string[]): Promise<number> {
  let parsed
  try {
    parsed = parseArgs(argv)
  } catch (e) {
    console.error(`usage error: ${(e as Error).message}`)
    return 1
  }
  const { command, flags } = parsed
  const scene = flags.get('scene')
  if (!command || !scene) {
    console.error('usage: nfseg-export <features|tokens> --scene <dir> [options]')
    return 1
  }
  const config: ExportConfig = {
    backend: (flags.get('backend') ?? DEFAULT_CONFIG.backend) as ExportConfig['backend'],
    modelPath: flags.get('model'),
    layer: flags.get('layer'),
    stride: parseInt(flags.get('stride') ?? String(DEFAULT_CONFIG.stride), 10),
  }
  try {
    if (command === 'features') {
      const written = await exportSceneFeatures(scene, config)
      console.log(`wrote ${written.length} feature maps to ${scene}`)
    } else if (command === 'tokens') {
      const gridSpec = flags.get('grid') ?? '4x4'
      const [gh, gw] = gridSpec.split('x').map((v) => parseInt(v, 10))
      if (!gh || !gw) {
        console.error(`usage error: bad --grid ${gridSpec}`)
        return 1
      }
      const written = await exportPatchTokens(scene, { gh, gw }, config)
      console.log(`wrote ${written.length} token grids to ${scene}`)
    } else {
      console.error(`usage error: unknown command ${command}`)
      return 1
    }
  } catch (e) {
    console.error(`error: ${(e as Error).message}`)
    return 2
  }
  return 0
}

const isDirectRun = process.argv[1] && import.meta.url.endsWith(process.argv[1].split('/').pop()!)
if (isDirectRun) {
  main(process.argv.slice(2)).then((code) => process.exit(code))
}
