/**
 * Scene-level export: one `.nsf` per view (dense features) and optionally
 * one `.nst` per view (per-grid-cell descriptor tokens), wired back into the
 * scene manifest so the trainer picks them up.
 */

import { mkdirSync, readFileSync, writeFileSync } from 'fs'
import { join } from 'path'

import { FeatureTensor, writeFeatureMap, writeTokenGrid } from './nsf.js'
import { RgbImage, loadPng, resizeToStride } from './image.js'
import { HANDCRAFTED_CHANNELS, handcraftedFeatures } from './handcrafted.js'
import { extractWithModel, loadModel, tapLayer } from './model.js'

export interface ExportConfig {
  /** 'handcrafted' needs no weights; 'tfjs' loads modelPath and taps layer */
  backend: 'handcrafted' | 'tfjs'
  modelPath?: string
  layer?: string
  /** patch-embedding stride: images resize so the shorter side is a
   * multiple of it, and the handcrafted backend downsamples by it */
  stride: number
}

export const DEFAULT_CONFIG: ExportConfig = { backend: 'handcrafted', stride: 4 }

interface SceneManifest {
  format: string
  views: { id: string; image: string; features?: string | null; tokens?: string | null }[]
  [key: string]: unknown
}

export function readManifest(sceneDir: string): SceneManifest {
  const manifest = JSON.parse(readFileSync(join(sceneDir, 'scene.json'), 'utf-8'))
  if (manifest.format !== 'nfseg-scene') {
    throw new Error(`not an nfseg-scene manifest: ${sceneDir}`)
  }
  return manifest
}

async function makeExtractor(config: ExportConfig): Promise<(img: RgbImage) => FeatureTensor> {
  if (config.backend === 'handcrafted') {
    return (img) => handcraftedFeatures(img, config.stride)
  }
  if (!config.modelPath) throw new Error('tfjs backend needs modelPath')
  const model = tapLayer(await loadModel(config.modelPath), config.layer ?? '')
  return (img) => extractWithModel(model, img)
}

export async function exportSceneFeatures(
  sceneDir: string,
  config: ExportConfig = DEFAULT_CONFIG,
): Promise<string[]> {
  const manifest = readManifest(sceneDir)
  const extract = await makeExtractor(config)
  mkdirSync(join(sceneDir, 'features'), { recursive: true })
  const written: string[] = []
  let dims: [number, number, number] | null = null
  for (const view of manifest.views) {
    const img = resizeToStride(loadPng(join(sceneDir, view.image)), config.stride)
    const feats = extract(img)
    if (dims === null) {
      dims = [feats.height, feats.width, feats.channels]
    } else if (dims[0] !== feats.height || dims[1] !== feats.width || dims[2] !== feats.channels) {
      throw new Error(
        `view ${view.id}: feature dims ${feats.height}x${feats.width}x${feats.channels} ` +
        `differ from ${dims.join('x')}`)
    }
    const rel = `features/${view.id}.nsf`
    writeFeatureMap(join(sceneDir, rel), feats)
    view.features = rel
    written.push(rel)
  }
  writeFileSync(join(sceneDir, 'scene.json'), JSON.stringify(manifest, null, 2) + '\n')
  return written
}

/** Mean-pool features into a gh x gw grid of L2-normalized tokens. */
export function poolTokens(feats: FeatureTensor, gh: number, gw: number): FeatureTensor {
  const { height, width, channels } = feats
  const data = new Float32Array(gh * gw * channels)
  for (let gy = 0; gy < gh; gy++) {
    const y0 = Math.floor((gy * height) / gh)
    const y1 = Math.max(y0 + 1, Math.floor(((gy + 1) * height) / gh))
    for (let gx = 0; gx < gw; gx++) {
      const x0 = Math.floor((gx * width) / gw)
      const x1 = Math.max(x0 + 1, Math.floor(((gx + 1) * width) / gw))
      const acc = new Float64Array(channels)
      let count = 0
      for (let y = y0; y < y1; y++) {
        for (let x = x0; x < x1; x++) {
          for (let c = 0; c < channels; c++) acc[c] += feats.data[(y * width + x) * channels + c]
          count++
        }
      }
      let norm = 0
      for (let c = 0; c < channels; c++) {
        acc[c] /= count
        norm += acc[c] * acc[c]
      }
      norm = Math.sqrt(norm) + 1e-12
      for (let c = 0; c < channels; c++) {
        data[(gy * gw + gx) * channels + c] = acc[c] / norm
      }
    }
  }
  return { height: gh, width: gw, channels, data }
}

export async function exportPatchTokens(
  sceneDir: string,
  grid: { gh: number; gw: number },
  config: ExportConfig = DEFAULT_CONFIG,
): Promise<string[]> {
  const manifest = readManifest(sceneDir)
  const extract = await makeExtractor(config)
  mkdirSync(join(sceneDir, 'tokens'), { recursive: true })
  const written: string[] = []
  for (const view of manifest.views) {
    const img = resizeToStride(loadPng(join(sceneDir, view.image)), config.stride)
    const tokens = poolTokens(extract(img), grid.gh, grid.gw)
    const rel = `tokens/${view.id}.nst`
    writeTokenGrid(join(sceneDir, rel), tokens)
    view.tokens = rel
    written.push(rel)
  }
  writeFileSync(join(sceneDir, 'scene.json'), JSON.stringify(manifest, null, 2) + '\n')
  return written
}

export { HANDCRAFTED_CHANNELS }
