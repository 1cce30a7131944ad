import { mkdtempSync } from 'fs'
import { tmpdir } from 'os'
import { dirname, join } from 'path'
import { fileURLToPath } from 'url'
import { describe, expect, it } from 'vitest'

import { exportSceneFeatures } from '../src/export.js'
import { loadPng } from '../src/image.js'
import { buildDemoBackbone, extractWithModel, loadModel, saveModel, tapLayer } from '../src/model.js'

const HERE = dirname(fileURLToPath(import.meta.url))
const SAMPLES = join(HERE, '..', 'samples')

describe('tfjs backbone path', () => {
  it('saves, reloads and extracts identical features', async () => {
    const dir = mkdtempSync(join(tmpdir(), 'model-'))
    const model = buildDemoBackbone(4, 8, 1)
    await saveModel(model, dir)
    const reloaded = await loadModel(dir)
    const img = loadPng(join(SAMPLES, 'ball_a.png'))
    const a = extractWithModel(model, img)
    const b = extractWithModel(reloaded, img)
    expect([b.height, b.width, b.channels]).toEqual([img.height / 4, img.width / 4, 8])
    expect(Array.from(b.data)).toEqual(Array.from(a.data))
  })

  it('taps a named intermediate layer', async () => {
    const model = buildDemoBackbone(4, 8, 2)
    const tapped = tapLayer(model, 'block1')
    const img = loadPng(join(SAMPLES, 'ball_b.png'))
    const feats = extractWithModel(tapped, img)
    expect(feats.channels).toBe(8)
    // relu layer output: non-negative before normalization is not guaranteed
    // after it, but every vector must be unit norm
    for (let i = 0; i < Math.min(50, feats.height * feats.width); i++) {
      let norm = 0
      for (let c = 0; c < feats.channels; c++) norm += feats.data[i * feats.channels + c] ** 2
      expect(Math.sqrt(norm)).toBeCloseTo(1.0, 4)
    }
    expect(() => tapLayer(model, 'nope')).toThrow()
  })

  it('drives the scene exporter end to end', async () => {
    const modelDir = mkdtempSync(join(tmpdir(), 'model-'))
    await saveModel(buildDemoBackbone(4, 6, 3), modelDir)
    const { mkdirSync, writeFileSync, cpSync } = await import('fs')
    const sceneDir = mkdtempSync(join(tmpdir(), 'scene-'))
    mkdirSync(join(sceneDir, 'images'))
    cpSync(join(SAMPLES, 'ball_a.png'), join(sceneDir, 'images', 'view_000.png'))
    const pose = [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]]
    writeFileSync(join(sceneDir, 'scene.json'), JSON.stringify({
      format: 'nfseg-scene', version: 1,
      camera: { fx: 80, fy: 80, cx: 63.5, cy: 47.5, width: 128, height: 96, near: 0.5, far: 5 },
      mask_labels: 1,
      views: [{ id: 'view_000', image: 'images/view_000.png', pose, mask: null, features: null, tokens: null }],
      split: { train: [0], test: [] },
      extras: {},
    }))
    const written = await exportSceneFeatures(sceneDir, {
      backend: 'tfjs', modelPath: modelDir, layer: 'features', stride: 4,
    })
    expect(written).toHaveLength(1)
  })
})
