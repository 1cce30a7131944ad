import { cpSync, mkdirSync, mkdtempSync, readFileSync, writeFileSync } from 'fs'
import { tmpdir } from 'os'
import { dirname, join } from 'path'
import { fileURLToPath } from 'url'
import { describe, expect, it } from 'vitest'

import { exportPatchTokens, exportSceneFeatures } from '../src/export.js'
import { handcraftedFeatures } from '../src/handcrafted.js'
import { loadPng } from '../src/image.js'
import { readFeatureMap, readTokenGrid } from '../src/nsf.js'

const HERE = dirname(fileURLToPath(import.meta.url))
const SAMPLES = join(HERE, '..', 'samples')

/** A minimal two-view scene directory around the bundled sample photos. */
function makeSceneDir(): string {
  const dir = mkdtempSync(join(tmpdir(), 'scene-'))
  mkdirSync(join(dir, 'images'))
  cpSync(join(SAMPLES, 'ball_a.png'), join(dir, 'images', 'view_000.png'))
  cpSync(join(SAMPLES, 'ball_b.png'), join(dir, 'images', 'view_001.png'))
  const pose = [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]]
  writeFileSync(join(dir, 'scene.json'), JSON.stringify({
    format: 'nfseg-scene',
    version: 1,
    camera: { fx: 80, fy: 80, cx: 63.5, cy: 47.5, width: 128, height: 96, near: 0.5, far: 5 },
    mask_labels: 1,
    views: [
      { id: 'view_000', image: 'images/view_000.png', pose, mask: null, features: null, tokens: null },
      { id: 'view_001', image: 'images/view_001.png', pose, mask: null, features: null, tokens: null },
    ],
    split: { train: [0], test: [1] },
    extras: {},
  }))
  return dir
}

function pooled(feats: { height: number; width: number; channels: number; data: Float32Array },
                cx: number, cy: number, r: number): number[] {
  const acc = new Array(feats.channels).fill(0)
  let count = 0
  for (let y = 0; y < feats.height; y++) {
    for (let x = 0; x < feats.width; x++) {
      if (Math.hypot(x - cx, y - cy) < r) {
        for (let c = 0; c < feats.channels; c++) acc[c] += feats.data[(y * feats.width + x) * feats.channels + c]
        count++
      }
    }
  }
  let norm = 0
  for (let c = 0; c < feats.channels; c++) {
    acc[c] /= count
    norm += acc[c] * acc[c]
  }
  norm = Math.sqrt(norm) + 1e-12
  return acc.map((v) => v / norm)
}

const dot = (a: number[], b: number[]) => a.reduce((s, v, i) => s + v * b[i], 0)

describe('scene feature export', () => {
  it('writes one readable .nsf per view with consistent dims', async () => {
    const dir = makeSceneDir()
    const written = await exportSceneFeatures(dir)
    expect(written).toHaveLength(2)
    const a = readFeatureMap(join(dir, 'features', 'view_000.nsf'))
    const b = readFeatureMap(join(dir, 'features', 'view_001.nsf'))
    expect([a.height, a.width, a.channels]).toEqual([b.height, b.width, b.channels])
    const manifest = JSON.parse(readFileSync(join(dir, 'scene.json'), 'utf-8'))
    expect(manifest.views[0].features).toBe('features/view_000.nsf')
  })

  it('is deterministic: same image, identical bytes', async () => {
    const dir1 = makeSceneDir()
    const dir2 = makeSceneDir()
    await exportSceneFeatures(dir1)
    await exportSceneFeatures(dir2)
    for (const name of ['view_000.nsf', 'view_001.nsf']) {
      const x = readFileSync(join(dir1, 'features', name))
      const y = readFileSync(join(dir2, 'features', name))
      expect(x.equals(y)).toBe(true)
    }
  })

  it('same-object descriptors are closer than object-vs-background', () => {
    const objects = JSON.parse(readFileSync(join(SAMPLES, 'objects.json'), 'utf-8'))
    const stride = 4
    const imgA = loadPng(join(SAMPLES, 'ball_a.png'))
    const imgB = loadPng(join(SAMPLES, 'ball_b.png'))
    const featsA = handcraftedFeatures(imgA, stride)
    const featsB = handcraftedFeatures(imgB, stride)
    const a = objects['ball_a.png']
    const b = objects['ball_b.png']
    // pooled descriptors over the ball region in each photo, and over a
    // background region away from the ball
    const ballA = pooled(featsA, a.cx / stride, a.cy / stride, (a.r * 0.8) / stride)
    const ballB = pooled(featsB, b.cx / stride, b.cy / stride, (b.r * 0.8) / stride)
    const bgA = pooled(featsA, 6, 6, 5)
    const bgB = pooled(featsB, featsB.width - 7, 6, 5)
    const same = dot(ballA, ballB)
    const cross = Math.max(dot(ballA, bgA), dot(ballA, bgB), dot(ballB, bgA))
    expect(same).toBeGreaterThan(cross)
  })

  it('exports token grids the trainer can read as descriptors', async () => {
    const dir = makeSceneDir()
    await exportSceneFeatures(dir)
    const written = await exportPatchTokens(dir, { gh: 3, gw: 4 })
    expect(written).toHaveLength(2)
    const grid = readTokenGrid(join(dir, 'tokens', 'view_000.nst'))
    expect([grid.height, grid.width]).toEqual([3, 4])
    // tokens are unit-norm
    for (let i = 0; i < grid.height * grid.width; i++) {
      let norm = 0
      for (let c = 0; c < grid.channels; c++) norm += grid.data[i * grid.channels + c] ** 2
      expect(Math.sqrt(norm)).toBeCloseTo(1.0, 5)
    }
    const manifest = JSON.parse(readFileSync(join(dir, 'scene.json'), 'utf-8'))
    expect(manifest.views[1].tokens).toBe('tokens/view_001.nst')
  })
})
