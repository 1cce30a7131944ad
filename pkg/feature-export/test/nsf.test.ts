import { execFileSync } from 'child_process'
import { mkdtempSync, readFileSync, writeFileSync } from 'fs'
import { tmpdir } from 'os'
import { join } from 'path'
import { describe, expect, it } from 'vitest'

import { FeatureTensor, decodeTensor, encodeTensor, NSF_MAGIC,
         readFeatureMap, writeFeatureMap } from '../src/nsf.js'

function randomTensor(h: number, w: number, c: number, seed: number): FeatureTensor {
  // xorshift so the fixture is dependency-free and deterministic
  let state = seed >>> 0 || 1
  const next = () => {
    state ^= state << 13
    state ^= state >>> 17
    state ^= state << 5
    state >>>= 0
    return state / 0xffffffff - 0.5
  }
  const data = new Float32Array(h * w * c)
  for (let i = 0; i < data.length; i++) data[i] = Math.fround(next() * 4)
  return { height: h, width: w, channels: c, data }
}

describe('nsf format', () => {
  it('has the documented byte size', () => {
    const t: FeatureTensor = { height: 2, width: 2, channels: 3, data: new Float32Array(12) }
    expect(encodeTensor(NSF_MAGIC, t).length).toBe(64) // 4 magic + 12 dims + 48 payload
  })

  it('round-trips bit-exactly', () => {
    const dir = mkdtempSync(join(tmpdir(), 'nsf-'))
    for (let i = 0; i < 25; i++) {
      const t = randomTensor(1 + (i % 5), 2 + (i % 3), 1 + (i % 7), 1000 + i)
      const path = join(dir, `t${i}.nsf`)
      writeFeatureMap(path, t)
      const first = readFileSync(path)
      const back = readFeatureMap(path)
      expect(Array.from(back.data)).toEqual(Array.from(t.data))
      writeFeatureMap(path, back)
      expect(readFileSync(path).equals(first)).toBe(true)
    }
  })

  it('rejects bad magic and truncation', () => {
    const t = randomTensor(2, 2, 2, 7)
    const buf = encodeTensor(NSF_MAGIC, t)
    const bad = Buffer.from(buf)
    bad.write('XXXX', 0, 'ascii')
    expect(() => decodeTensor(NSF_MAGIC, bad)).toThrow(/bad magic/)
    expect(() => decodeTensor(NSF_MAGIC, buf.subarray(0, buf.length - 3))).toThrow(/truncated/)
  })

  it('rejects non-finite values', () => {
    const t = randomTensor(1, 1, 2, 9)
    t.data[0] = Number.NaN
    expect(() => encodeTensor(NSF_MAGIC, t)).toThrow(/non-finite/)
  })

  it('round-trips through the primary package scene_io', () => {
    const dir = mkdtempSync(join(tmpdir(), 'nsf-interop-'))
    const t = randomTensor(3, 4, 5, 42)
    const ours = join(dir, 'ours.nsf')
    writeFeatureMap(ours, t)
    const theirs = join(dir, 'theirs.nsf')
    const script = [
      'from nfseg.scene import read_feature_map, write_feature_map',
      `fm = read_feature_map(${JSON.stringify(ours)})`,
      'assert fm.data.shape == (3, 4, 5), fm.data.shape',
      `write_feature_map(fm, ${JSON.stringify(theirs)})`,
    ].join('\n')
    execFileSync('python3', ['-c', script])
    expect(readFileSync(theirs).equals(readFileSync(ours))).toBe(true)
  })
})
