/**
 * Bit-exact IO for the `.nsf` dense-feature format and the `.nst` token-grid
 * sidecar.
 *
 * Layout: 4-byte magic (`NSF1` / `NST1`), little-endian uint32 H', W', C',
 * then H'*W'*C' little-endian float32 in row-major (h, w, c) order.
 */

import { readFileSync, writeFileSync } from 'fs'

export const NSF_MAGIC = 'NSF1'
export const NST_MAGIC = 'NST1'

export interface FeatureTensor {
  height: number
  width: number
  channels: number
  /** row-major (h, w, c), length = height * width * channels */
  data: Float32Array
}

export function encodeTensor(magic: string, t: FeatureTensor): Buffer {
  const n = t.height * t.width * t.channels
  if (t.data.length !== n) {
    throw new Error(`tensor data length ${t.data.length} != ${n}`)
  }
  for (const v of t.data) {
    if (!Number.isFinite(v)) throw new Error('refusing to write non-finite tensor')
  }
  const buf = Buffer.alloc(16 + 4 * n)
  buf.write(magic, 0, 'ascii')
  buf.writeUInt32LE(t.height, 4)
  buf.writeUInt32LE(t.width, 8)
  buf.writeUInt32LE(t.channels, 12)
  for (let i = 0; i < n; i++) buf.writeFloatLE(t.data[i], 16 + 4 * i)
  return buf
}

export function decodeTensor(magic: string, buf: Buffer): FeatureTensor {
  const got = buf.subarray(0, 4).toString('ascii')
  if (got !== magic) throw new Error(`bad magic ${JSON.stringify(got)}, expected ${magic}`)
  if (buf.length < 16) throw new Error('truncated header')
  const height = buf.readUInt32LE(4)
  const width = buf.readUInt32LE(8)
  const channels = buf.readUInt32LE(12)
  const n = height * width * channels
  if (buf.length !== 16 + 4 * n) {
    throw new Error(`truncated payload: have ${buf.length} bytes, need ${16 + 4 * n}`)
  }
  const data = new Float32Array(n)
  for (let i = 0; i < n; i++) data[i] = buf.readFloatLE(16 + 4 * i)
  return { height, width, channels, data }
}

export function writeFeatureMap(path: string, t: FeatureTensor): void {
  writeFileSync(path, encodeTensor(NSF_MAGIC, t))
}

export function readFeatureMap(path: string): FeatureTensor {
  return decodeTensor(NSF_MAGIC, readFileSync(path))
}

export function writeTokenGrid(path: string, t: FeatureTensor): void {
  writeFileSync(path, encodeTensor(NST_MAGIC, t))
}

export function readTokenGrid(path: string): FeatureTensor {
  return decodeTensor(NST_MAGIC, readFileSync(path))
}
