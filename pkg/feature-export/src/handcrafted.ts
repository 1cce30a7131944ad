/**
 * Handcrafted dense features: a fixed multi-scale color + gradient bank.
 *
 * This backend stands in for a pretrained backbone in offline environments
 * (no model weights reachable). Per pixel it stacks, at three gaussian
 * scales, the smoothed opponent color channels and the local gradient
 * energy, then L2-normalizes. It is deterministic and weight-free; swap in
 * the tfjs backend (see model.ts) when a real backbone is available.
 */

import { RgbImage } from './image.js'

const SCALES = [1.0, 2.5, 6.0]

function gaussianBlur(chan: Float64Array, h: number, w: number, sigma: number): Float64Array {
  const radius = Math.max(1, Math.ceil(3 * sigma))
  const kernel = new Float64Array(2 * radius + 1)
  let total = 0
  for (let i = -radius; i <= radius; i++) {
    const v = Math.exp(-(i * i) / (2 * sigma * sigma))
    kernel[i + radius] = v
    total += v
  }
  for (let i = 0; i < kernel.length; i++) kernel[i] /= total

  const tmp = new Float64Array(h * w)
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      let acc = 0
      for (let k = -radius; k <= radius; k++) {
        const xx = Math.min(w - 1, Math.max(0, x + k))
        acc += kernel[k + radius] * chan[y * w + xx]
      }
      tmp[y * w + x] = acc
    }
  }
  const out = new Float64Array(h * w)
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      let acc = 0
      for (let k = -radius; k <= radius; k++) {
        const yy = Math.min(h - 1, Math.max(0, y + k))
        acc += kernel[k + radius] * tmp[yy * w + x]
      }
      out[y * w + x] = acc
    }
  }
  return out
}

function gradientEnergy(chan: Float64Array, h: number, w: number): Float64Array {
  const out = new Float64Array(h * w)
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      const xm = chan[y * w + Math.max(0, x - 1)]
      const xp = chan[y * w + Math.min(w - 1, x + 1)]
      const ym = chan[Math.max(0, y - 1) * w + x]
      const yp = chan[Math.min(h - 1, y + 1) * w + x]
      out[y * w + x] = Math.hypot(0.5 * (xp - xm), 0.5 * (yp - ym))
    }
  }
  return out
}

export const HANDCRAFTED_CHANNELS = SCALES.length * 4

/**
 * Dense features at a spatial downscale factor. Output is (h/ds, w/ds, C)
 * with C = 12: per scale, smoothed luminance, red-green and blue-yellow
 * opponents, and gradient energy; all per-pixel L2-normalized.
 */
export function handcraftedFeatures(img: RgbImage, downscale: number): {
  height: number
  width: number
  channels: number
  data: Float32Array
} {
  const { height: h, width: w } = img
  const lum = new Float64Array(h * w)
  const rg = new Float64Array(h * w)
  const by = new Float64Array(h * w)
  for (let i = 0; i < h * w; i++) {
    const r = img.data[3 * i]
    const g = img.data[3 * i + 1]
    const b = img.data[3 * i + 2]
    lum[i] = (r + g + b) / 3
    rg[i] = r - g
    by[i] = b - (r + g) / 2
  }

  const planes: Float64Array[] = []
  for (const sigma of SCALES) {
    const sl = gaussianBlur(lum, h, w, sigma)
    planes.push(sl)
    planes.push(gaussianBlur(rg, h, w, sigma))
    planes.push(gaussianBlur(by, h, w, sigma))
    planes.push(gradientEnergy(sl, h, w))
  }

  const oh = Math.max(1, Math.floor(h / downscale))
  const ow = Math.max(1, Math.floor(w / downscale))
  const channels = planes.length
  const data = new Float32Array(oh * ow * channels)
  for (let y = 0; y < oh; y++) {
    const sy = Math.min(h - 1, Math.floor((y + 0.5) * downscale))
    for (let x = 0; x < ow; x++) {
      const sx = Math.min(w - 1, Math.floor((x + 0.5) * downscale))
      let norm = 0
      for (let c = 0; c < channels; c++) {
        const v = planes[c][sy * w + sx]
        data[(y * ow + x) * channels + c] = v
        norm += v * v
      }
      norm = Math.sqrt(norm) + 1e-12
      for (let c = 0; c < channels; c++) {
        data[(y * ow + x) * channels + c] /= norm
      }
    }
  }
  return { height: oh, width: ow, channels, data }
}
