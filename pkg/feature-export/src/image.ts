/** PNG loading and resizing for the exporter. */

import { readFileSync } from 'fs'
import { PNG } from 'pngjs'

export interface RgbImage {
  height: number
  width: number
  /** row-major (h, w, c) with c = 3, values in [0, 1] */
  data: Float64Array
}

export function loadPng(path: string): RgbImage {
  const png = PNG.sync.read(readFileSync(path))
  const { width, height } = png
  const out = new Float64Array(width * height * 3)
  for (let i = 0; i < width * height; i++) {
    out[3 * i] = png.data[4 * i] / 255
    out[3 * i + 1] = png.data[4 * i + 1] / 255
    out[3 * i + 2] = png.data[4 * i + 2] / 255
  }
  return { height, width, data: out }
}

export function bilinearResize(img: RgbImage, newH: number, newW: number): RgbImage {
  const out = new Float64Array(newH * newW * 3)
  const sx = img.width / newW
  const sy = img.height / newH
  for (let y = 0; y < newH; y++) {
    const gy = Math.min((y + 0.5) * sy - 0.5, img.height - 1)
    const y0 = Math.max(0, Math.floor(gy))
    const y1 = Math.min(y0 + 1, img.height - 1)
    const ty = Math.max(0, gy - y0)
    for (let x = 0; x < newW; x++) {
      const gx = Math.min((x + 0.5) * sx - 0.5, img.width - 1)
      const x0 = Math.max(0, Math.floor(gx))
      const x1 = Math.min(x0 + 1, img.width - 1)
      const tx = Math.max(0, gx - x0)
      for (let c = 0; c < 3; c++) {
        const v00 = img.data[3 * (y0 * img.width + x0) + c]
        const v01 = img.data[3 * (y0 * img.width + x1) + c]
        const v10 = img.data[3 * (y1 * img.width + x0) + c]
        const v11 = img.data[3 * (y1 * img.width + x1) + c]
        out[3 * (y * newW + x) + c] =
          (v00 * (1 - tx) + v01 * tx) * (1 - ty) + (v10 * (1 - tx) + v11 * tx) * ty
      }
    }
  }
  return { height: newH, width: newW, data: out }
}

/**
 * Resize so the shorter side becomes a multiple of `stride` (rounding to the
 * nearest multiple, at least one), preserving aspect ratio.
 */
export function resizeToStride(img: RgbImage, stride: number): RgbImage {
  const shorter = Math.min(img.width, img.height)
  const target = Math.max(stride, Math.round(shorter / stride) * stride)
  if (target === shorter) return img
  const scale = target / shorter
  const newW = Math.round(img.width * scale)
  const newH = Math.round(img.height * scale)
  return bilinearResize(img, newH, newW)
}
