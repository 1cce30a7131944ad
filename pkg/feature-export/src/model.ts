/**
 * tfjs backbone support: load a saved LayersModel from disk, optionally tap
 * a named layer, and run dense feature extraction.
 *
 * Pure @tensorflow/tfjs has no filesystem IO handlers in Node, so models are
 * stored as a `model.json` (topology + weight specs) next to a `weights.bin`
 * and moved through tf.io.fromMemory / withSaveHandler.
 */

import * as tf from '@tensorflow/tfjs'
import { mkdirSync, readFileSync, writeFileSync } from 'fs'
import { join } from 'path'

import { RgbImage } from './image.js'

export async function saveModel(model: tf.LayersModel, dir: string): Promise<void> {
  mkdirSync(dir, { recursive: true })
  await model.save(
    tf.io.withSaveHandler(async (artifacts) => {
      const { weightData, weightSpecs, ...rest } = artifacts
      writeFileSync(
        join(dir, 'model.json'),
        JSON.stringify({ ...rest, weightSpecs }, null, 2),
      )
      const data = weightData as ArrayBuffer
      writeFileSync(join(dir, 'weights.bin'), Buffer.from(data))
      return {
        modelArtifactsInfo: {
          dateSaved: new Date(0),
          modelTopologyType: 'JSON',
        },
      }
    }),
  )
}

export async function loadModel(dir: string): Promise<tf.LayersModel> {
  const meta = JSON.parse(readFileSync(join(dir, 'model.json'), 'utf-8'))
  const weights = readFileSync(join(dir, 'weights.bin'))
  const weightData = weights.buffer.slice(
    weights.byteOffset,
    weights.byteOffset + weights.byteLength,
  )
  return tf.loadLayersModel(
    tf.io.fromMemory({
      modelTopology: meta.modelTopology,
      weightSpecs: meta.weightSpecs,
      weightData,
    }),
  )
}

/** Rewire the model to emit a named layer's output ('' keeps the head). */
export function tapLayer(model: tf.LayersModel, layer: string): tf.LayersModel {
  if (!layer) return model
  const target = model.getLayer(layer) // throws for unknown layers
  return tf.model({ inputs: model.inputs, outputs: target.output as tf.SymbolicTensor })
}

/**
 * Run the model on one image; expects NHWC in, NHWC out. The per-location
 * vectors are L2-normalized to match the cosine-volume convention.
 */
export function extractWithModel(model: tf.LayersModel, img: RgbImage): {
  height: number
  width: number
  channels: number
  data: Float32Array
} {
  const out = tf.tidy(() => {
    const input = tf.tensor4d(Array.from(img.data), [1, img.height, img.width, 3])
    const raw = model.predict(input) as tf.Tensor
    if (raw.shape.length !== 4) {
      throw new Error(`expected a spatial NHWC feature map, got shape ${raw.shape}`)
    }
    const normalized = tf.div(raw, tf.add(tf.norm(raw, 2, 3, true), 1e-12))
    return normalized.squeeze([0]) as tf.Tensor3D
  })
  const [height, width, channels] = out.shape
  const data = out.dataSync() as Float32Array
  out.dispose()
  return { height, width, channels, data: new Float32Array(data) }
}

/** A small convolutional feature pyramid used by tests and as a template for
 * dropping in converted pretrained weights. */
export function buildDemoBackbone(stride: number, channels: number, seed: number): tf.LayersModel {
  const init = tf.initializers.glorotUniform({ seed })
  const model = tf.sequential()
  model.add(tf.layers.conv2d({
    inputShape: [null as unknown as number, null as unknown as number, 3],
    filters: channels, kernelSize: stride, strides: stride, padding: 'same',
    activation: 'relu', kernelInitializer: init, name: 'embed',
  }))
  model.add(tf.layers.conv2d({
    filters: channels, kernelSize: 3, strides: 1, padding: 'same',
    activation: 'relu', kernelInitializer: init, name: 'block1',
  }))
  model.add(tf.layers.conv2d({
    filters: channels, kernelSize: 3, strides: 1, padding: 'same',
    kernelInitializer: init, name: 'features',
  }))
  return model
}
