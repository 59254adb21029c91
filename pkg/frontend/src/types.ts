// Wire types matching the detection service JSON.

export interface Box {
  cx: number
  cy: number
  w: number
  h: number
}

export interface Detection {
  box: [number, number, number, number]
  score: number
  exemplar_id: number
  scale_id: number
}

export interface DetectResponse {
  detections: Detection[]
  timing_ms: number
  model_version: string
}

export interface ModelInfo {
  name: string
  version: string
  variant: string
  decode_variant: string
  feature_depth: number
  params: number
  supported_variants: string[]
}

export interface DetectRequest {
  image_id: string
  exemplars: [number, number, number, number][]
  tau: number
  variant?: string
  scales?: number[]
  aggregate?: boolean
}
