// Thin fetch wrapper over the detection service.

import type { DetectRequest, DetectResponse, ModelInfo } from './types'

export class ApiClient {
  constructor(readonly baseUrl: string) {}

  async health(): Promise<boolean> {
    try {
      const res = await fetch(`${this.baseUrl}/healthz`)
      return res.ok
    } catch {
      return false
    }
  }

  async modelInfo(): Promise<ModelInfo> {
    const res = await fetch(`${this.baseUrl}/model`)
    if (!res.ok) throw new Error(`model info failed: ${res.status}`)
    return res.json()
  }

  async uploadImage(data: Blob | ArrayBuffer): Promise<string> {
    const res = await fetch(`${this.baseUrl}/images`, {
      method: 'POST',
      headers: { 'Content-Type': 'image/png' },
      body: data,
    })
    if (!res.ok) throw new Error(`upload failed: ${res.status}`)
    const doc = await res.json()
    return doc.id
  }

  imageUrl(id: string): string {
    return `${this.baseUrl}/images/${id}`
  }

  async detect(request: DetectRequest): Promise<DetectResponse> {
    const res = await fetch(`${this.baseUrl}/detect`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(request),
    })
    if (!res.ok) {
      let message = `detect failed: ${res.status}`
      try {
        const doc = await res.json()
        if (doc.error) message = doc.error
      } catch { /* keep the status message */ }
      throw new Error(message)
    }
    return res.json()
  }
}
