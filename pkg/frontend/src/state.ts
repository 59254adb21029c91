// Session state and the pure logic the UI hangs off: exemplar box editing
// with bounds clamping, client-side tau filtering of cached candidates, and
// monotonic request sequence numbers so a late response can never paint over
// a newer one.

import type { Box, DetectResponse, Detection } from './types'

// The server is always queried at this floor; the slider filters locally, so
// moving it costs no round-trips.
export const TAU_FLOOR = 0.05

export function clampBox(box: Box, width: number, height: number): Box | null {
  const x1 = Math.max(0, box.cx - box.w / 2)
  const y1 = Math.max(0, box.cy - box.h / 2)
  const x2 = Math.min(width, box.cx + box.w / 2)
  const y2 = Math.min(height, box.cy + box.h / 2)
  if (x2 - x1 < 2 || y2 - y1 < 2) return null
  return { cx: (x1 + x2) / 2, cy: (y1 + y2) / 2, w: x2 - x1, h: y2 - y1 }
}

export function boxFromDrag(
  x0: number, y0: number, x1: number, y1: number,
  width: number, height: number,
): Box | null {
  const box: Box = {
    cx: (x0 + x1) / 2,
    cy: (y0 + y1) / 2,
    w: Math.abs(x1 - x0),
    h: Math.abs(y1 - y0),
  }
  // a drag fully outside the image is rejected, not clamped into view
  if (Math.min(x0, x1) >= width || Math.max(x0, x1) <= 0 ||
      Math.min(y0, y1) >= height || Math.max(y0, y1) <= 0) return null
  return clampBox(box, width, height)
}

// Client-side counterpart of the server's presence threshold: keep score >=
// tau. Must stay equal to a fresh /detect at the same tau over the floored
// candidate set.
export function filterByTau(detections: Detection[], tau: number): Detection[] {
  return detections.filter((d) => d.score >= tau)
}

export type PaneId = 'left' | 'right'

export interface PaneState {
  variant: string | null
  response: DetectResponse | null
  renderedSeq: number
}

export class SessionStore {
  imageId: string | null = null
  imageWidth = 0
  imageHeight = 0
  exemplars: Box[] = []
  tau = 0.4
  compare = false
  panes: Record<PaneId, PaneState> = {
    left: { variant: null, response: null, renderedSeq: -1 },
    right: { variant: null, response: null, renderedSeq: -1 },
  }
  private seq = 0

  setImage(id: string, width: number, height: number): void {
    this.imageId = id
    this.imageWidth = width
    this.imageHeight = height
    this.exemplars = []
    for (const pane of Object.values(this.panes)) {
      pane.response = null
      pane.renderedSeq = -1
    }
  }

  addExemplar(box: Box): boolean {
    const clamped = clampBox(box, this.imageWidth, this.imageHeight)
    if (!clamped) return false
    this.exemplars.push(clamped)
    return true
  }

  updateExemplar(index: number, box: Box): boolean {
    const clamped = clampBox(box, this.imageWidth, this.imageHeight)
    if (!clamped) return false
    this.exemplars[index] = clamped
    return true
  }

  removeExemplar(index: number): void {
    this.exemplars.splice(index, 1)
  }

  /** Reserve a sequence number for an outgoing detect request. */
  nextSeq(): number {
    return ++this.seq
  }

  /**
   * Install a response if and only if it is newer than what the pane shows.
   * Returns false for stale responses, which must then be dropped unseen.
   */
  acceptResponse(pane: PaneId, seq: number, response: DetectResponse): boolean {
    const state = this.panes[pane]
    if (seq <= state.renderedSeq) return false
    state.renderedSeq = seq
    state.response = response
    return true
  }

  /** Detections the pane should show at the current slider position. */
  visibleDetections(pane: PaneId): Detection[] {
    const response = this.panes[pane].response
    if (!response) return []
    return filterByTau(response.detections, this.tau)
  }
}
