// Canvas rendering and hit-testing for exemplar boxes (center + size
// handles) and detection overlays.

import type { Box, Detection } from './types'

export const HANDLE_RADIUS = 5

export type Handle =
  | { kind: 'center'; index: number }
  | { kind: 'corner'; index: number; dx: 1 | -1; dy: 1 | -1 }

export function hitTest(exemplars: Box[], x: number, y: number): Handle | null {
  for (let i = exemplars.length - 1; i >= 0; i--) {
    const b = exemplars[i]
    for (const dx of [1, -1] as const) {
      for (const dy of [1, -1] as const) {
        const hx = b.cx + (dx * b.w) / 2
        const hy = b.cy + (dy * b.h) / 2
        if (Math.hypot(x - hx, y - hy) <= HANDLE_RADIUS + 2) {
          return { kind: 'corner', index: i, dx, dy }
        }
      }
    }
    if (Math.hypot(x - b.cx, y - b.cy) <= HANDLE_RADIUS + 2) {
      return { kind: 'center', index: i }
    }
  }
  return null
}

/** New box produced by dragging a handle to (x, y). */
export function applyHandleDrag(box: Box, handle: Handle, x: number, y: number): Box {
  if (handle.kind === 'center') {
    return { ...box, cx: x, cy: y }
  }
  // the dragged corner moves, the opposite corner stays put
  const ox = box.cx - (handle.dx * box.w) / 2
  const oy = box.cy - (handle.dy * box.h) / 2
  const w = Math.max(2, Math.abs(x - ox))
  const h = Math.max(2, Math.abs(y - oy))
  return { cx: (x + ox) / 2, cy: (y + oy) / 2, w, h }
}

function strokeBox(ctx: CanvasRenderingContext2D, b: Box, color: string,
                   dashed = false, width = 2): void {
  ctx.save()
  ctx.strokeStyle = color
  ctx.lineWidth = width
  if (dashed) ctx.setLineDash([5, 3])
  ctx.strokeRect(b.cx - b.w / 2, b.cy - b.h / 2, b.w, b.h)
  ctx.restore()
}

export function drawOverlay(
  ctx: CanvasRenderingContext2D,
  image: CanvasImageSource | null,
  exemplars: Box[],
  detections: Detection[],
  width: number,
  height: number,
): void {
  ctx.clearRect(0, 0, width, height)
  if (image) ctx.drawImage(image, 0, 0)
  for (const d of detections) {
    const [cx, cy, w, h] = d.box
    strokeBox(ctx, { cx, cy, w, h }, 'rgba(255, 64, 64, 0.9)', true, 1.5)
    ctx.fillStyle = 'rgba(255, 64, 64, 0.9)'
    ctx.font = '10px sans-serif'
    ctx.fillText(d.score.toFixed(2), cx - w / 2, cy - h / 2 - 2)
  }
  for (const b of exemplars) {
    strokeBox(ctx, b, 'rgba(64, 220, 120, 0.95)')
    ctx.fillStyle = 'rgba(64, 220, 120, 0.95)'
    for (const dx of [1, -1]) {
      for (const dy of [1, -1]) {
        ctx.beginPath()
        ctx.arc(b.cx + (dx * b.w) / 2, b.cy + (dy * b.h) / 2, HANDLE_RADIUS / 1.4,
                0, Math.PI * 2)
        ctx.fill()
      }
    }
    ctx.beginPath()
    ctx.arc(b.cx, b.cy, HANDLE_RADIUS / 1.4, 0, Math.PI * 2)
    ctx.fill()
  }
}
