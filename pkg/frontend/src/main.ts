// Wiring: upload an image, draw/adjust exemplar boxes on the canvas, watch
// detections update live. Every exemplar edit triggers one detect round-trip
// per visible pane at the tau floor; the slider refilters locally. In-flight
// responses carry sequence numbers and stale ones are dropped.

import { ApiClient } from './api'
import { applyHandleDrag, drawOverlay, Handle, hitTest } from './overlay'
import { boxFromDrag, SessionStore, TAU_FLOOR, PaneId } from './state'
import type { Box } from './types'

const api = new ApiClient('')
const store = new SessionStore()

const fileInput = document.getElementById('file') as HTMLInputElement
const tauSlider = document.getElementById('tau') as HTMLInputElement
const tauLabel = document.getElementById('tau-label') as HTMLSpanElement
const compareToggle = document.getElementById('compare') as HTMLInputElement
const aggregateToggle = document.getElementById('aggregate') as HTMLInputElement
const variantLeft = document.getElementById('variant-left') as HTMLSelectElement
const variantRight = document.getElementById('variant-right') as HTMLSelectElement
const statusLine = document.getElementById('status') as HTMLDivElement
const toast = document.getElementById('toast') as HTMLDivElement
const rightWrap = document.getElementById('right-wrap') as HTMLDivElement
const canvases: Record<PaneId, HTMLCanvasElement> = {
  left: document.getElementById('canvas-left') as HTMLCanvasElement,
  right: document.getElementById('canvas-right') as HTMLCanvasElement,
}

let imageEl: HTMLImageElement | null = null

function showToast(message: string): void {
  toast.textContent = message
  toast.classList.add('show')
  setTimeout(() => toast.classList.remove('show'), 2500)
}

function render(): void {
  for (const pane of ['left', 'right'] as PaneId[]) {
    if (pane === 'right' && !store.compare) continue
    const ctx = canvases[pane].getContext('2d')
    if (!ctx) continue
    drawOverlay(ctx, imageEl, store.exemplars, store.visibleDetections(pane),
                store.imageWidth, store.imageHeight)
  }
  const left = store.panes.left.response
  statusLine.textContent = left
    ? `${store.visibleDetections('left').length} boxes at tau=${store.tau.toFixed(2)} ` +
      `(model ${left.model_version}, ${left.timing_ms.toFixed(0)} ms)`
    : 'no detections yet'
}

async function requestPane(pane: PaneId): Promise<void> {
  if (!store.imageId || store.exemplars.length === 0) {
    store.panes[pane].response = null
    render()
    return
  }
  const variant = store.panes[pane].variant
  const seq = store.nextSeq()
  try {
    const response = await api.detect({
      image_id: store.imageId,
      exemplars: store.exemplars.map((b) => [b.cx, b.cy, b.w, b.h]),
      tau: TAU_FLOOR,
      aggregate: aggregateToggle.checked,
      ...(variant ? { variant } : {}),
    })
    if (store.acceptResponse(pane, seq, response)) render()
  } catch (err) {
    showToast(String(err)) // non-blocking: state and overlays stay as-is
  }
}

function refresh(): void {
  void requestPane('left')
  if (store.compare) void requestPane('right')
}

// ---------------------------------------------------------------- canvas ---

type DragState =
  | { mode: 'new'; x0: number; y0: number }
  | { mode: 'edit'; handle: Handle; original: Box }

let drag: DragState | null = null

function canvasPoint(event: MouseEvent): { x: number; y: number } {
  const rect = canvases.left.getBoundingClientRect()
  return { x: event.clientX - rect.left, y: event.clientY - rect.top }
}

canvases.left.addEventListener('mousedown', (event) => {
  if (!imageEl) return
  const { x, y } = canvasPoint(event)
  const handle = hitTest(store.exemplars, x, y)
  drag = handle
    ? { mode: 'edit', handle, original: { ...store.exemplars[handle.index] } }
    : { mode: 'new', x0: x, y0: y }
})

canvases.left.addEventListener('mousemove', (event) => {
  if (!drag || !imageEl) return
  const { x, y } = canvasPoint(event)
  if (drag.mode === 'edit') {
    const updated = applyHandleDrag(drag.original, drag.handle, x, y)
    store.updateExemplar(drag.handle.index, updated)
    render()
  }
})

canvases.left.addEventListener('mouseup', (event) => {
  if (!drag || !imageEl) return
  const { x, y } = canvasPoint(event)
  if (drag.mode === 'new') {
    const box = boxFromDrag(drag.x0, drag.y0, x, y, store.imageWidth,
                            store.imageHeight)
    if (box && box.w > 4 && box.h > 4) {
      store.addExemplar(box)
      refresh()
    }
  } else {
    refresh() // box edit finished: re-detect with the adjusted exemplar
  }
  drag = null
  render()
})

canvases.left.addEventListener('dblclick', (event) => {
  const { x, y } = canvasPoint(event)
  const handle = hitTest(store.exemplars, x, y)
  if (handle) {
    store.removeExemplar(handle.index)
    refresh()
    render()
  }
})

// -------------------------------------------------------------- controls ---

fileInput.addEventListener('change', async () => {
  const file = fileInput.files?.[0]
  if (!file) return
  try {
    const id = await api.uploadImage(file)
    imageEl = new Image()
    imageEl.onload = () => {
      store.setImage(id, imageEl!.naturalWidth, imageEl!.naturalHeight)
      for (const pane of ['left', 'right'] as PaneId[]) {
        canvases[pane].width = store.imageWidth
        canvases[pane].height = store.imageHeight
      }
      render()
    }
    imageEl.src = api.imageUrl(id)
  } catch (err) {
    showToast(String(err))
  }
})

tauSlider.addEventListener('input', () => {
  store.tau = Number(tauSlider.value)
  tauLabel.textContent = store.tau.toFixed(2)
  render() // pure client-side refiltering: no server round-trip
})

compareToggle.addEventListener('change', () => {
  store.compare = compareToggle.checked
  rightWrap.style.display = store.compare ? 'inline-block' : 'none'
  refresh()
})

aggregateToggle.addEventListener('change', refresh)

for (const [select, pane] of [[variantLeft, 'left'], [variantRight, 'right']] as
     [HTMLSelectElement, PaneId][]) {
  select.addEventListener('change', () => {
    store.panes[pane].variant = select.value || null
    void requestPane(pane)
  })
}

async function boot(): Promise<void> {
  if (!(await api.health())) {
    showToast('detection service unreachable')
    return
  }
  const info = await api.modelInfo()
  for (const select of [variantLeft, variantRight]) {
    select.innerHTML = ''
    for (const v of info.supported_variants) {
      const option = document.createElement('option')
      option.value = v
      option.textContent = v
      select.appendChild(option)
    }
    select.value = info.variant
  }
  store.panes.left.variant = info.variant
  store.panes.right.variant = info.variant
  statusLine.textContent =
    `model ${info.version} (${info.variant}, ${info.params} params)`
}

void boot()
