// Browser entry point: wires pointer/slider input to the orbit camera,
// streams poses, paints received frames, and keeps the source panel and
// HUD in sync with the current pose.

import { ViewerClient } from './client.js';
import { ServiceInfo } from './protocol.js';
import {
  OrbitState,
  clampElevation,
  clampRadius,
  orbitPose,
  orthonormalityError,
} from './orbit.js';

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export async function startViewer(serviceUrl: string): Promise<void> {
  const banner = el<HTMLDivElement>('banner');
  const frameImg = el<HTMLImageElement>('frame');
  const hud = el<HTMLPreElement>('hud');
  const panel = el<HTMLDivElement>('sources');
  const slider = el<HTMLInputElement>('altitude');
  const captureBtn = el<HTMLButtonElement>('capture');

  const client = new ViewerClient(serviceUrl);
  client.onStatus = (status) => {
    banner.textContent = status === 'error'
      ? `connection error: ${client.lastError} (retrying)` : status;
    banner.className = status;
  };

  let info: ServiceInfo;
  try {
    info = await client.connect();
  } catch {
    // visible banner already set; retry with backoff
    setTimeout(() => startViewer(serviceUrl), 3000);
    return;
  }

  const state: OrbitState = {
    azimuthDeg: 0,
    elevationDeg: 45,
    radius: clampRadius(info.radius_min * 1.5, info.radius_min, info.radius_max),
    target: [0, 0, 0],
  };

  let lastUrl: string | null = null;
  client.onFrame = (frame) => {
    const bytes = new Uint8Array(frame.jpeg); // detach from the frame buffer
    const url = URL.createObjectURL(new Blob([bytes.buffer as ArrayBuffer], { type: 'image/jpeg' }));
    frameImg.src = url;
    if (lastUrl) URL.revokeObjectURL(lastUrl);
    lastUrl = url;
    hud.textContent = hudText(frame.id);
  };

  function hudText(frameId: number): string {
    const pose = orbitPose(state);
    const rows = [0, 1, 2, 3].map((r) =>
      pose.slice(r * 4, r * 4 + 4).map((x) => x.toFixed(4)).join(' '));
    return `frame ${frameId}\npose:\n${rows.join('\n')}`;
  }

  async function push() {
    const pose = orbitPose(state);
    if (orthonormalityError(pose) > 1e-6) return; // never send a bad matrix
    client.sendPose(pose, info.image_width, info.image_height, 'preview');
    hud.textContent = hudText(client.lastFrameId);
    try {
      const src = await client.sources(pose);
      panel.replaceChildren(...src.indices.map((index, i) => {
        const img = document.createElement('img');
        img.src = serviceUrl + src.thumbnails[i];
        img.title = `view ${index}, distance ${src.distances[i].toExponential(3)}`;
        return img;
      }));
    } catch {
      // panel refresh is best-effort; the stream keeps running
    }
  }

  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  frameImg.addEventListener('pointerdown', (ev) => {
    dragging = true;
    lastX = ev.clientX;
    lastY = ev.clientY;
  });
  window.addEventListener('pointerup', () => { dragging = false; });
  window.addEventListener('pointermove', (ev) => {
    if (!dragging) return;
    state.azimuthDeg -= (ev.clientX - lastX) * 0.4;
    state.elevationDeg = clampElevation(state.elevationDeg + (ev.clientY - lastY) * 0.4);
    lastX = ev.clientX;
    lastY = ev.clientY;
    void push();
  });

  slider.min = String(info.radius_min);
  slider.max = String(info.radius_max);
  slider.step = 'any';
  slider.value = String(state.radius);
  slider.addEventListener('input', () => {
    state.radius = clampRadius(Number(slider.value), info.radius_min, info.radius_max);
    void push();
  });

  frameImg.addEventListener('wheel', (ev) => {
    ev.preventDefault();
    state.radius = clampRadius(state.radius * (ev.deltaY > 0 ? 1.05 : 0.95),
                               info.radius_min, info.radius_max);
    slider.value = String(state.radius);
    void push();
  });

  captureBtn.addEventListener('click', async () => {
    const blob = await client.capture(orbitPose(state),
                                      info.image_width, info.image_height);
    const a = document.createElement('a');
    a.href = URL.createObjectURL(blob);
    a.download = 'capture.png';
    a.click();
  });

  void push();
}

declare global {
  interface Window { startViewer: typeof startViewer; }
}
if (typeof window !== 'undefined') {
  window.startViewer = startViewer;
}
