import { GUIDE_CIRCLE_RADIUS, VA_PRESETS } from "./state.js";
import { ConnectionStatus, ServiceMeta } from "./types.js";
import { Viewer } from "./viewer.js";

/** DOM wiring: the 2D valence/arousal pad with the radius-0.8 guide circle,
 * preset buttons, frame scrubber, orbit drag on the image, and the
 * connection banner. All rendering happens server-side; the canvas just
 * shows the latest PNG. */
export function mountViewer(root: HTMLElement, viewer: Viewer, meta: ServiceMeta): void {
  root.innerHTML = `
    <div class="banner" id="banner" hidden>connection lost, reconnecting…</div>
    <div class="row">
      <div class="col">
        <canvas id="frame" width="512" height="512"></canvas>
        <div>
          <label>frame <input id="scrub" type="range" min="0" value="0"></label>
          <span id="latency"></span>
        </div>
      </div>
      <div class="col">
        <canvas id="pad" width="240" height="240"></canvas>
        <div id="pad-value"></div>
        <div id="presets"></div>
      </div>
    </div>`;
  const banner = root.querySelector<HTMLElement>("#banner")!;
  const frameCanvas = root.querySelector<HTMLCanvasElement>("#frame")!;
  const pad = root.querySelector<HTMLCanvasElement>("#pad")!;
  const padValue = root.querySelector<HTMLElement>("#pad-value")!;
  const scrub = root.querySelector<HTMLInputElement>("#scrub")!;
  const latency = root.querySelector<HTMLElement>("#latency")!;
  const presets = root.querySelector<HTMLElement>("#presets")!;

  scrub.max = String(Math.max(meta.frame_count - 1, 0));

  const ctx = frameCanvas.getContext("2d")!;
  viewer.onFrame = (png: ArrayBuffer) => {
    const blob = new Blob([png], { type: "image/png" });
    const url = URL.createObjectURL(blob);
    const img = new Image();
    img.onload = () => {
      ctx.drawImage(img, 0, 0, frameCanvas.width, frameCanvas.height);
      URL.revokeObjectURL(url);
      latency.textContent = `${viewer.state.lastLatencyMs.toFixed(0)} ms`;
    };
    img.src = url;
  };
  viewer.onStatus = (status: ConnectionStatus) => {
    banner.hidden = status === "connected";
  };

  function drawPad(): void {
    const g = pad.getContext("2d")!;
    const half = pad.width / 2;
    g.clearRect(0, 0, pad.width, pad.height);
    g.strokeStyle = "#99a";
    g.strokeRect(0, 0, pad.width, pad.height);
    g.beginPath();
    g.arc(half, half, GUIDE_CIRCLE_RADIUS * half, 0, 2 * Math.PI);
    g.strokeStyle = "#ccd";
    g.stroke();
    g.beginPath();
    g.moveTo(half, 0);
    g.lineTo(half, pad.height);
    g.moveTo(0, half);
    g.lineTo(pad.width, half);
    g.stroke();
    g.fillStyle = "#d33";
    g.beginPath();
    g.arc(half * (1 + viewer.state.v), half * (1 - viewer.state.a), 5, 0, 2 * Math.PI);
    g.fill();
    padValue.textContent = `v ${viewer.state.v.toFixed(2)}  a ${viewer.state.a.toFixed(2)}`;
  }

  function padEvent(e: MouseEvent): void {
    const rect = pad.getBoundingClientRect();
    const v = ((e.clientX - rect.left) / rect.width) * 2 - 1;
    const a = 1 - ((e.clientY - rect.top) / rect.height) * 2;
    viewer.padDrag(v, a);
    drawPad();
  }
  let padDown = false;
  pad.addEventListener("mousedown", (e) => {
    padDown = true;
    padEvent(e);
  });
  window.addEventListener("mousemove", (e) => {
    if (padDown) padEvent(e);
  });
  window.addEventListener("mouseup", () => {
    padDown = false;
  });

  VA_PRESETS.forEach((p, i) => {
    const btn = document.createElement("button");
    btn.textContent = `${p.label} (${p.v}, ${p.a})`;
    btn.addEventListener("click", () => {
      viewer.preset(i);
      drawPad();
    });
    presets.appendChild(btn);
  });

  scrub.addEventListener("input", () => viewer.scrub(Number(scrub.value)));

  let orbitDown = false;
  let last: [number, number] = [0, 0];
  frameCanvas.addEventListener("mousedown", (e) => {
    orbitDown = true;
    last = [e.clientX, e.clientY];
  });
  window.addEventListener("mousemove", (e) => {
    if (!orbitDown) return;
    const dx = (e.clientX - last[0]) / 150;
    const dy = (e.clientY - last[1]) / 150;
    last = [e.clientX, e.clientY];
    viewer.orbit(viewer.state.yaw + dx, viewer.state.pitch + dy);
  });
  window.addEventListener("mouseup", () => {
    orbitDown = false;
  });

  drawPad();
}
