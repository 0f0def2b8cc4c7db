import { fetchMeta, WsTransport } from "./transport.js";
import { mountViewer } from "./ui.js";
import { Viewer } from "./viewer.js";

async function boot(): Promise<void> {
  const base = new URLSearchParams(location.search).get("service") ?? location.origin;
  const wsBase = base.replace(/^http/, "ws");
  const meta = await fetchMeta(base);
  const transport = new WsTransport(`${wsBase}/v1/stream`);
  const viewer = new Viewer(transport);
  mountViewer(document.getElementById("app")!, viewer, meta);
  viewer.connect();
}

boot().catch((err) => {
  const el = document.getElementById("app");
  if (el) el.textContent = `failed to start: ${err}`;
});
