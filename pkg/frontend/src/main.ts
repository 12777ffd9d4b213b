import { LiveSession } from "./session.js";
import { GatewayTransport } from "./transport.js";
import { WorldView } from "./worldview.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const params = new URLSearchParams(location.search);
const gateway = params.get("gateway") ?? "127.0.0.1:8700";

const timelineEl = el<HTMLDivElement>("timeline");
const statusEl = el<HTMLTableSectionElement>("status-rows");
const bannerEl = el<HTMLDivElement>("banner");
const inputEl = el<HTMLInputElement>("input");
const sendBtn = el<HTMLButtonElement>("send");
const sendsEl = el<HTMLDivElement>("sends");
const canvas = el<HTMLCanvasElement>("world");

const session = new LiveSession(new GatewayTransport(gateway));
const view = new WorldView(canvas, new Set());

function renderTimeline(): void {
  timelineEl.innerHTML = "";
  for (const item of session.timeline.items()) {
    const row = document.createElement("div");
    row.className = "entry";
    row.style.borderLeft = `4px solid ${item.color}`;
    const tick = document.createElement("span");
    tick.className = "tick";
    tick.textContent = `[${item.tick}]`;
    const text = document.createElement("span");
    text.style.color = item.color;
    text.textContent = ` ${item.text}`;
    row.append(tick, text);
    timelineEl.append(row);
  }
  timelineEl.scrollTop = timelineEl.scrollHeight;
}

function renderStatus(): void {
  statusEl.innerHTML = "";
  for (const row of session.status.rows()) {
    const tr = document.createElement("tr");
    const badge = row.badge
      ? `<span class="badge ${row.badge}">${row.badge}</span>`
      : "";
    tr.innerHTML =
      `<td>${row.id}</td><td>${row.posture || "-"}</td>` +
      `<td>(${row.position[0].toFixed(1)}, ${row.position[1].toFixed(1)})</td>` +
      `<td>${row.instruction || "-"}</td><td>${badge}</td>`;
    statusEl.append(tr);
  }
}

function renderSends(): void {
  sendsEl.innerHTML = "";
  for (const pending of session.sends) {
    if (pending.state !== "unsent") continue;
    const row = document.createElement("div");
    row.className = "unsent";
    row.textContent = `unsent: ${pending.text} `;
    const retry = document.createElement("button");
    retry.textContent = "retry";
    retry.onclick = () => session.retrySend(pending);
    row.append(retry);
    sendsEl.append(row);
  }
}

session.onChange = () => {
  bannerEl.textContent =
    session.state === "live"
      ? ""
      : session.state === "retrying"
        ? "connection lost, retrying..."
        : session.state;
  bannerEl.className = session.state === "live" ? "hidden" : "banner";
  view.setRobots(session.status.rows().map((r) => r.id));
  renderTimeline();
  renderStatus();
  renderSends();
  view.render(session.world, session.goals, session.worldIsStale());
};

function submit(): void {
  const pending = session.sendInput(inputEl.value);
  if (pending) inputEl.value = "";
}

sendBtn.onclick = submit;
inputEl.addEventListener("keydown", (event) => {
  if (event.key === "Enter") submit();
});

void session.connect();
