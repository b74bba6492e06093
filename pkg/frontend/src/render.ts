/**
 * SVG map of a console view: graph geometry, radio links, robots.
 *
 * Pure string generation so the same module serves the browser bridge
 * and the tests; no DOM required.
 */

import type { ConsoleView } from "./state.js";

const ROLE_COLOR: Record<string, string> = {
  uav: "#1766b5",
  ugv: "#1e8f4e",
  base: "#444444",
};

function esc(text: string): string {
  return text.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function renderSvg(view: ConsoleView, widthPx = 720): string {
  const xs: number[] = [];
  const ys: number[] = [];
  for (const n of view.nodes) {
    xs.push(n.x);
    ys.push(n.y);
  }
  for (const r of view.robots.values()) {
    xs.push(r.x);
    ys.push(r.y);
  }
  if (xs.length === 0) {
    xs.push(0);
    ys.push(0);
  }
  const pad = 15;
  const minX = Math.min(...xs) - pad;
  const maxX = Math.max(...xs) + pad;
  const minY = Math.min(...ys) - pad;
  const maxY = Math.max(...ys) + pad;
  const heightPx = Math.max(120, Math.round(widthPx * (maxY - minY) / (maxX - minX)));

  const nodeAt = new Map(view.nodes.map((n) => [n.id, n]));
  const parts: string[] = [];
  // y is flipped so north is up
  const sx = (x: number) => x;
  const sy = (y: number) => maxY + minY - y;

  parts.push(
    `<svg xmlns="http://www.w3.org/2000/svg" width="${widthPx}" height="${heightPx}" ` +
    `viewBox="${minX} ${minY} ${maxX - minX} ${maxY - minY}">`,
  );
  parts.push(`<rect x="${minX}" y="${minY}" width="${maxX - minX}" height="${maxY - minY}" fill="#fafaf7"/>`);

  for (const [a, b, kind] of view.edges) {
    const na = nodeAt.get(a);
    const nb = nodeAt.get(b);
    if (!na || !nb) continue;
    const style = kind === "traversable"
      ? 'stroke="#b0a98f" stroke-width="2"'
      : 'stroke="#c9c3ae" stroke-width="0.8" stroke-dasharray="2 2"';
    parts.push(
      `<line class="edge ${esc(kind)}" x1="${sx(na.x)}" y1="${sy(na.y)}" ` +
      `x2="${sx(nb.x)}" y2="${sy(nb.y)}" ${style}/>`,
    );
  }

  for (const n of view.nodes) {
    const label = n.label ? esc(n.label) : n.id;
    if (n.kind === "region") {
      parts.push(`<circle class="node region" cx="${sx(n.x)}" cy="${sy(n.y)}" r="2.4" fill="#d6cfb4"/>`);
    } else {
      parts.push(
        `<rect class="node object" x="${sx(n.x) - 1.6}" y="${sy(n.y) - 1.6}" width="3.2" height="3.2" fill="#a8623c"/>` +
        `<text x="${sx(n.x) + 2.5}" y="${sy(n.y) + 1}" font-size="4" fill="#6b4a33">${label}</text>`,
      );
    }
  }

  const robotAt = new Map([...view.robots.values()].map((r) => [r.id, r]));
  for (const [a, b] of view.links) {
    const ra = robotAt.get(a);
    const rb = robotAt.get(b);
    if (!ra || !rb) continue;
    parts.push(
      `<line class="link" x1="${sx(ra.x)}" y1="${sy(ra.y)}" x2="${sx(rb.x)}" y2="${sy(rb.y)}" ` +
      'stroke="#4aa3d8" stroke-width="0.6" stroke-dasharray="4 3"/>',
    );
  }

  for (const r of view.robots.values()) {
    const color = ROLE_COLOR[r.role] ?? "#888888";
    const cx = sx(r.x);
    const cy = sy(r.y);
    if (r.role === "uav") {
      parts.push(`<polygon class="robot uav" points="${cx},${cy - 4} ${cx - 3},${cy + 3} ${cx + 3},${cy + 3}" fill="${color}"/>`);
    } else if (r.role === "ugv") {
      parts.push(`<rect class="robot ugv" x="${cx - 3}" y="${cy - 2.2}" width="6" height="4.4" fill="${color}"/>`);
    } else {
      parts.push(`<circle class="robot base" cx="${cx}" cy="${cy}" r="3" fill="none" stroke="${color}" stroke-width="1.4"/>`);
    }
    parts.push(
      `<text x="${cx + 4}" y="${cy - 3}" font-size="5" fill="${color}">` +
      `${esc(r.id)} ${esc(r.mode)}</text>`,
    );
  }

  parts.push(
    `<text x="${minX + 3}" y="${minY + 8}" font-size="6" fill="#333">` +
    `${esc(view.missionId)}  t=${view.t.toFixed(1)}s` +
    `${view.answered ? "  answered" : ""}</text>`,
  );
  parts.push("</svg>");
  return parts.join("\n");
}
