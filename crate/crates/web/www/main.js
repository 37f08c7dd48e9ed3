import init, { relu_moment_curve, corruption_kinds, corruption_preview, Session } from "./pkg/eeg_uq_web.js";

const $ = (id) => document.getElementById(id);

function plotLines(canvas, series, opts = {}) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const xs = series.flatMap((s) => s.x);
  const ys = series.flatMap((s) => s.y);
  const [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  let [y0, y1] = [Math.min(...ys), Math.max(...ys)];
  if (opts.yFromZero) y0 = Math.min(0, y0);
  if (y1 === y0) y1 = y0 + 1;
  const px = (x) => 30 + ((x - x0) / (x1 - x0)) * (w - 40);
  const py = (y) => h - 20 - ((y - y0) / (y1 - y0)) * (h - 30);
  ctx.strokeStyle = "#ccc";
  ctx.beginPath();
  ctx.moveTo(30, py(0));
  ctx.lineTo(w - 10, py(0));
  ctx.stroke();
  ctx.fillStyle = "#666";
  ctx.fillText(y1.toFixed(2), 2, 12);
  ctx.fillText(y0.toFixed(2), 2, h - 22);
  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.beginPath();
    s.x.forEach((x, i) => (i ? ctx.lineTo(px(x), py(s.y[i])) : ctx.moveTo(px(x), py(s.y[i]))));
    ctx.stroke();
  }
}

function drawRelu() {
  const v = Number($("relu-v").value);
  $("relu-v-out").textContent = v.toFixed(2);
  const flat = relu_moment_curve(-3, 3, v, 121);
  const mu = [], mean = [], variance = [], hinge = [];
  for (let i = 0; i < flat.length; i += 3) {
    mu.push(flat[i]);
    mean.push(flat[i + 1]);
    variance.push(flat[i + 2]);
    hinge.push(Math.max(0, flat[i]));
  }
  plotLines($("relu-plot"), [
    { x: mu, y: hinge, color: "#999" },
    { x: mu, y: mean, color: "#1f77b4" },
    { x: mu, y: variance, color: "#d62728" },
  ], { yFromZero: true });
}

function drawCorruption() {
  const sev = Number($("corr-sev").value);
  $("corr-sev-out").textContent = sev;
  const flat = corruption_preview($("corr-kind").value, sev, Number($("corr-seed").value));
  const n = flat.length / 2;
  const t = [...Array(n).keys()];
  plotLines($("corr-plot"), [
    { x: t, y: Array.from(flat.slice(0, n)), color: "#999" },
    { x: t, y: Array.from(flat.slice(n)), color: "#d62728" },
  ]);
}

let session = null;

function newSession() {
  session?.free();
  session = new Session(Number($("sess-seed").value), Number($("sess-u").value));
  $("sess-train").disabled = false;
  $("est-run").disabled = false;
  $("est-index").max = session.test_len() - 1;
  $("sess-info").textContent = `${session.test_len()} test segments, untrained`;
}

function trainSession() {
  const acc = session.train(5);
  $("sess-info").textContent = `${session.epochs()} epochs, test accuracy ${(100 * acc).toFixed(1)}%`;
}

function drawEstimate(r) {
  const canvas = $("est-plot");
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const k = r.predictive_mean.length;
  const slot = (w - 20) / k;
  const vmax = Math.max(...r.total_variance, 1e-12);
  r.predictive_mean.forEach((p, c) => {
    const x = 10 + c * slot;
    ctx.fillStyle = c === r.label ? "#2ca02c" : "#bbb";
    ctx.fillRect(x + 4, h - 20 - p * (h - 40), slot / 3, p * (h - 40));
    const dv = (r.data_variance[c] / vmax) * (h - 40);
    const mv = (r.model_variance[c] / vmax) * (h - 40);
    ctx.fillStyle = "#1f77b4";
    ctx.fillRect(x + slot / 2, h - 20 - dv, slot / 4, dv);
    ctx.fillStyle = "#ff7f0e";
    ctx.fillRect(x + slot / 2, h - 20 - dv - mv, slot / 4, mv);
    ctx.fillStyle = "#333";
    ctx.fillText(`class ${c}`, x + 4, h - 5);
  });
}

function runEstimate() {
  const json = session.estimate(
    Number($("est-index").value),
    Number($("est-u").value),
    Number($("est-phi").value),
    Number($("est-n").value),
  );
  const r = JSON.parse(json);
  drawEstimate(r);
  $("est-out").textContent = JSON.stringify(r, (_, v) => (typeof v === "number" ? Number(v.toPrecision(4)) : v), 1);
}

function guarded(f) {
  return () => {
    try {
      f();
      $("status").textContent = "";
    } catch (e) {
      $("status").textContent = `Error: ${e.message ?? e}`;
    }
  };
}

await init();
for (const k of corruption_kinds()) {
  $("corr-kind").add(new Option(k, k));
}
$("relu-v").addEventListener("input", guarded(drawRelu));
for (const id of ["corr-kind", "corr-sev", "corr-seed"]) {
  $(id).addEventListener("input", guarded(drawCorruption));
}
$("sess-new").addEventListener("click", guarded(newSession));
$("sess-train").addEventListener("click", guarded(trainSession));
$("est-run").addEventListener("click", guarded(runEstimate));
guarded(drawRelu)();
guarded(drawCorruption)();
