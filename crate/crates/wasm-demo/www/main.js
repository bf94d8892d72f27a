import init, { simulate, tableau_json, tableau_report, fpi_trace } from "./pkg/shnn_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const vec = (id) => $(id).value.split(",").map((s) => Number(s.trim()));

function show(id, text, isError) {
  $(id).textContent = text;
  $(id).className = isError ? "err" : "";
}

// Scales data ranges onto a canvas with a small margin.
function frame(canvas, xs, ys, yLog) {
  const ctx = canvas.getContext("2d");
  const m = 36;
  const fy = yLog ? (v) => Math.log10(Math.max(v, 1e-17)) : (v) => v;
  const tys = ys.map(fy);
  let [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  let [y0, y1] = [Math.min(...tys), Math.max(...tys)];
  if (x1 === x0) { x0 -= 1; x1 += 1; }
  if (y1 === y0) { y0 -= 1; y1 += 1; }
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(m, 8, canvas.width - m - 8, canvas.height - m - 8);
  ctx.fillStyle = "#555";
  ctx.font = "11px sans-serif";
  const lab = (v) => (yLog ? "1e" + v.toFixed(0) : v.toPrecision(3));
  ctx.fillText(lab(y1), 2, 16);
  ctx.fillText(lab(y0), 2, canvas.height - m);
  ctx.fillText(x0.toPrecision(3), m, canvas.height - m + 14);
  ctx.fillText(x1.toPrecision(3), canvas.width - 50, canvas.height - m + 14);
  const px = (x) => m + ((x - x0) / (x1 - x0)) * (canvas.width - m - 8);
  const py = (y) => canvas.height - m - ((fy(y) - y0) / (y1 - y0)) * (canvas.height - m - 8);
  return { ctx, px, py };
}

function polyline(canvas, xs, ys, color, yLog, title) {
  const { ctx, px, py } = frame(canvas, xs, ys, yLog);
  ctx.strokeStyle = color;
  ctx.beginPath();
  xs.forEach((x, i) => (i ? ctx.lineTo(px(x), py(ys[i])) : ctx.moveTo(px(x), py(ys[i]))));
  ctx.stroke();
  ctx.fillStyle = "#222";
  ctx.fillText(title, 44, 22);
}

function runSim() {
  try {
    const y0 = vec("sim-y0");
    const h = num("sim-h");
    const rows = simulate($("sim-system").value, num("sim-alpha"), $("sim-method").value,
      Float64Array.from(y0), h, num("sim-steps"));
    const w = y0.length + 1;
    const d = y0.length / 2;
    // Henon-Heiles: show the (q_y, p_y) plane.
    const [iq, ip] = d === 1 ? [0, 1] : [1, 3];
    const qs = [], ps = [], ts = [], dev = [];
    const e0 = rows[w - 1];
    for (let k = 0; k * w < rows.length; k++) {
      qs.push(rows[k * w + iq]);
      ps.push(rows[k * w + ip]);
      ts.push(k * h);
      dev.push(rows[k * w + w - 1] - e0);
    }
    polyline($("sim-phase"), qs, ps, "#1f5fa8", false, d === 1 ? "q vs p" : "q_y vs p_y");
    polyline($("sim-energy"), ts, dev, "#a83a1f", false, "H(t) - H(0)");
    const maxDev = Math.max(...dev.map(Math.abs));
    show("sim-msg", `max |H - H0| = ${maxDev.toExponential(3)}`, false);
  } catch (e) {
    show("sim-msg", String(e), true);
  }
}

function loadPreset() {
  $("tab-json").value = tableau_json($("tab-preset").value);
  checkTableau();
}

function checkTableau() {
  try {
    const r = JSON.parse(tableau_report($("tab-json").value));
    $("tab-out").textContent =
      `symplectic: ${r.symplectic ? "yes" : "no"}\n` +
      `weights  max |b_i - B_i|                      ${r.weights.toExponential(3)}\n` +
      `coupling max |b_i A_ij + B_j a_ji - b_i B_j|  ${r.coupling.toExponential(3)}\n` +
      `nodes    max |c_i - C_i|                      ${r.nodes.toExponential(3)}`;
    $("tab-out").className = "";
  } catch (e) {
    show("tab-out", String(e), true);
  }
}

function runFpi() {
  try {
    const r = Array.from(fpi_trace($("fpi-system").value, num("fpi-alpha"),
      Float64Array.from(vec("fpi-y0")), num("fpi-h"), $("fpi-guess").value));
    const ks = r.map((_, i) => i + 1);
    polyline($("fpi-plot"), ks, r, "#2a8a3a", true, "iterate difference (log10) vs sweep");
    const ratios = r.slice(1).map((v, i) => v / r[i]).filter((_, i) => r[i + 1] > 1e-13);
    const worst = ratios.length ? Math.max(...ratios).toFixed(4) : "n/a";
    show("fpi-msg", `${r.length} sweeps, final difference ${r[r.length - 1].toExponential(2)}, ` +
      `worst contraction ratio ${worst}`, false);
  } catch (e) {
    show("fpi-msg", String(e), true);
  }
}

await init();
$("sim-run").onclick = runSim;
$("tab-preset").onchange = loadPreset;
$("tab-check").onclick = checkTableau;
$("fpi-run").onclick = runFpi;
$("sim-system").onchange = () => {
  const defaults = { double_well: "0.5, 0.5", coupled_ho: "0.6, -0.3", henon_heiles: "0, 0.1, 0.35, 0.2" };
  $("sim-y0").value = defaults[$("sim-system").value];
};
loadPreset();
runSim();
runFpi();
