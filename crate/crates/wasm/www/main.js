// Expects `wasm-bindgen --target web --out-dir www/pkg` output next to this file.
import init, { Demo, traceBound } from "./pkg/uvtok_wasm.js";

const $ = (id) => document.getElementById(id);
let demo = null;

function drawGray(canvas, values, grid) {
  canvas.width = grid;
  canvas.height = grid;
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(grid, grid);
  values.forEach((v, i) => {
    const g = Math.round(255 * v);
    img.data.set([g, g, g, 255], 4 * i);
  });
  ctx.putImageData(img, 0, 0);
}

function drawImage() {
  const n = demo.imageSize;
  const ctx = $("image").getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(demo.rgba()), n, n), 0, 0);
}

function drawMask(mask) {
  drawGray($("mask"), Array.from(mask), demo.grid);
  const uncertain = mask.filter((m) => m === 0).length;
  $("status").textContent += `; ${uncertain}/${mask.length} uncertain`;
}

function attack() {
  demo?.free();
  demo = new Demo(0n, BigInt($("seed").value));
  drawImage();
  const t = performance.now();
  const view = demo.attack(Number($("k").value), Number($("iters").value), Number($("sigma").value));
  const obj = view.objective;
  $("status").textContent = `objective ${obj[obj.length - 1].toExponential(3)} in ${(performance.now() - t).toFixed(0)} ms`;
  drawGray($("umap"), Array.from(view.uncertainty), demo.grid);
  drawMask(view.mask);
}

function rethreshold() {
  const s = Number($("sigma").value);
  $("sigmaOut").textContent = s.toFixed(2);
  if (!demo) return;
  $("status").textContent = `σ_th ${s.toFixed(2)}`;
  drawMask(demo.rethreshold(s));
}

function bound() {
  try {
    const eigs = Float64Array.from($("eigs").value.split(",").map(Number));
    const [h, b, gap] = traceBound(eigs);
    $("bound").textContent = `Gaussian entropy ${h.toFixed(4)} ≤ trace bound ${b.toFixed(4)} (gap ${gap.toFixed(4)})`;
  } catch (e) {
    $("bound").textContent = String(e);
  }
}

await init();
$("run").addEventListener("click", attack);
$("sigma").addEventListener("input", rethreshold);
$("eigs").addEventListener("input", bound);
attack();
bound();
