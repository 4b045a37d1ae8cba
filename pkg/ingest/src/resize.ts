/**
 * Bilinear resize of HxW(xC) byte images with pixel-center alignment:
 * src = (dst + 0.5) * (S/D) - 0.5, edges clamped.
 */

export function resizeBilinear(
  src: Uint8Array,
  srcH: number,
  srcW: number,
  channels: number,
  dstH: number,
  dstW: number,
): Uint8Array {
  const out = new Uint8Array(dstH * dstW * channels);
  const sy = srcH / dstH;
  const sx = srcW / dstW;
  for (let y = 0; y < dstH; y++) {
    const fy = Math.min(Math.max((y + 0.5) * sy - 0.5, 0), srcH - 1);
    const y0 = Math.floor(fy);
    const y1 = Math.min(y0 + 1, srcH - 1);
    const wy = fy - y0;
    for (let x = 0; x < dstW; x++) {
      const fx = Math.min(Math.max((x + 0.5) * sx - 0.5, 0), srcW - 1);
      const x0 = Math.floor(fx);
      const x1 = Math.min(x0 + 1, srcW - 1);
      const wx = fx - x0;
      for (let c = 0; c < channels; c++) {
        const p00 = src[(y0 * srcW + x0) * channels + c];
        const p01 = src[(y0 * srcW + x1) * channels + c];
        const p10 = src[(y1 * srcW + x0) * channels + c];
        const p11 = src[(y1 * srcW + x1) * channels + c];
        const top = p00 * (1 - wx) + p01 * wx;
        const bot = p10 * (1 - wx) + p11 * wx;
        const v = top * (1 - wy) + bot * wy;
        out[(y * dstW + x) * channels + c] = Math.max(0, Math.min(255, Math.round(v)));
      }
    }
  }
  return out;
}
