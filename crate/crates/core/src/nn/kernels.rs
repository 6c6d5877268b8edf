//! Inner loops over contiguous single-sample planes.

/// Unfolds one `(c, h, w)` sample into a `(c*k*k, h*w)` column matrix with
/// zero padding of `k/2`.
pub(super) fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * k * k * hw);
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                // valid output columns: 0 <= x + dx < w
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize) - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(0.0);
                    out[x1..].fill(0.0);
                    let s0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src_row[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
pub(super) fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, dx_out: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dx_out[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize) - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// 2x2 max pooling of one plane; records the flat argmax index per output.
pub(super) fn max_pool2(x: &[f64], h: usize, w: usize, y: &mut [f64], arg: &mut [u32]) {
    let (oh, ow) = (h / 2, w / 2);
    for oy in 0..oh {
        for ox in 0..ow {
            let base = 2 * oy * w + 2 * ox;
            let mut best = base;
            for cand in [base + 1, base + w, base + w + 1] {
                if x[cand] > x[best] {
                    best = cand;
                }
            }
            y[oy * ow + ox] = x[best];
            arg[oy * ow + ox] = best as u32;
        }
    }
}

/// Nearest-neighbour upsampling of one plane by an integer factor.
pub(super) fn upsample(x: &[f64], h: usize, w: usize, f: usize, y: &mut [f64]) {
    let ow = w * f;
    for iy in 0..h {
        let src = &x[iy * w..(iy + 1) * w];
        let first = iy * f * ow;
        {
            let row = &mut y[first..first + ow];
            for (ix, &v) in src.iter().enumerate() {
                row[ix * f..(ix + 1) * f].fill(v);
            }
        }
        for r in 1..f {
            y.copy_within(first..first + ow, first + r * ow);
        }
    }
}

/// Adjoint of [`upsample`]: block sums.
pub(super) fn upsample_adjoint(dy: &[f64], h: usize, w: usize, f: usize, dx: &mut [f64]) {
    let ow = w * f;
    for oy in 0..h * f {
        let row = &dy[oy * ow..(oy + 1) * ow];
        let dst = &mut dx[(oy / f) * w..(oy / f + 1) * w];
        for (ix, d) in dst.iter_mut().enumerate() {
            *d += row[ix * f..(ix + 1) * f].iter().sum::<f64>();
        }
    }
}
