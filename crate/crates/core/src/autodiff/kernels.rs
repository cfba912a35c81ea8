//! Forward and backward kernels on flat row-major buffers.
//!
//! Every kernel here is shape-checked by its caller in `graph.rs`; the
//! functions themselves only assert in debug builds.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output index range `[lo, hi)` along one axis for kernel tap `k`, so that
    /// `o * stride + k - padding` stays inside `[0, extent)`.
    #[inline]
    fn valid_range(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let p = self.padding as isize;
        let s = self.stride as isize;
        let k = k as isize;
        let lo = if p > k { (p - k + s - 1) / s } else { 0 };
        let top = extent as isize - 1 + p - k;
        if top < 0 {
            return (0, 0);
        }
        let hi = ((top / s) + 1).min(out_extent as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.f * g.oh * g.ow];
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for n in 0..g.n {
        for f in 0..g.f {
            let o = &mut out[(n * g.f + f) * out_plane..(n * g.f + f + 1) * out_plane];
            o.iter_mut().for_each(|v| *v = bias[f]);
            for c in 0..g.c {
                let x = &input[(n * g.c + c) * in_plane..(n * g.c + c + 1) * in_plane];
                for i in 0..g.kh {
                    let (oh_lo, oh_hi) = g.valid_range(i, g.h, g.oh);
                    for j in 0..g.kw {
                        let wv = kernel[((f * g.c + c) * g.kh + i) * g.kw + j];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = g.valid_range(j, g.w, g.ow);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + i - g.padding;
                            let orow = &mut o[oh * g.ow..(oh + 1) * g.ow];
                            let xrow = &x[ih * g.w..(ih + 1) * g.w];
                            if g.stride == 1 {
                                let shift = j as isize - g.padding as isize;
                                let xs = &xrow[(ow_lo as isize + shift) as usize..(ow_hi as isize + shift) as usize];
                                for (ov, xv) in orow[ow_lo..ow_hi].iter_mut().zip(xs) {
                                    *ov += wv * xv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    orow[ow] += wv * xrow[ow * g.stride + j - g.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates kernel, bias and (optionally) input gradients.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    dout: &[f64],
    mut dinput: Option<&mut [f64]>,
    mut dkernel: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) {
    let in_plane = g.h * g.w;
    let out_plane = g.oh * g.ow;
    for n in 0..g.n {
        for f in 0..g.f {
            let go = &dout[(n * g.f + f) * out_plane..(n * g.f + f + 1) * out_plane];
            if let Some(db) = dbias.as_deref_mut() {
                db[f] += go.iter().sum::<f64>();
            }
            for c in 0..g.c {
                let base = (n * g.c + c) * in_plane;
                for i in 0..g.kh {
                    let (oh_lo, oh_hi) = g.valid_range(i, g.h, g.oh);
                    for j in 0..g.kw {
                        let kidx = ((f * g.c + c) * g.kh + i) * g.kw + j;
                        let wv = kernel[kidx];
                        let (ow_lo, ow_hi) = g.valid_range(j, g.w, g.ow);
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + i - g.padding;
                            let grow = &go[oh * g.ow..(oh + 1) * g.ow];
                            let row_base = base + ih * g.w;
                            for ow in ow_lo..ow_hi {
                                let iw = ow * g.stride + j - g.padding;
                                acc += grow[ow] * input[row_base + iw];
                            }
                            if let Some(di) = dinput.as_deref_mut() {
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * g.stride + j - g.padding;
                                    di[row_base + iw] += grow[ow] * wv;
                                }
                            }
                        }
                        if let Some(dk) = dkernel.as_deref_mut() {
                            dk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Max pooling. Out-of-range positions (bottom/right padding) act as -inf.
/// Returns the outputs and, per output, the flat input index of the first
/// maximal element in row-major scan order.
pub(crate) fn maxpool_forward(g: &PoolGeom, input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.planes * g.oh * g.ow);
    let mut arg = Vec::with_capacity(g.planes * g.oh * g.ow);
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for i in 0..g.window {
                    let ih = oh * g.stride + i;
                    if ih >= g.h {
                        break;
                    }
                    for j in 0..g.window {
                        let iw = ow * g.stride + j;
                        if iw >= g.w {
                            break;
                        }
                        let idx = base + ih * g.w + iw;
                        if best_idx == usize::MAX || input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Average pooling over non-overlapping `factor x factor` blocks.
pub(crate) fn avgpool_forward(planes: usize, h: usize, w: usize, factor: usize, input: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h / factor, w / factor);
    let scale = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for ih in 0..oh * factor {
            for iw in 0..ow * factor {
                out[(p * oh + ih / factor) * ow + iw / factor] += input[(p * h + ih) * w + iw] * scale;
            }
        }
    }
    out
}

pub(crate) fn avgpool_backward(
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
    dout: &[f64],
    dinput: &mut [f64],
) {
    let (oh, ow) = (h / factor, w / factor);
    let scale = 1.0 / (factor * factor) as f64;
    for p in 0..planes {
        for ih in 0..oh * factor {
            for iw in 0..ow * factor {
                dinput[(p * h + ih) * w + iw] += dout[(p * oh + ih / factor) * ow + iw / factor] * scale;
            }
        }
    }
}

/// Align-corners interpolation table: for every output index, the two source
/// indices and the weight of the second one.
pub(crate) fn interp_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward(planes: usize, h: usize, w: usize, th: usize, tw: usize, input: &[f64]) -> Vec<f64> {
    let rows = interp_table(h, th);
    let cols = interp_table(w, tw);
    let mut out = Vec::with_capacity(planes * th * tw);
    for p in 0..planes {
        let x = &input[p * h * w..(p + 1) * h * w];
        for &(r0, r1, wr) in &rows {
            for &(c0, c1, wc) in &cols {
                let top = x[r0 * w + c0] * (1.0 - wc) + x[r0 * w + c1] * wc;
                let bot = x[r1 * w + c0] * (1.0 - wc) + x[r1 * w + c1] * wc;
                out.push(top * (1.0 - wr) + bot * wr);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn upsample_backward(
    planes: usize,
    h: usize,
    w: usize,
    th: usize,
    tw: usize,
    dout: &[f64],
    dinput: &mut [f64],
) {
    let rows = interp_table(h, th);
    let cols = interp_table(w, tw);
    for p in 0..planes {
        let dx = &mut dinput[p * h * w..(p + 1) * h * w];
        let go = &dout[p * th * tw..(p + 1) * th * tw];
        for (oi, &(r0, r1, wr)) in rows.iter().enumerate() {
            for (oj, &(c0, c1, wc)) in cols.iter().enumerate() {
                let g = go[oi * tw + oj];
                dx[r0 * w + c0] += g * (1.0 - wr) * (1.0 - wc);
                dx[r0 * w + c1] += g * (1.0 - wr) * wc;
                dx[r1 * w + c0] += g * wr * (1.0 - wc);
                dx[r1 * w + c1] += g * wr * wc;
            }
        }
    }
}

/// Row-wise softmax of `logits / tau` with max subtraction.
pub(crate) fn softmax_rows(rows: usize, cols: usize, logits: &[f64], tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let z = &logits[r * cols..(r + 1) * cols];
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for (ov, &zv) in o.iter_mut().zip(z) {
            *ov = ((zv - m) / tau).exp();
            total += *ov;
        }
        o.iter_mut().for_each(|v| *v /= total);
    }
    out
}

pub(crate) fn dense_forward(n: usize, d: usize, u: usize, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * u);
    for i in 0..n {
        out.extend_from_slice(b);
        let row = &mut out[i * u..(i + 1) * u];
        for k in 0..d {
            let xv = x[i * d + k];
            if xv == 0.0 {
                continue;
            }
            for (o, wv) in row.iter_mut().zip(&w[k * u..(k + 1) * u]) {
                *o += xv * wv;
            }
        }
    }
    out
}
