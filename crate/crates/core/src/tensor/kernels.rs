//! Slice-level forward and backward kernels. Shapes are validated by the
//! tape before these are called.

/// Geometry of a 2-D convolution over NCHW input and KCHW weights.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output index range `[lo, hi)` along one axis for kernel offset `off`
    /// such that the input coordinate `o * stride + off - pad` is in bounds.
    fn valid_range(&self, off: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = off as isize - self.pad as isize;
        // smallest o with o*s + shift >= 0
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        // largest o with o*s + shift <= extent-1
        let top = extent as isize - 1 - shift;
        let hi = if top < 0 { 0 } else { (top / s + 1).min(out as isize) };
        (lo as usize, hi.max(lo) as usize)
    }
}

pub(crate) fn conv2d_forward(x: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let out_plane = g.oh * g.ow;
    let in_plane = g.h * g.w;
    let mut out = vec![0.0; g.n * g.k * out_plane];
    for n in 0..g.n {
        for k in 0..g.k {
            let o = &mut out[(n * g.k + k) * out_plane..][..out_plane];
            o.fill(bias[k]);
            for c in 0..g.c {
                let xin = &x[(n * g.c + c) * in_plane..][..in_plane];
                for ki in 0..g.kh {
                    let (y0, y1) = g.valid_range(ki, g.h, g.oh);
                    for kj in 0..g.kw {
                        let wv = weight[((k * g.c + c) * g.kh + ki) * g.kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = g.valid_range(kj, g.w, g.ow);
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ki - g.pad;
                            let orow = &mut o[oy * g.ow..][..g.ow];
                            let irow = &xin[iy * g.w..][..g.w];
                            if g.stride == 1 {
                                let base = kj as isize - g.pad as isize;
                                let src = &irow[(x0 as isize + base) as usize..(x1 as isize + base) as usize];
                                for (dst, &s) in orow[x0..x1].iter_mut().zip(src) {
                                    *dst += wv * s;
                                }
                            } else {
                                for ox in x0..x1 {
                                    orow[ox] += wv * irow[ox * g.stride + kj - g.pad];
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

pub(crate) fn conv2d_backward_input(dout: &[f64], weight: &[f64], g: &ConvGeom) -> Vec<f64> {
    let out_plane = g.oh * g.ow;
    let in_plane = g.h * g.w;
    let mut dx = vec![0.0; g.n * g.c * in_plane];
    for n in 0..g.n {
        for k in 0..g.k {
            let d = &dout[(n * g.k + k) * out_plane..][..out_plane];
            for c in 0..g.c {
                let dxin = &mut dx[(n * g.c + c) * in_plane..][..in_plane];
                for ki in 0..g.kh {
                    let (y0, y1) = g.valid_range(ki, g.h, g.oh);
                    for kj in 0..g.kw {
                        let wv = weight[((k * g.c + c) * g.kh + ki) * g.kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = g.valid_range(kj, g.w, g.ow);
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ki - g.pad;
                            let drow = &d[oy * g.ow..][..g.ow];
                            let irow = &mut dxin[iy * g.w..][..g.w];
                            if g.stride == 1 {
                                let base = kj as isize - g.pad as isize;
                                let dst = &mut irow[(x0 as isize + base) as usize..(x1 as isize + base) as usize];
                                for (t, &s) in dst.iter_mut().zip(&drow[x0..x1]) {
                                    *t += wv * s;
                                }
                            } else {
                                for ox in x0..x1 {
                                    irow[ox * g.stride + kj - g.pad] += wv * drow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Returns `(d_weight, d_bias)`.
pub(crate) fn conv2d_backward_params(dout: &[f64], x: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let out_plane = g.oh * g.ow;
    let in_plane = g.h * g.w;
    let mut dw = vec![0.0; g.k * g.c * g.kh * g.kw];
    let mut db = vec![0.0; g.k];
    for n in 0..g.n {
        for k in 0..g.k {
            let d = &dout[(n * g.k + k) * out_plane..][..out_plane];
            db[k] += d.iter().sum::<f64>();
            for c in 0..g.c {
                let xin = &x[(n * g.c + c) * in_plane..][..in_plane];
                for ki in 0..g.kh {
                    let (y0, y1) = g.valid_range(ki, g.h, g.oh);
                    for kj in 0..g.kw {
                        let (x0, x1) = g.valid_range(kj, g.w, g.ow);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ki - g.pad;
                            let drow = &d[oy * g.ow..][..g.ow];
                            let irow = &xin[iy * g.w..][..g.w];
                            if g.stride == 1 {
                                let base = kj as isize - g.pad as isize;
                                let src = &irow[(x0 as isize + base) as usize..(x1 as isize + base) as usize];
                                acc += drow[x0..x1].iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                            } else {
                                for ox in x0..x1 {
                                    acc += drow[ox] * irow[ox * g.stride + kj - g.pad];
                                }
                            }
                        }
                        dw[((k * g.c + c) * g.kh + ki) * g.kw + kj] += acc;
                    }
                }
            }
        }
    }
    (dw, db)
}

/// Max pooling over NCHW planes. Returns the pooled values and, for every
/// output cell, the flat input index of its maximum. Windows are scanned in
/// row-major order and the first maximal element wins ties.
pub(crate) fn max_pool2d_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg, oh, ow)
}

/// Half-open source range `[floor(i*n/m), ceil((i+1)*n/m))` for adaptive pooling.
pub(crate) fn adaptive_bounds(i: usize, n: usize, m: usize) -> (usize, usize) {
    let start = i * n / m;
    let end = ((i + 1) * n).div_ceil(m);
    (start, end)
}

pub(crate) fn adaptive_avg_pool2d_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..][..h * w];
        for i in 0..oh {
            let (r0, r1) = adaptive_bounds(i, h, oh);
            for j in 0..ow {
                let (c0, c1) = adaptive_bounds(j, w, ow);
                let mut acc = 0.0;
                for r in r0..r1 {
                    acc += plane[r * w + c0..r * w + c1].iter().sum::<f64>();
                }
                out.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_pool2d_backward(
    dout: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let plane = &mut dx[p * h * w..][..h * w];
        for i in 0..oh {
            let (r0, r1) = adaptive_bounds(i, h, oh);
            for j in 0..ow {
                let (c0, c1) = adaptive_bounds(j, w, ow);
                let g = dout[(p * oh + i) * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                for r in r0..r1 {
                    for v in &mut plane[r * w + c0..r * w + c1] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}

/// `y[n, o] = bias[o] + sum_i x[n, i] * weight[o, i]`.
pub(crate) fn linear_forward(x: &[f64], weight: &[f64], bias: &[f64], n: usize, fin: usize, fout: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(n * fout);
    for r in 0..n {
        let xr = &x[r * fin..][..fin];
        for o in 0..fout {
            let wr = &weight[o * fin..][..fin];
            y.push(bias[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    y
}

pub(crate) fn linear_backward_input(dy: &[f64], weight: &[f64], n: usize, fin: usize, fout: usize) -> Vec<f64> {
    let mut dx = vec![0.0; n * fin];
    for r in 0..n {
        let dxr = &mut dx[r * fin..][..fin];
        for o in 0..fout {
            let g = dy[r * fout + o];
            if g == 0.0 {
                continue;
            }
            for (d, &wv) in dxr.iter_mut().zip(&weight[o * fin..][..fin]) {
                *d += g * wv;
            }
        }
    }
    dx
}

pub(crate) fn linear_backward_params(dy: &[f64], x: &[f64], n: usize, fin: usize, fout: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dw = vec![0.0; fout * fin];
    let mut db = vec![0.0; fout];
    for r in 0..n {
        let xr = &x[r * fin..][..fin];
        for o in 0..fout {
            let g = dy[r * fout + o];
            db[o] += g;
            if g == 0.0 {
                continue;
            }
            for (d, &xv) in dw[o * fin..][..fin].iter_mut().zip(xr) {
                *d += g * xv;
            }
        }
    }
    (dw, db)
}
