//! Forward and backward kernels for the handful of layer types the network
//! uses. Convolutions are lowered to `sgemm` through an im2col buffer that is
//! built in row chunks, so the scratch memory stays bounded at any resolution.

use super::tensor::Tensor;

/// Upper bound on the im2col scratch buffer, in floats.
const COL_CHUNK_FLOATS: usize = 1 << 18;

/// `C = A·B + beta·C` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!(
        (m - 1) * rsa + (k - 1) * csa < a.len(),
        "sgemm: A out of bounds"
    );
    assert!(
        (k - 1) * rsb + (n - 1) * csb < b.len(),
        "sgemm: B out of bounds"
    );
    assert!(
        (m - 1) * rsc + (n - 1) * csc < c.len(),
        "sgemm: C out of bounds"
    );
    // SAFETY: the asserts above bound every element the routine touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Square, stride-1, "same"-padded convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1
    }

    fn rows_per_chunk(&self, cin: usize, h: usize, w: usize) -> usize {
        let per_row = cin * self.kernel * self.kernel * w;
        (COL_CHUNK_FLOATS / per_row.max(1)).clamp(1, h)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    geom: ConvGeom,
    row0: usize,
    rows: usize,
    col: &mut [f32],
) {
    let k = geom.kernel;
    let pad = geom.pad() as isize;
    let p = rows * w;
    for c in 0..cin {
        let src = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let dy = (ky * geom.dilation) as isize - pad;
            for kx in 0..k {
                let dx = (kx * geom.dilation) as isize - pad;
                let r = (c * k + ky) * k + kx;
                let dst = &mut col[r * p..(r + 1) * p];
                let lo = (-dx).clamp(0, w as isize) as usize;
                let hi = (w as isize - dx).clamp(0, w as isize) as usize;
                for oy in 0..rows {
                    let iy = (row0 + oy) as isize + dy;
                    let drow = &mut dst[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    drow[..lo].fill(0.0);
                    drow[hi..].fill(0.0);
                    let s0 = (lo as isize + dx) as usize;
                    drow[lo..hi].copy_from_slice(&srow[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    geom: ConvGeom,
    row0: usize,
    rows: usize,
    dx: &mut [f32],
) {
    let k = geom.kernel;
    let pad = geom.pad() as isize;
    let p = rows * w;
    for c in 0..cin {
        let dst = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            let dy = (ky * geom.dilation) as isize - pad;
            for kx in 0..k {
                let dxo = (kx * geom.dilation) as isize - pad;
                let r = (c * k + ky) * k + kx;
                let src = &col[r * p..(r + 1) * p];
                let lo = (-dxo).clamp(0, w as isize) as usize;
                let hi = (w as isize - dxo).clamp(0, w as isize) as usize;
                if lo >= hi {
                    continue;
                }
                for oy in 0..rows {
                    let iy = (row0 + oy) as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let s0 = (lo as isize + dxo) as usize;
                    let drow = &mut dst[iy as usize * w + s0..iy as usize * w + s0 + (hi - lo)];
                    let srow = &src[oy * w + lo..oy * w + hi];
                    for (d, s) in drow.iter_mut().zip(srow) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvGeom,
) -> Tensor {
    let [n, cin, h, w] = x.shape();
    let cout = weight.n();
    debug_assert_eq!(weight.shape(), [cout, cin, geom.kernel, geom.kernel]);
    let kdim = cin * geom.kernel * geom.kernel;
    let hw = h * w;
    let mut out = Tensor::zeros([n, cout, h, w]);
    let rows = geom.rows_per_chunk(cin, h, w);
    let mut col = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; kdim * rows * w]
    };
    for s in 0..n {
        let xs = x.sample(s);
        let os = out.sample_mut(s);
        let mut row0 = 0;
        while row0 < h {
            let r = rows.min(h - row0);
            let p = r * w;
            let off = row0 * w;
            if geom.is_pointwise() {
                sgemm(
                    cout,
                    kdim,
                    p,
                    weight.data(),
                    kdim,
                    1,
                    &xs[off..],
                    hw,
                    1,
                    0.0,
                    &mut os[off..],
                    hw,
                    1,
                );
            } else {
                let col = &mut col[..kdim * p];
                im2col(xs, cin, h, w, geom, row0, r, col);
                sgemm(
                    cout,
                    kdim,
                    p,
                    weight.data(),
                    kdim,
                    1,
                    col,
                    p,
                    1,
                    0.0,
                    &mut os[off..],
                    hw,
                    1,
                );
            }
            row0 += r;
        }
        if let Some(b) = bias {
            for (o, &bv) in b.data().iter().enumerate() {
                os[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    geom: ConvGeom,
    need_input: bool,
    need_bias: bool,
) -> ConvGrads {
    let [n, cin, h, w] = x.shape();
    let cout = weight.n();
    let kdim = cin * geom.kernel * geom.kernel;
    let hw = h * w;
    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let rows = geom.rows_per_chunk(cin, h, w);
    let pointwise = geom.is_pointwise();
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![0.0f32; kdim * rows * w]
    };
    let mut dcol = if pointwise || !need_input {
        Vec::new()
    } else {
        vec![0.0f32; kdim * rows * w]
    };
    for s in 0..n {
        let xs = x.sample(s);
        let dys = dy.sample(s);
        let mut row0 = 0;
        while row0 < h {
            let r = rows.min(h - row0);
            let p = r * w;
            let off = row0 * w;
            let dy_chunk = &dys[off..];
            if pointwise {
                // dW += dY · Xᵀ
                sgemm(
                    cout,
                    p,
                    kdim,
                    dy_chunk,
                    hw,
                    1,
                    &xs[off..],
                    1,
                    hw,
                    1.0,
                    dw.data_mut(),
                    kdim,
                    1,
                );
                if let Some(dx) = dx.as_mut() {
                    let dxs = dx.sample_mut(s);
                    sgemm(
                        kdim,
                        cout,
                        p,
                        weight.data(),
                        1,
                        kdim,
                        dy_chunk,
                        hw,
                        1,
                        0.0,
                        &mut dxs[off..],
                        hw,
                        1,
                    );
                }
            } else {
                let colc = &mut col[..kdim * p];
                im2col(xs, cin, h, w, geom, row0, r, colc);
                sgemm(
                    cout,
                    p,
                    kdim,
                    dy_chunk,
                    hw,
                    1,
                    colc,
                    1,
                    p,
                    1.0,
                    dw.data_mut(),
                    kdim,
                    1,
                );
                if let Some(dx) = dx.as_mut() {
                    let dcolc = &mut dcol[..kdim * p];
                    sgemm(
                        kdim,
                        cout,
                        p,
                        weight.data(),
                        1,
                        kdim,
                        dy_chunk,
                        hw,
                        1,
                        0.0,
                        dcolc,
                        p,
                        1,
                    );
                    col2im_add(dcolc, cin, h, w, geom, row0, r, dx.sample_mut(s));
                }
            }
            row0 += r;
        }
    }
    let db = need_bias.then(|| {
        let mut db = Tensor::zeros([1, cout, 1, 1]);
        for s in 0..n {
            for o in 0..cout {
                let acc: f64 = dy.plane(s, o).iter().map(|&v| v as f64).sum();
                db.data_mut()[o] += acc as f32;
            }
        }
        db
    });
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// 2×2, stride-2 max pooling. Returns the pooled tensor and the winning
/// offset (0..4, row-major inside the window) of every output cell.
pub fn max_pool2_forward(x: &Tensor) -> (Tensor, Vec<u8>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0u8; n * c * oh * ow];
    let mut idx = 0;
    for s in 0..n {
        for ch in 0..c {
            let src = x.plane(s, ch);
            let dst = out.plane_mut(s, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = 2 * oy * w + 2 * ox;
                    let cand = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                    let mut best = 0;
                    for j in 1..4 {
                        if cand[j] > cand[best] {
                            best = j;
                        }
                    }
                    dst[oy * ow + ox] = cand[best];
                    arg[idx] = best as u8;
                    idx += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(input_shape: [usize; 4], arg: &[u8], dy: &Tensor) -> Tensor {
    let [n, c, h, w] = input_shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(input_shape);
    let mut idx = 0;
    for s in 0..n {
        for ch in 0..c {
            let g = dy.plane(s, ch);
            let dst = dx.plane_mut(s, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let a = arg[idx] as usize;
                    let pos = (2 * oy + a / 2) * w + 2 * ox + a % 2;
                    dst[pos] += g[oy * ow + ox];
                    idx += 1;
                }
            }
        }
    }
    dx
}

/// Per-axis interpolation table: source indices and the weight of the upper
/// neighbour, half-pixel-centre convention.
fn bilinear_table(input: usize, factor: usize) -> Vec<(usize, usize, f32)> {
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

pub fn upsample_bilinear_forward(x: &Tensor, factor: usize) -> Tensor {
    if factor == 1 {
        return x.clone();
    }
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_table(h, factor);
    let tx = bilinear_table(w, factor);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for s in 0..n {
        for ch in 0..c {
            let src = x.plane(s, ch);
            let dst = out.plane_mut(s, ch);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let r0 = &src[y0 * w..(y0 + 1) * w];
                let r1 = &src[y1 * w..(y1 + 1) * w];
                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                for (d, &(x0, x1, fx)) in drow.iter_mut().zip(&tx) {
                    let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                    let bot = r1[x0] + fx * (r1[x1] - r1[x0]);
                    *d = top + fy * (bot - top);
                }
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward(input_shape: [usize; 4], factor: usize, dy: &Tensor) -> Tensor {
    if factor == 1 {
        return dy.clone();
    }
    let [n, c, h, w] = input_shape;
    let ow = w * factor;
    let ty = bilinear_table(h, factor);
    let tx = bilinear_table(w, factor);
    let mut dx = Tensor::zeros(input_shape);
    for s in 0..n {
        for ch in 0..c {
            let g = dy.plane(s, ch);
            let dst = dx.plane_mut(s, ch);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let grow = &g[oy * ow..(oy + 1) * ow];
                for (&gv, &(x0, x1, fx)) in grow.iter().zip(&tx) {
                    let top = gv * (1.0 - fy);
                    let bot = gv * fy;
                    dst[y0 * w + x0] += top * (1.0 - fx);
                    dst[y0 * w + x1] += top * fx;
                    dst[y1 * w + x0] += bot * (1.0 - fx);
                    dst[y1 * w + x1] += bot * fx;
                }
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over batch and spatial axes.
pub fn channel_moments(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let [n, c, h, w] = x.shape();
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut acc = 0.0f64;
        for s in 0..n {
            acc += x.plane(s, ch).iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = acc / count;
        let mut sq = 0.0f64;
        for s in 0..n {
            sq += x
                .plane(s, ch)
                .iter()
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m as f32;
        var[ch] = (sq / count) as f32;
    }
    (mean, var)
}

pub fn batch_norm_apply(
    x: &Tensor,
    mean: &[f32],
    inv_std: &[f32],
    gamma: &Tensor,
    beta: &Tensor,
) -> Tensor {
    let [n, c, _, _] = x.shape();
    let mut out = x.clone();
    for s in 0..n {
        for ch in 0..c {
            let scale = gamma.data()[ch] * inv_std[ch];
            let shift = beta.data()[ch] - mean[ch] * scale;
            out.plane_mut(s, ch)
                .iter_mut()
                .for_each(|v| *v = *v * scale + shift);
        }
    }
    out
}

pub struct BatchNormGrads {
    pub input: Option<Tensor>,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// `batch_stats` selects the training-mode gradient (statistics depend on
/// the batch) versus the frozen-statistics gradient.
pub fn batch_norm_backward(
    x: &Tensor,
    mean: &[f32],
    inv_std: &[f32],
    gamma: &Tensor,
    dy: &Tensor,
    batch_stats: bool,
    need_input: bool,
) -> BatchNormGrads {
    let [n, c, h, w] = x.shape();
    let count = (n * h * w) as f64;
    let mut dgamma = Tensor::zeros([1, c, 1, 1]);
    let mut dbeta = Tensor::zeros([1, c, 1, 1]);
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    for ch in 0..c {
        let (m, is) = (mean[ch] as f64, inv_std[ch] as f64);
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for s in 0..n {
            for (&xv, &g) in x.plane(s, ch).iter().zip(dy.plane(s, ch)) {
                let xhat = (xv as f64 - m) * is;
                sum_dy += g as f64;
                sum_dy_xhat += g as f64 * xhat;
            }
        }
        dgamma.data_mut()[ch] = sum_dy_xhat as f32;
        dbeta.data_mut()[ch] = sum_dy as f32;
        if let Some(dx) = dx.as_mut() {
            let gm = gamma.data()[ch] as f64;
            for s in 0..n {
                let xp = x.plane(s, ch);
                let gp = dy.plane(s, ch);
                let dp = dx.plane_mut(s, ch);
                for ((d, &xv), &g) in dp.iter_mut().zip(xp).zip(gp) {
                    *d = if batch_stats {
                        let xhat = (xv as f64 - m) * is;
                        (gm * is / count * (count * g as f64 - sum_dy - xhat * sum_dy_xhat)) as f32
                    } else {
                        (gm * is * g as f64) as f32
                    };
                }
            }
        }
    }
    BatchNormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, wt: &Tensor, geom: ConvGeom) -> Tensor {
        let [n, cin, h, w] = x.shape();
        let cout = wt.n();
        let k = geom.kernel;
        let pad = geom.pad() as isize;
        let mut out = Tensor::zeros([n, cout, h, w]);
        for s in 0..n {
            for o in 0..cout {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0f64;
                        for c in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as isize + (ky * geom.dilation) as isize - pad;
                                    let ix = xx as isize + (kx * geom.dilation) as isize - pad;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.plane(s, c)[iy as usize * w + ix as usize] as f64;
                                    let wv = wt.data()[((o * cin + c) * k + ky) * k + kx] as f64;
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.plane_mut(s, o)[y * w + xx] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: [usize; 4], seed: u32) -> Tensor {
        let len = shape.iter().product::<usize>();
        let data = (0..len)
            .map(|i| ((((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 500.0) - 1.0)
            .collect();
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn conv_matches_naive_for_dilations() {
        for &(k, d) in &[(1, 1), (3, 1), (3, 2), (3, 4), (3, 6)] {
            let geom = ConvGeom {
                kernel: k,
                dilation: d,
            };
            let x = ramp([2, 3, 7, 9], 11);
            let wt = ramp([4, 3, k, k], 5);
            let got = conv2d_forward(&x, &wt, None, geom);
            let want = naive_conv(&x, &wt, geom);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-4, "k={k} d={d}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), g> = <x, dX(g)> = <W, dW(g)> for a bias-free conv.
        let geom = ConvGeom {
            kernel: 3,
            dilation: 2,
        };
        let x = ramp([2, 3, 6, 5], 1);
        let wt = ramp([4, 3, 3, 3], 2);
        let g = ramp([2, 4, 6, 5], 3);
        let y = conv2d_forward(&x, &wt, None, geom);
        let grads = conv2d_backward(&x, &wt, &g, geom, true, false);
        let lhs: f64 = y
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        let dx = grads.input.unwrap();
        let rhs_x: f64 = x
            .data()
            .iter()
            .zip(dx.data())
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        let rhs_w: f64 = wt
            .data()
            .iter()
            .zip(grads.weight.data())
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        assert!((lhs - rhs_x).abs() < 1e-3 * lhs.abs().max(1.0));
        assert!((lhs - rhs_w).abs() < 1e-3 * lhs.abs().max(1.0));
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let x = ramp([1, 2, 3, 3], 9);
        assert_eq!(upsample_bilinear_forward(&x, 1), x);
    }

    #[test]
    fn upsample_preserves_constants_and_is_adjoint() {
        let x = Tensor::full([1, 1, 3, 4], 0.7);
        let y = upsample_bilinear_forward(&x, 4);
        assert_eq!(y.shape(), [1, 1, 12, 16]);
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-6));

        let x = ramp([2, 2, 3, 4], 4);
        let g = ramp([2, 2, 6, 8], 8);
        let y = upsample_bilinear_forward(&x, 2);
        let dx = upsample_bilinear_backward(x.shape(), 2, &g);
        let lhs: f64 = y
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(dx.data())
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn max_pool_routes_gradient_to_winner() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![0.1, 0.9, 0.3, 0.2]);
        let (y, arg) = max_pool2_forward(&x);
        assert_eq!(y.data(), &[0.9]);
        let dx = max_pool2_backward(x.shape(), &arg, &Tensor::full([1, 1, 1, 1], 2.0));
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
