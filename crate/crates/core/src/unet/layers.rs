//! Forward and backward kernels for the network layers (NCHW tensors).

use super::tensor::{gemm, Mat, Scalar, Tensor4};

/// Pixels processed per im2col chunk; bounds scratch memory on large images.
const COL_CHUNK: usize = 1 << 16;

pub(crate) const NORM_EPS: f64 = 1e-5;

/// im2col for a `k×k` kernel with `k/2` zero padding, restricted to output
/// rows `y0..y1`. `col` is `(c*k*k) × ((y1-y0)*w)`.
fn im2col<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, k: usize, y0: usize, y1: usize, col: &mut [S]) {
    let pad = (k / 2) as isize;
    let span = (y1 - y0) * w;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * span..][..span];
                let dx = kx as isize - pad;
                for (r, y) in (y0..y1).enumerate() {
                    let sy = y as isize + ky as isize - pad;
                    let out = &mut row[r * w..(r + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(S::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *o = if sx < 0 || sx >= w as isize { S::zero() } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dx`.
fn col2im<S: Scalar>(col: &[S], c: usize, h: usize, w: usize, k: usize, y0: usize, y1: usize, dx: &mut [S]) {
    let pad = (k / 2) as isize;
    let span = (y1 - y0) * w;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * span..][..span];
                let dxo = kx as isize - pad;
                for (r, y) in (y0..y1).enumerate() {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, &v) in row[r * w..(r + 1) * w].iter().enumerate() {
                        let sx = x as isize + dxo;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn row_chunks(h: usize, w: usize, depth: usize) -> impl Iterator<Item = (usize, usize)> {
    let rows = (COL_CHUNK / (w * depth).max(1)).clamp(1, h);
    (0..h).step_by(rows).map(move |y0| (y0, (y0 + rows).min(h)))
}

/// Same-padded convolution with a `k×k` kernel (`k` odd). `weight` is
/// `cout × (cin*k*k)`.
pub(crate) fn conv_forward<S: Scalar>(x: &Tensor4<S>, weight: &[S], bias: Option<&[S]>, cout: usize, k: usize) -> Tensor4<S> {
    let [n, cin, h, w] = x.dims();
    let depth = cin * k * k;
    debug_assert_eq!(weight.len(), cout * depth);
    let mut y = Tensor4::zeros(n, cout, h, w);
    let hw = h * w;
    let mut col = Vec::new();
    for b in 0..n {
        let xs = x.sample(b);
        let ys = y.sample_mut(b);
        if k == 1 {
            gemm(S::one(), Mat::new(weight, cout, cin), Mat::new(xs, cin, hw), S::zero(), ys, hw);
        } else {
            for (y0, y1) in row_chunks(h, w, depth) {
                let span = (y1 - y0) * w;
                col.resize(depth * span, S::zero());
                im2col(xs, cin, h, w, k, y0, y1, &mut col);
                gemm(S::one(), Mat::new(weight, cout, depth), Mat::new(&col, depth, span), S::zero(), &mut ys[y0 * w..], hw);
            }
        }
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                for v in &mut ys[o * hw..(o + 1) * hw] {
                    *v += bv;
                }
            }
        }
    }
    y
}

/// Accumulates weight/bias gradients and returns the input gradient if asked.
pub(crate) fn conv_backward<S: Scalar>(
    x: &Tensor4<S>,
    weight: &[S],
    dy: &Tensor4<S>,
    k: usize,
    dweight: &mut [S],
    dbias: Option<&mut [S]>,
    need_dx: bool,
) -> Option<Tensor4<S>> {
    let [n, cin, h, w] = x.dims();
    let cout = dy.channels();
    let depth = cin * k * k;
    let hw = h * w;
    let mut dx = need_dx.then(|| Tensor4::zeros(n, cin, h, w));
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    for b in 0..n {
        let xs = x.sample(b);
        let dys = dy.sample(b);
        if k == 1 {
            gemm(S::one(), Mat::new(dys, cout, hw), Mat::new(xs, cin, hw).t(), S::one(), dweight, cin);
            if let Some(dx) = dx.as_mut() {
                gemm(S::one(), Mat::new(weight, cout, cin).t(), Mat::new(dys, cout, hw), S::zero(), dx.sample_mut(b), hw);
            }
            continue;
        }
        for (y0, y1) in row_chunks(h, w, depth) {
            let span = (y1 - y0) * w;
            col.resize(depth * span, S::zero());
            im2col(xs, cin, h, w, k, y0, y1, &mut col);
            let dy_chunk = Mat::strided(&dys[y0 * w..], cout, span, hw);
            gemm(S::one(), dy_chunk, Mat::new(&col, depth, span).t(), S::one(), dweight, depth);
            if let Some(dx) = dx.as_mut() {
                dcol.resize(depth * span, S::zero());
                gemm(S::one(), Mat::new(weight, cout, depth).t(), dy_chunk, S::zero(), &mut dcol, span);
                col2im(&dcol, cin, h, w, k, y0, y1, dx.sample_mut(b));
            }
        }
    }
    if let Some(db) = dbias {
        for b in 0..n {
            for (o, g) in db.iter_mut().enumerate() {
                *g += dy.plane(b, o).iter().copied().sum::<S>();
            }
        }
    }
    dx
}

/// 2×2 stride-2 transposed convolution. `weight` is `cin × (cout*4)`.
pub(crate) fn upconv_forward<S: Scalar>(x: &Tensor4<S>, weight: &[S], bias: &[S], cout: usize) -> Tensor4<S> {
    let [n, cin, h, w] = x.dims();
    let hw = h * w;
    let mut y = Tensor4::zeros(n, cout, 2 * h, 2 * w);
    let mut cols = vec![S::zero(); cout * 4 * hw];
    for b in 0..n {
        gemm(S::one(), Mat::new(weight, cin, cout * 4).t(), Mat::new(x.sample(b), cin, hw), S::zero(), &mut cols, hw);
        let ys = y.sample_mut(b);
        for o in 0..cout {
            let plane = &mut ys[o * 4 * hw..(o + 1) * 4 * hw];
            for d in 0..4 {
                let (di, dj) = (d / 2, d % 2);
                let src = &cols[(o * 4 + d) * hw..(o * 4 + d + 1) * hw];
                for i in 0..h {
                    for j in 0..w {
                        plane[(2 * i + di) * 2 * w + 2 * j + dj] = src[i * w + j] + bias[o];
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn upconv_backward<S: Scalar>(
    x: &Tensor4<S>,
    weight: &[S],
    dy: &Tensor4<S>,
    dweight: &mut [S],
    dbias: &mut [S],
) -> Tensor4<S> {
    let [n, cin, h, w] = x.dims();
    let cout = dy.channels();
    let hw = h * w;
    let mut dx = Tensor4::zeros(n, cin, h, w);
    let mut dcols = vec![S::zero(); cout * 4 * hw];
    for b in 0..n {
        let dys = dy.sample(b);
        for o in 0..cout {
            let plane = &dys[o * 4 * hw..(o + 1) * 4 * hw];
            for d in 0..4 {
                let (di, dj) = (d / 2, d % 2);
                let dst = &mut dcols[(o * 4 + d) * hw..(o * 4 + d + 1) * hw];
                for i in 0..h {
                    for j in 0..w {
                        dst[i * w + j] = plane[(2 * i + di) * 2 * w + 2 * j + dj];
                    }
                }
            }
            dbias[o] += plane.iter().copied().sum::<S>();
        }
        gemm(S::one(), Mat::new(x.sample(b), cin, hw), Mat::new(&dcols, cout * 4, hw).t(), S::one(), dweight, cout * 4);
        gemm(S::one(), Mat::new(weight, cin, cout * 4), Mat::new(&dcols, cout * 4, hw), S::zero(), dx.sample_mut(b), hw);
    }
    dx
}

/// Per-sample, per-channel normalization without affine parameters.
/// Returns the normalized tensor and the inverse standard deviations.
pub(crate) fn instance_norm_forward<S: Scalar>(x: &Tensor4<S>) -> (Tensor4<S>, Vec<S>) {
    let [n, c, _, _] = x.dims();
    let len = S::of(x.plane_len() as f64);
    let eps = S::of(NORM_EPS);
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(n * c);
    for b in 0..n {
        for ch in 0..c {
            let plane = y.plane_mut(b, ch);
            let mean = plane.iter().copied().sum::<S>() / len;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / len;
            let inv = (var + eps).sqrt().recip();
            for v in plane.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
    }
    (y, inv_std)
}

/// Gradient through instance norm given its output `xhat`.
pub(crate) fn instance_norm_backward<S: Scalar>(xhat: &Tensor4<S>, inv_std: &[S], dy: &Tensor4<S>) -> Tensor4<S> {
    let [n, c, _, _] = xhat.dims();
    let len = S::of(xhat.plane_len() as f64);
    let mut dx = dy.clone();
    for b in 0..n {
        for ch in 0..c {
            let xh = xhat.plane(b, ch);
            let g = dx.plane_mut(b, ch);
            let sum_g = g.iter().copied().sum::<S>();
            let sum_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<S>();
            let inv = inv_std[b * c + ch];
            for (gi, &xi) in g.iter_mut().zip(xh) {
                *gi = inv / len * (len * *gi - sum_g - xi * sum_gx);
            }
        }
    }
    dx
}

pub(crate) fn leaky_forward<S: Scalar>(x: &mut Tensor4<S>, slope: S) {
    for v in x.values_mut() {
        if *v < S::zero() {
            *v *= slope;
        }
    }
}

/// `out` is the activation output; positive outputs have unit slope.
pub(crate) fn leaky_backward<S: Scalar>(out: &Tensor4<S>, dy: &mut Tensor4<S>, slope: S) {
    for (g, &o) in dy.values_mut().iter_mut().zip(out.values()) {
        if o <= S::zero() {
            *g *= slope;
        }
    }
}

/// 2×2 stride-2 max pooling; also returns the flat argmax of each window.
pub(crate) fn maxpool_forward<S: Scalar>(x: &Tensor4<S>) -> (Tensor4<S>, Vec<u32>) {
    let [n, c, h, w] = x.dims();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor4::zeros(n, c, oh, ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = y.plane_mut(b, ch);
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = (2 * i) * w + 2 * j;
                    for idx in [(2 * i) * w + 2 * j + 1, (2 * i + 1) * w + 2 * j, (2 * i + 1) * w + 2 * j + 1] {
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    dst[i * ow + j] = src[best];
                    arg.push(best as u32);
                }
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool_backward<S: Scalar>(arg: &[u32], dy: &Tensor4<S>, h: usize, w: usize) -> Tensor4<S> {
    let [n, c, _, _] = dy.dims();
    let mut dx = Tensor4::zeros(n, c, h, w);
    let plane = dy.plane_len();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let g = dy.plane(b, ch);
            let dst = dx.plane_mut(b, ch);
            for (k, &gv) in g.iter().enumerate() {
                dst[arg[base + k] as usize] += gv;
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub(crate) fn concat<S: Scalar>(a: &Tensor4<S>, b: &Tensor4<S>) -> Tensor4<S> {
    let [n, ca, h, w] = a.dims();
    let cb = b.channels();
    let mut values = Vec::with_capacity(n * (ca + cb) * h * w);
    for s in 0..n {
        values.extend_from_slice(a.sample(s));
        values.extend_from_slice(b.sample(s));
    }
    Tensor4::raw(n, ca + cb, h, w, values)
}

/// Splits a concatenation gradient into its two parts.
pub(crate) fn split_channels<S: Scalar>(d: &Tensor4<S>, ca: usize) -> (Tensor4<S>, Tensor4<S>) {
    let [n, c, h, w] = d.dims();
    let cb = c - ca;
    let (mut va, mut vb) = (Vec::with_capacity(n * ca * h * w), Vec::with_capacity(n * cb * h * w));
    let plane = h * w;
    for s in 0..n {
        let sample = d.sample(s);
        va.extend_from_slice(&sample[..ca * plane]);
        vb.extend_from_slice(&sample[ca * plane..]);
    }
    (Tensor4::raw(n, ca, h, w, va), Tensor4::raw(n, cb, h, w, vb))
}

/// Softmax over channels at every pixel.
pub(crate) fn softmax_channels<S: Scalar>(x: &mut Tensor4<S>) {
    let [n, c, h, w] = x.dims();
    let plane = h * w;
    for b in 0..n {
        let s = x.sample_mut(b);
        for p in 0..plane {
            let max = (0..c).map(|ch| s[ch * plane + p]).fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for ch in 0..c {
                let e = (s[ch * plane + p] - max).exp();
                s[ch * plane + p] = e;
                total += e;
            }
            for ch in 0..c {
                s[ch * plane + p] /= total;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor4<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let values = (0..n * c * h * w)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor4::from_vec(n, c, h, w, values).unwrap()
    }

    fn naive_conv(x: &Tensor4<f64>, wt: &[f64], cout: usize, k: usize) -> Tensor4<f64> {
        let [n, cin, h, w] = x.dims();
        let pad = (k / 2) as isize;
        let mut y = Tensor4::zeros(n, cout, h, w);
        for b in 0..n {
            for o in 0..cout {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = 0.0;
                        for c in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (si, sj) = (i as isize + ky as isize - pad, j as isize + kx as isize - pad);
                                    if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                                        acc += wt[o * cin * k * k + (c * k + ky) * k + kx] * x.plane(b, c)[si as usize * w + sj as usize];
                                    }
                                }
                            }
                        }
                        y.plane_mut(b, o)[i * w + j] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive() {
        let x = tensor(2, 3, 5, 7, 1);
        let wt = tensor(1, 1, 4, 27, 2).into_values();
        let y = conv_forward(&x, &wt, None, 4, 3);
        let expect = naive_conv(&x, &wt, 4, 3);
        for (a, b) in y.values().iter().zip(expect.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let w1 = tensor(1, 1, 2, 3, 3).into_values();
        let y1 = conv_forward(&x, &w1, Some(&[0.5, -1.0]), 2, 1);
        let e1 = naive_conv(&x, &w1, 2, 1);
        assert!((y1.values()[0] - (e1.values()[0] + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> == <x, dx(g)> and == <w, dw(g)>
        let x = tensor(2, 3, 6, 5, 4);
        let wt = tensor(1, 1, 2, 27, 5).into_values();
        let g = tensor(2, 2, 6, 5, 6);
        let y = conv_forward(&x, &wt, None, 2, 3);
        let lhs: f64 = y.values().iter().zip(g.values()).map(|(a, b)| a * b).sum();
        let mut dw = vec![0.0; wt.len()];
        let dx = conv_backward(&x, &wt, &g, 3, &mut dw, None, true).unwrap();
        let via_x: f64 = dx.values().iter().zip(x.values()).map(|(a, b)| a * b).sum();
        let via_w: f64 = dw.iter().zip(&wt).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn upconv_backward_is_adjoint() {
        let x = tensor(1, 4, 3, 2, 7);
        let wt = tensor(1, 1, 4, 8, 8).into_values();
        let bias = [0.0, 0.0];
        let g = tensor(1, 2, 6, 4, 9);
        let y = upconv_forward(&x, &wt, &bias, 2);
        let lhs: f64 = y.values().iter().zip(g.values()).map(|(a, b)| a * b).sum();
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; 2];
        let dx = upconv_backward(&x, &wt, &g, &mut dw, &mut db);
        let via_x: f64 = dx.values().iter().zip(x.values()).map(|(a, b)| a * b).sum();
        let via_w: f64 = dw.iter().zip(&wt).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
        assert!((db[0] - g.plane(0, 0).iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let x = tensor(2, 3, 4, 4, 10);
        let (y, _) = instance_norm_forward(&x);
        for b in 0..2 {
            for c in 0..3 {
                let p = y.plane(b, c);
                let mean: f64 = p.iter().sum::<f64>() / 16.0;
                let var: f64 = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
                assert!(mean.abs() < 1e-12);
                assert!((var - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn pool_and_softmax() {
        let x = Tensor4::from_vec(1, 1, 2, 4, vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 9.0, 2.0]).unwrap();
        let (y, arg) = maxpool_forward(&x);
        assert_eq!(y.values(), &[5.0, 9.0]);
        let dx = maxpool_backward(&arg, &Tensor4::from_vec(1, 1, 1, 2, vec![1.0, 2.0]).unwrap(), 2, 4);
        assert_eq!(dx.values(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let mut s = tensor(1, 3, 2, 2, 11);
        softmax_channels(&mut s);
        for p in 0..4 {
            let total: f64 = (0..3).map(|c| s.plane(0, c)[p]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
