//! Raw NCHW kernels behind the tensor and autodiff ops.
//!
//! Matrix products go through `matrixmultiply` (fixed blocking, so repeated
//! calls on one machine are bitwise reproducible); batch statistics
//! accumulate in `f64`.

use crate::par;
use crate::tensor::Scalar;

/// `c[m,n] += a[m,k] * b[k,n]`, row-major.
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm_acc(
        m,
        k,
        n,
        a,
        (k as isize, 1),
        b,
        (n as isize, 1),
        c,
        (n as isize, 1),
    );
}

/// `c[m,n] += a[m,k] * b[n,k]^T`.
pub fn gemm_abt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm_acc(
        m,
        k,
        n,
        a,
        (k as isize, 1),
        b,
        (1, k as isize),
        c,
        (n as isize, 1),
    );
}

/// `c[k,n] += a[m,k]^T * b[m,n]`.
pub fn gemm_atb<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    T::gemm_acc(
        k,
        m,
        n,
        a,
        (1, k as isize),
        b,
        (n as isize, 1),
        c,
        (n as isize, 1),
    );
}

/// Geometry of a 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
    pub fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds one `[cin,h,w]` image into `[cin*kh*kw, oh*ow]`.
pub fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_range(ow, g.stride, kj, g.pad, g.w);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src =
                        &img[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    let x0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        drow[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (d, s) in drow[lo..hi]
                            .iter_mut()
                            .zip(src[x0..].iter().step_by(g.stride))
                        {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `ox` in `[lo, hi)` read an in-bounds input column.
fn valid_range(ow: usize, stride: usize, kj: usize, pad: usize, w: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj).div_ceil(stride).min(ow);
    // ox * stride + kj - pad <= w - 1
    let hi = if w + pad < kj + 1 {
        0
    } else {
        ((w + pad - kj - 1) / stride + 1).min(ow)
    };
    (lo, hi.max(lo))
}

/// Folds `[cin*kh*kw, oh*ow]` columns back into an image, accumulating.
pub fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_range(ow, g.stride, kj, g.pad, g.w);
                if lo >= hi {
                    continue;
                }
                let x0 = lo * g.stride + kj - g.pad;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w + x0;
                    let srow = &src[oy * ow + lo..oy * ow + hi];
                    for (d, &v) in img[base..].iter_mut().step_by(g.stride).zip(srow) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Batched convolution forward. Returns the output and the per-image column
/// buffers (concatenated) for reuse in backward.
pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> (Vec<T>, Vec<T>) {
    let in_sz = g.cin * g.h * g.w;
    let col_sz = g.col_rows() * g.col_cols();
    let out_sz = g.cout * g.col_cols();
    let mut cols = vec![T::zero(); batch * col_sz];
    let mut out = vec![T::zero(); batch * out_sz];
    par::for_each_chunk_mut(&mut cols, col_sz, |n, c| {
        im2col(g, &x[n * in_sz..(n + 1) * in_sz], c)
    });
    let hw = g.col_cols();
    let cols_ref = &cols;
    par::for_each_chunk_mut(&mut out, out_sz, |n, o| {
        if let Some(b) = bias {
            for (co, row) in o.chunks_exact_mut(hw).enumerate() {
                row.fill(b[co]);
            }
        }
        gemm(
            g.cout,
            g.col_rows(),
            hw,
            weight,
            &cols_ref[n * col_sz..(n + 1) * col_sz],
            o,
        );
    });
    (out, cols)
}

/// Gradients of a batched convolution. Each output is computed only when
/// requested.
pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    cols: &[T],
    weight: &[T],
    dout: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let in_sz = g.cin * g.h * g.w;
    let col_sz = g.col_rows() * g.col_cols();
    let out_sz = g.cout * g.col_cols();
    let hw = g.col_cols();
    let ck = g.col_rows();

    let dx = need.0.then(|| {
        let mut dx = vec![T::zero(); batch * in_sz];
        par::for_each_chunk_mut(&mut dx, in_sz, |n, dimg| {
            let mut dcols = vec![T::zero(); col_sz];
            gemm_atb(
                g.cout,
                ck,
                hw,
                weight,
                &dout[n * out_sz..(n + 1) * out_sz],
                &mut dcols,
            );
            col2im(g, &dcols, dimg);
        });
        dx
    });

    let dw = need.1.then(|| {
        let partial = par::map_indices(batch, |n| {
            let mut dw = vec![T::zero(); g.cout * ck];
            gemm_abt(
                g.cout,
                hw,
                ck,
                &dout[n * out_sz..(n + 1) * out_sz],
                &cols[n * col_sz..(n + 1) * col_sz],
                &mut dw,
            );
            dw
        });
        let mut dw = vec![T::zero(); g.cout * ck];
        for p in partial {
            for (a, b) in dw.iter_mut().zip(p) {
                *a += b;
            }
        }
        dw
    });

    let db = need.2.then(|| {
        let mut db = vec![0f64; g.cout];
        for n in 0..batch {
            for (co, row) in dout[n * out_sz..(n + 1) * out_sz]
                .chunks_exact(hw)
                .enumerate()
            {
                db[co] += row.iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        db.into_iter().map(T::from_f64).collect()
    });

    ConvGrads { dx, dw, db }
}

/// Per-channel mean and biased variance over `(N, spatial)` of an
/// `[N, C, spatial]` buffer.
pub fn channel_stats<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    spatial: usize,
) -> (Vec<f64>, Vec<f64>) {
    let m = (n * spatial) as f64;
    let mut mean = vec![0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let s = &x[(b * c + ch) * spatial..(b * c + ch + 1) * spatial];
            mean[ch] += s.iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let s = &x[(b * c + ch) * spatial..(b * c + ch + 1) * spatial];
            let mu = mean[ch];
            var[ch] += s.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

/// Average pooling with square window `k` and stride `k`.
pub fn avgpool_forward<T: Scalar>(x: &[T], nc: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![T::zero(); nc * oh * ow];
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0f64;
                for dy in 0..k {
                    for dx in 0..k {
                        s += src[(oy * k + dy) * w + ox * k + dx].as_f64();
                    }
                }
                out[(p * oh + oy) * ow + ox] = T::from_f64(s * inv);
            }
        }
    }
    out
}

pub fn avgpool_backward<T: Scalar>(dout: &[T], nc: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = T::from_f64(1.0 / (k * k) as f64);
    let mut dx = vec![T::zero(); nc * h * w];
    for p in 0..nc {
        for y in 0..h {
            for x in 0..w {
                dx[(p * h + y) * w + x] = dout[(p * oh + y / k) * ow + x / k] * inv;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x_forward<T: Scalar>(x: &[T], nc: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); nc * oh * ow];
    for p in 0..nc {
        for y in 0..oh {
            for xx in 0..ow {
                out[(p * oh + y) * ow + xx] = x[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(dout: &[T], nc: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); nc * h * w];
    for p in 0..nc {
        for y in 0..oh {
            for xx in 0..ow {
                dx[(p * h + y / 2) * w + xx / 2] += dout[(p * oh + y) * ow + xx];
            }
        }
    }
    dx
}

/// Row-wise softmax over the last axis.
pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mx = src.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let z: f64 = src.iter().map(|&v| (v - mx).as_f64().exp()).sum();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = T::from_f64((s - mx).as_f64().exp() / z);
        }
    }
    out
}

/// Row-wise log-softmax over the last axis.
pub fn log_softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mx = src.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lz = src
            .iter()
            .map(|&v| (v - mx).as_f64().exp())
            .sum::<f64>()
            .ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = T::from_f64((s - mx).as_f64() - lz);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, &b, &mut c);
        // b^T laid out as [n,k]
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm_abt(m, k, n, &a, &bt, &mut c2);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c3 = vec![0.0; m * n];
        gemm_atb(k, m, n, &at, &b, &mut c3);
        for i in 0..m * n {
            assert!((c[i] - c2[i]).abs() < 1e-12);
            assert!((c[i] - c3[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        for &(stride, pad) in &[(2, 1), (1, 1), (1, 2), (3, 0)] {
            let g = ConvGeom {
                cin: 2,
                h: 5,
                w: 4,
                cout: 1,
                kh: 3,
                kw: 3,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64).sin()).collect();
            let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
                .map(|i| (i as f64 * 1.3).cos())
                .collect();
            let mut cols = vec![0.0; y.len()];
            im2col(&g, &x, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&g, &y, &mut back);
            let l: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let r: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((l - r).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        for &(h, w, k, stride, pad) in &[
            (5, 4, 3, 2, 1),
            (6, 6, 3, 1, 1),
            (7, 5, 1, 2, 0),
            (4, 4, 3, 1, 2),
            (3, 3, 3, 3, 0),
        ] {
            let g = ConvGeom {
                cin: 2,
                h,
                w,
                cout: 3,
                kh: k,
                kw: k,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..2 * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
            let wt: Vec<f64> = (0..3 * 2 * k * k).map(|i| (i as f64 * 0.3).cos()).collect();
            let (out, _) = conv2d_forward(&g, 1, &x, &wt, None);
            let (oh, ow) = (g.out_h(), g.out_w());
            for co in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..2 {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        acc += wt[((co * 2 + ci) * k + ki) * k + kj]
                                            * x[(ci * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        let got = out[(co * oh + oy) * ow + ox];
                        assert!((got - acc).abs() < 1e-12, "{h}x{w} k{k} s{stride} p{pad}");
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = [1.0f32, 2.0, 3.0, -1.0, 0.0, 1000.0];
        let s = softmax_rows(&x, 3);
        assert!((s[..3].iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!((s[3..].iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let ls = log_softmax_rows(&x, 3);
        assert!((ls[0].exp() - s[0]).abs() < 1e-6);
    }
}
