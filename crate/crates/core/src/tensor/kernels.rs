//! Raw loops behind the tape operations. Everything here works on flat
//! row-major slices; shape validation happens in the callers.

use super::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, c, h, w], &[o, ci, kh, kw]) = (input, kernel) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected NCHW input and OIKK kernel, got {input:?} and {kernel:?}"),
            ));
        };
        if ci != c {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {ci} input channels, input has {c}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        if hp < kh || wp < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {hp}x{wp}"),
            ));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            ho: (hp - kh) / stride + 1,
            wo: (wp - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.ho, self.wo]
    }
}

/// Output columns `lo..hi` whose stride-1 input column `ox + kj - pad` lies
/// inside the image.
fn valid_span(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).min(g.wo);
    let hi = (g.w + g.pad).saturating_sub(kj).min(g.wo).max(lo);
    (lo, hi)
}

/// Unfolds one C×H×W image into a (C·Kh·Kw)×(Ho·Wo) patch matrix.
fn im2col<T: Real>(img: &[T], g: &ConvGeom, col: &mut [T]) {
    let hw = g.positions();
    for ch in 0..g.c {
        let plane = &img[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let out = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(g, kj);
                        seg[..lo].fill(T::zero());
                        seg[hi..].fill(T::zero());
                        if lo < hi {
                            let start = lo + kj - g.pad;
                            seg[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, dst) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *dst = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Real>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    let hw = g.positions();
    for ch in 0..g.c {
        let plane = &mut img[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &col[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(g, kj);
                        if lo < hi {
                            let start = lo + kj - g.pad;
                            let row_src = &src[oy * g.wo + lo..oy * g.wo + hi];
                            dst[start..start + hi - lo]
                                .iter_mut()
                                .zip(row_src)
                                .for_each(|(d, &v)| *d += v);
                        }
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let (patch, hw) = (g.patch(), g.positions());
    let img_len = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.o * hw];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * hw]
    };
    for b in 0..g.n {
        let img = &x[b * img_len..(b + 1) * img_len];
        let cols: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut col);
            &col
        };
        let dst = &mut out[b * g.o * hw..(b + 1) * g.o * hw];
        T::gemm(g.o, patch, hw, T::one(), kernel, patch, 1, cols, hw, 1, T::zero(), dst, hw, 1);
        if let Some(bias) = bias {
            for (oc, &bv) in bias.iter().enumerate() {
                dst[oc * hw..(oc + 1) * hw].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_dx, need_dk, need_db) = need;
    let (patch, hw) = (g.patch(), g.positions());
    let img_len = g.c * g.h * g.w;
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * img_len]);
    let mut dk = need_dk.then(|| vec![T::zero(); g.o * patch]);
    let mut db = need_db.then(|| vec![T::zero(); g.o]);
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * hw }];
    let mut dcol = vec![T::zero(); if need_dx { patch * hw } else { 0 }];

    for b in 0..g.n {
        let dyb = &dy[b * g.o * hw..(b + 1) * g.o * hw];
        if let Some(db) = db.as_mut() {
            for (oc, acc) in db.iter_mut().enumerate() {
                *acc += dyb[oc * hw..(oc + 1) * hw].iter().copied().sum::<T>();
            }
        }
        if let Some(dk) = dk.as_mut() {
            let img = &x[b * img_len..(b + 1) * img_len];
            let cols: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(img, g, &mut col);
                &col
            };
            // dK += dY · colsᵀ
            T::gemm(g.o, hw, patch, T::one(), dyb, hw, 1, cols, 1, hw, T::one(), dk, patch, 1);
        }
        if let Some(dx) = dx.as_mut() {
            let dimg = &mut dx[b * img_len..(b + 1) * img_len];
            if g.is_pointwise() {
                // dX = Kᵀ · dY directly into the image buffer.
                T::gemm(g.c, g.o, hw, T::one(), kernel, 1, patch, dyb, hw, 1, T::zero(), dimg, hw, 1);
            } else {
                T::gemm(patch, g.o, hw, T::one(), kernel, 1, patch, dyb, hw, 1, T::zero(), &mut dcol, hw, 1);
                col2im(&dcol, g, dimg);
            }
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], k: usize, stride: usize) -> Result<Self> {
        let &[n, c, h, w] = input else {
            return Err(Error::shape("avg_pool2d", format!("expected NCHW, got {input:?}")));
        };
        if k == 0 || stride == 0 {
            return Err(Error::shape("avg_pool2d", "window and stride must be positive"));
        }
        if h < k || w < k {
            return Err(Error::shape(
                "avg_pool2d",
                format!("window {k} larger than input {h}x{w}"),
            ));
        }
        Ok(Self {
            planes: n * c,
            h,
            w,
            k,
            stride,
            ho: (h - k) / stride + 1,
            wo: (w - k) / stride + 1,
        })
    }
}

pub(crate) fn avg_pool_forward<T: Real>(x: &[T], g: &PoolGeom) -> Vec<T> {
    let scale = T::one() / T::from_usize(g.k * g.k).unwrap();
    let mut out = Vec::with_capacity(g.planes * g.ho * g.wo);
    for p in 0..g.planes {
        let plane = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut acc = T::zero();
                for dy in 0..g.k {
                    let row = (oy * g.stride + dy) * g.w + ox * g.stride;
                    for v in &plane[row..row + g.k] {
                        acc += *v;
                    }
                }
                out.push(acc * scale);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Real>(dy: &[T], g: &PoolGeom) -> Vec<T> {
    let scale = T::one() / T::from_usize(g.k * g.k).unwrap();
    let mut dx = vec![T::zero(); g.planes * g.h * g.w];
    for p in 0..g.planes {
        let plane = &mut dx[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let gv = dy[(p * g.ho + oy) * g.wo + ox] * scale;
                for ky in 0..g.k {
                    let row = (oy * g.stride + ky) * g.w + ox * g.stride;
                    for v in &mut plane[row..row + g.k] {
                        *v += gv;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct quadruple loop, independent of the im2col path.
    fn naive_conv(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.o * g.ho * g.wo];
        for b in 0..g.n {
            for oc in 0..g.o {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = 0.0;
                        for ic in 0..g.c {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    let xv = x[((b * g.c + ic) * g.h + iy as usize) * g.w + ix as usize];
                                    let kv = k[((oc * g.c + ic) * g.kh + ki) * g.kw + kj];
                                    acc += xv * kv;
                                }
                            }
                        }
                        out[((b * g.o + oc) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loop() {
        for &(stride, pad, kh) in &[(1, 1, 3), (2, 0, 3), (1, 0, 2), (2, 1, 1), (1, 0, 1), (1, 3, 2)] {
            let g = ConvGeom::new(&[2, 3, 7, 6], &[4, 3, kh, kh], stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * 3 * 7 * 6).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let k: Vec<f64> = (0..4 * 3 * kh * kh).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
            assert_eq!(conv2d_forward(&x, &k, None, &g), naive_conv(&x, &k, &g));
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        for &(stride, pad, k) in &[(2, 1, 3), (1, 1, 3), (1, 2, 3), (1, 0, 2), (1, 3, 2)] {
            let g = ConvGeom::new(&[1, 2, 5, 4], &[1, 2, k, k], stride, pad).unwrap();
            let x: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
            let y: Vec<f64> = (0..g.patch() * g.positions()).map(|i| (i as f64).cos()).collect();
            let mut col = vec![0.0; y.len()];
            im2col(&x, &g, &mut col);
            let mut back = vec![0.0; x.len()];
            col2im(&y, &g, &mut back);
            let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "stride {stride} pad {pad} k {k}");
        }
    }
}
