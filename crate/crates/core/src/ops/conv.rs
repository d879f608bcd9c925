//! Stride-1 "same" convolution and the stride-2 2x2 transposed convolution,
//! both lowered onto GEMM.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{MatMut, MatRef, Scalar};
use crate::tensor::{Shape, Tensor};

/// Unfolds one `(C, H, W)` image into a `(C*k*k, H*W)` patch matrix with
/// zero padding `k / 2`.
fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = k / 2;
    let plane = h * w;
    for ch in 0..c {
        let src = &img[ch * plane..(ch + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                // output column x reads input column x + kj - pad
                let lo = pad.saturating_sub(kj);
                let hi = (w + pad).saturating_sub(kj).min(w);
                for y in 0..h {
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    let sy = y + ki;
                    if sy < pad || sy - pad >= h {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let in_row = &src[(sy - pad) * w..(sy - pad + 1) * w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if lo < hi {
                        out_row[lo..hi].copy_from_slice(&in_row[lo + kj - pad..hi + kj - pad]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back onto the image.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, img: &mut [T]) {
    let pad = k / 2;
    let plane = h * w;
    for ch in 0..c {
        let dst = &mut img[ch * plane..(ch + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                let lo = pad.saturating_sub(kj);
                let hi = (w + pad).saturating_sub(kj).min(w);
                if lo >= hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y + ki;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let in_row = &mut dst[(sy - pad) * w..(sy - pad + 1) * w];
                    let g_row = &src[y * w..(y + 1) * w];
                    for (d, &g) in in_row[lo + kj - pad..hi + kj - pad].iter_mut().zip(&g_row[lo..hi]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

fn check_bias<T: Scalar>(op: &'static str, bias: &Tensor<T>, out_ch: usize) -> Result<()> {
    if bias.dims() != [out_ch] {
        return Err(Error::shape(op, format!("bias shape {} for {out_ch} output channels", bias.shape())));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    /// 2-D convolution, stride 1, zero "same" padding, square kernel of size
    /// 1 or 3. `weight` is `(out, in, k, k)`, `bias` is `(out)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "conv2d";
        let xv = self.value(x)?.clone();
        let wv = self.value(weight)?.clone();
        let bv = self.value(bias)?.clone();
        let (n, c, h, w) = xv.shape().nchw_dims(OP)?;
        let (o, wc, kh, kw) = wv.shape().nchw_dims(OP)?;
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::InvalidArgument(format!("unsupported conv kernel {kh}x{kw}")));
        }
        if wc != c {
            return Err(Error::shape(OP, format!("input has {c} channels, weight expects {wc}")));
        }
        check_bias(OP, &bv, o)?;
        let k = kh;
        let plane = h * w;
        let ckk = c * k * k;
        let out_shape = Shape::nchw(n, o, h, w)?;

        let mut out = vec![T::zero(); n * o * plane];
        let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * plane] };
        for b in 0..n {
            let img = &xv.data()[b * c * plane..(b + 1) * c * plane];
            let dst = &mut out[b * o * plane..(b + 1) * o * plane];
            for (oc, row) in dst.chunks_exact_mut(plane).enumerate() {
                row.fill(bv.data()[oc]);
            }
            let patches: &[T] = if k == 1 {
                img
            } else {
                im2col(img, c, h, w, k, &mut col);
                &col
            };
            T::gemm(
                o,
                ckk,
                plane,
                T::one(),
                MatRef::row_major(wv.data(), ckk),
                MatRef::row_major(patches, plane),
                T::one(),
                MatMut::row_major(dst, plane),
            );
        }
        let value = Tensor::from_op(OP, out_shape, out)?;

        self.record(
            value,
            &[x, weight, bias],
            Box::new(move |g, needs| {
                let g = g.data();
                let mut dx = needs[0].then(|| vec![T::zero(); n * c * plane]);
                let mut dw = needs[1].then(|| vec![T::zero(); o * ckk]);
                let mut col = vec![T::zero(); if k == 1 && dw.is_some() { 0 } else { ckk * plane }];
                for b in 0..n {
                    let gb = &g[b * o * plane..(b + 1) * o * plane];
                    if let Some(dw) = dw.as_mut() {
                        let img = &xv.data()[b * c * plane..(b + 1) * c * plane];
                        let patches: &[T] = if k == 1 {
                            img
                        } else {
                            im2col(img, c, h, w, k, &mut col);
                            &col
                        };
                        T::gemm(
                            o,
                            plane,
                            ckk,
                            T::one(),
                            MatRef::row_major(gb, plane),
                            MatRef::transposed(patches, plane),
                            T::one(),
                            MatMut::row_major(dw, ckk),
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dimg = &mut dx[b * c * plane..(b + 1) * c * plane];
                        if k == 1 {
                            T::gemm(
                                ckk,
                                o,
                                plane,
                                T::one(),
                                MatRef::transposed(wv.data(), ckk),
                                MatRef::row_major(gb, plane),
                                T::zero(),
                                MatMut::row_major(dimg, plane),
                            );
                        } else {
                            T::gemm(
                                ckk,
                                o,
                                plane,
                                T::one(),
                                MatRef::transposed(wv.data(), ckk),
                                MatRef::row_major(gb, plane),
                                T::zero(),
                                MatMut::row_major(&mut col, plane),
                            );
                            col2im(&col, c, h, w, k, dimg);
                        }
                    }
                }
                let db = needs[2].then(|| {
                    let mut db = vec![T::zero(); o];
                    for b in 0..n {
                        for (oc, acc) in db.iter_mut().enumerate() {
                            let start = (b * o + oc) * plane;
                            *acc += g[start..start + plane].iter().copied().sum::<T>();
                        }
                    }
                    db
                });
                Ok(vec![
                    dx.map(|d| Tensor::from_vec_unchecked(Shape::nchw(n, c, h, w).unwrap(), d)),
                    dw.map(|d| Tensor::from_vec_unchecked(Shape::nchw(o, c, k, k).unwrap(), d)),
                    db.map(|d| Tensor::from_vec_unchecked(Shape::new(&[o]).unwrap(), d)),
                ])
            }),
        )
    }

    /// Transposed convolution with a 2x2 kernel and stride 2, doubling H and W.
    ///
    /// `weight` is laid out `(in, out, 2, 2)`, so the same array read as a
    /// `(out', in', 2, 2)` kernel with `out' = in` defines the stride-2
    /// convolution this op is the adjoint of.
    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let xv = self.value(x)?.clone();
        let wv = self.value(weight)?.clone();
        let bv = self.value(bias)?.clone();
        let (n, c, h, w) = xv.shape().nchw_dims(OP)?;
        let (wc, o, kh, kw) = wv.shape().nchw_dims(OP)?;
        if (kh, kw) != (2, 2) {
            return Err(Error::InvalidArgument(format!("transposed conv needs a 2x2 kernel, got {kh}x{kw}")));
        }
        if wc != c {
            return Err(Error::shape(OP, format!("input has {c} channels, weight expects {wc}")));
        }
        check_bias(OP, &bv, o)?;
        let plane = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        let taps = o * 4;

        let mut out = vec![T::zero(); n * o * oh * ow];
        let mut cols = vec![T::zero(); taps * plane];
        for b in 0..n {
            let img = &xv.data()[b * c * plane..(b + 1) * c * plane];
            // cols[(oc, i, j), p] = sum_c w[c, oc, i, j] * x[c, p]
            T::gemm(
                taps,
                c,
                plane,
                T::one(),
                MatRef::transposed(wv.data(), taps),
                MatRef::row_major(img, plane),
                T::zero(),
                MatMut::row_major(&mut cols, plane),
            );
            let dst = &mut out[b * o * oh * ow..(b + 1) * o * oh * ow];
            for oc in 0..o {
                let bias = bv.data()[oc];
                for i in 0..2 {
                    for j in 0..2 {
                        let src = &cols[(oc * 4 + i * 2 + j) * plane..][..plane];
                        for y in 0..h {
                            let out_row = &mut dst[(oc * oh + 2 * y + i) * ow..][..ow];
                            for (xx, &v) in src[y * w..(y + 1) * w].iter().enumerate() {
                                out_row[2 * xx + j] = v + bias;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_op(OP, Shape::nchw(n, o, oh, ow)?, out)?;

        self.record(
            value,
            &[x, weight, bias],
            Box::new(move |g, needs| {
                let g = g.data();
                let mut dx = needs[0].then(|| vec![T::zero(); n * c * plane]);
                let mut dw = needs[1].then(|| vec![T::zero(); c * taps]);
                let mut db = needs[2].then(|| vec![T::zero(); o]);
                let mut gcols = vec![T::zero(); taps * plane];
                for b in 0..n {
                    let gb = &g[b * o * oh * ow..(b + 1) * o * oh * ow];
                    for oc in 0..o {
                        for i in 0..2 {
                            for j in 0..2 {
                                let dst = &mut gcols[(oc * 4 + i * 2 + j) * plane..][..plane];
                                for y in 0..h {
                                    let g_row = &gb[(oc * oh + 2 * y + i) * ow..][..ow];
                                    for (xx, d) in dst[y * w..(y + 1) * w].iter_mut().enumerate() {
                                        *d = g_row[2 * xx + j];
                                    }
                                }
                            }
                        }
                        if let Some(db) = db.as_mut() {
                            db[oc] += gb[oc * oh * ow..(oc + 1) * oh * ow].iter().copied().sum::<T>();
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        T::gemm(
                            c,
                            taps,
                            plane,
                            T::one(),
                            MatRef::row_major(wv.data(), taps),
                            MatRef::row_major(&gcols, plane),
                            T::zero(),
                            MatMut::row_major(&mut dx[b * c * plane..(b + 1) * c * plane], plane),
                        );
                    }
                    if let Some(dw) = dw.as_mut() {
                        let img = &xv.data()[b * c * plane..(b + 1) * c * plane];
                        T::gemm(
                            c,
                            plane,
                            taps,
                            T::one(),
                            MatRef::row_major(img, plane),
                            MatRef::transposed(&gcols, plane),
                            T::one(),
                            MatMut::row_major(dw, taps),
                        );
                    }
                }
                Ok(vec![
                    dx.map(|d| Tensor::from_vec_unchecked(Shape::nchw(n, c, h, w).unwrap(), d)),
                    dw.map(|d| Tensor::from_vec_unchecked(Shape::nchw(c, o, 2, 2).unwrap(), d)),
                    db.map(|d| Tensor::from_vec_unchecked(Shape::new(&[o]).unwrap(), d)),
                ])
            }),
        )
    }
}
