//! Spatial resizing of `(C, H, W)` tensors.
//!
//! Sampling is corner-aligned: output index `i` maps to source coordinate
//! `i * (in - 1) / (out - 1)`, so the corner pixels of input and output
//! coincide.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

fn chw<T: Scalar>(img: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *img.dims() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(op, format!("expected (C, H, W), got {}", img.shape()))),
    }
}

fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        0.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

pub fn resize_bilinear<T: Scalar>(img: &Tensor<T>, out_hw: (usize, usize)) -> Result<Tensor<T>> {
    let (c, h, w) = chw(img, "resize_bilinear")?;
    let (oh, ow) = out_hw;
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidArgument(format!("resize target {oh}x{ow}")));
    }
    if (oh, ow) == (h, w) {
        return Ok(img.clone());
    }
    // Per-axis (lower index, upper index, upper weight).
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let s = source_coord(i, n_in, n_out);
                let lo = (s.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let src = img.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let at = |y: usize, x: usize| plane[y * w + x].to_f64_lossy();
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(T::from_f64_lossy(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Tensor::new(Shape::new(&[c, oh, ow])?, out)
}

/// Nearest-neighbour resize followed by re-binarization at 0.5.
pub fn resize_mask<T: Scalar>(mask: &Tensor<T>, out_hw: (usize, usize)) -> Result<Tensor<T>> {
    let (c, h, w) = chw(mask, "resize_mask")?;
    let (oh, ow) = out_hw;
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidArgument(format!("resize target {oh}x{ow}")));
    }
    let half = T::from_f64_lossy(0.5);
    let nearest = |i, n_in, n_out| (source_coord(i, n_in, n_out).round() as usize).min(n_in - 1);
    let src = mask.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            let sy = nearest(y, h, oh);
            for x in 0..ow {
                let v = src[(ch * h + sy) * w + nearest(x, w, ow)];
                out.push(if v >= half { T::one() } else { T::zero() });
            }
        }
    }
    Tensor::new(Shape::new(&[c, oh, ow])?, out)
}
