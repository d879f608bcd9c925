use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Numerically stable logistic function.
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    /// `max(x, 0)`; the subgradient at 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x)?.clone();
        let value = xv.map(|v| v.max(T::zero()))?;
        self.record(
            value,
            &[x],
            Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                Ok(vec![Some(Tensor::from_vec_unchecked(xv.shape(), data))])
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x)?.map(sigmoid_scalar)?;
        let y = value.clone();
        self.record(
            value,
            &[x],
            Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                Ok(vec![Some(Tensor::from_vec_unchecked(y.shape(), data))])
            }),
        )
    }

    /// 2x2 max pooling with stride 2. Ties route the gradient to the first
    /// maximum in row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "max_pool2";
        let xv = self.value(x)?;
        let in_shape = xv.shape();
        let (n, c, h, w) = in_shape.nchw_dims(OP)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(OP, format!("spatial size {h}x{w} is not even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let data = xv.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let top = base + 2 * y * w + 2 * xx;
                    let mut best = top;
                    for idx in [top + 1, top + w, top + w + 1] {
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_op(OP, Shape::nchw(n, c, oh, ow)?, out)?;
        self.record(
            value,
            &[x],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); in_shape.numel()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx[src] += gv;
                }
                Ok(vec![Some(Tensor::from_vec_unchecked(in_shape, dx))])
            }),
        )
    }

    /// Stacks `a` and `b` along the channel axis, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let av = self.value(a)?;
        let bv = self.value(b)?;
        let (n, ca, h, w) = av.shape().nchw_dims(OP)?;
        let (nb, cb, hb, wb) = bv.shape().nchw_dims(OP)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(OP, format!("{} vs {}", av.shape(), bv.shape())));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for item in 0..n {
            out.extend_from_slice(&av.data()[item * ca * plane..(item + 1) * ca * plane]);
            out.extend_from_slice(&bv.data()[item * cb * plane..(item + 1) * cb * plane]);
        }
        let value = Tensor::from_vec_unchecked(Shape::nchw(n, ca + cb, h, w)?, out);
        self.record(
            value,
            &[a, b],
            Box::new(move |g, needs| {
                let left = needs[0].then(|| g.slice_channels(0, ca)).transpose()?;
                let right = needs[1].then(|| g.slice_channels(ca, ca + cb)).transpose()?;
                Ok(vec![left, right])
            }),
        )
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`,
    /// computed as `max(z, 0) - z t + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        const OP: &str = "bce_with_logits";
        let zv = self.value(logits)?.clone();
        if zv.shape() != targets.shape() {
            return Err(Error::shape(OP, format!("logits {} vs targets {}", zv.shape(), targets.shape())));
        }
        if targets.data().iter().any(|&t| t < T::zero() || t > T::one()) {
            return Err(Error::InvalidArgument("targets must lie in [0, 1]".into()));
        }
        let count = T::from_usize(zv.numel()).unwrap();
        let total: T = zv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::from_op(OP, Shape::scalar(), vec![total / count])?;
        let targets = targets.clone();
        self.record(
            value,
            &[logits],
            Box::new(move |g, _| {
                let scale = g.data()[0] / count;
                let data = zv
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&z, &t)| (sigmoid_scalar(z) - t) * scale)
                    .collect();
                Ok(vec![Some(Tensor::from_vec_unchecked(zv.shape(), data))])
            }),
        )
    }
}
