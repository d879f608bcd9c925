use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

use super::Mode;

/// Running statistics and hyper-parameters of one batch-norm layer.
pub struct RunningStats<'a, T> {
    pub mean: &'a mut Tensor<T>,
    pub var: &'a mut Tensor<T>,
    /// Weight of the current batch in the running update.
    pub momentum: f64,
    pub eps: f64,
}

/// Per-channel sums over (N, H, W).
fn channel_sums<T: Scalar>(data: &[T], n: usize, c: usize, plane: usize, f: impl Fn(usize, T) -> T) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            let start = (b * c + ch) * plane;
            *acc += data[start..start + plane].iter().map(|&v| f(ch, v)).sum::<T>();
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    /// Batch normalization over (N, H, W) per channel.
    ///
    /// In [`Mode::Train`] the batch statistics normalize the input and are
    /// blended into `stats` as `running = (1 - momentum) * running + momentum * batch`
    /// (biased batch variance). In [`Mode::Eval`] only the running
    /// statistics are used and `stats` is left untouched.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: RunningStats<'_, T>, mode: Mode) -> Result<Var> {
        const OP: &str = "batch_norm";
        let xv = self.value(x)?.clone();
        let gv = self.value(gamma)?.clone();
        let bv = self.value(beta)?.clone();
        let (n, c, h, w) = xv.shape().nchw_dims(OP)?;
        for (name, t) in [("gamma", &gv), ("beta", &bv), ("running mean", &*stats.mean), ("running var", &*stats.var)] {
            if t.dims() != [c] {
                return Err(Error::shape(OP, format!("{name} shape {} for {c} channels", t.shape())));
            }
        }
        if !(stats.eps > 0.0) || !(0.0..=1.0).contains(&stats.momentum) {
            return Err(Error::InvalidArgument(format!(
                "batch norm eps {} / momentum {}",
                stats.eps, stats.momentum
            )));
        }
        let plane = h * w;
        let count = T::from_usize(n * plane).unwrap();
        let eps = T::from_f64_lossy(stats.eps);

        let (mean, var) = match mode {
            Mode::Train => {
                let mean: Vec<T> = channel_sums(xv.data(), n, c, plane, |_, v| v).into_iter().map(|s| s / count).collect();
                let var: Vec<T> = channel_sums(xv.data(), n, c, plane, |ch, v| (v - mean[ch]) * (v - mean[ch]))
                    .into_iter()
                    .map(|s| s / count)
                    .collect();
                let m = T::from_f64_lossy(stats.momentum);
                let keep = T::one() - m;
                let blend = |running: &Tensor<T>, batch: &[T]| {
                    let data = running.data().iter().zip(batch).map(|(&r, &b)| keep * r + m * b).collect();
                    Tensor::from_op(OP, running.shape(), data)
                };
                *stats.mean = blend(stats.mean, &mean)?;
                *stats.var = blend(stats.var, &var)?;
                (mean, var)
            }
            Mode::Eval => (stats.mean.to_vec(), stats.var.to_vec()),
        };
        if var.iter().any(|&v| v < T::zero()) {
            return Err(Error::InvalidArgument("negative running variance".into()));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut xhat = vec![T::zero(); xv.numel()];
        let mut out = vec![T::zero(); xv.numel()];
        for b in 0..n {
            for ch in 0..c {
                let start = (b * c + ch) * plane;
                let (g, be, mu, s) = (gv.data()[ch], bv.data()[ch], mean[ch], inv_std[ch]);
                for i in start..start + plane {
                    let xh = (xv.data()[i] - mu) * s;
                    xhat[i] = xh;
                    out[i] = g * xh + be;
                }
            }
        }
        let shape = xv.shape();
        let value = Tensor::from_op(OP, shape, out)?;

        self.record(
            value,
            &[x, gamma, beta],
            Box::new(move |g, needs| {
                let g = g.data();
                let sum_g = channel_sums(g, n, c, plane, |_, v| v);
                let mut i = 0;
                let mut sum_gx = vec![T::zero(); c];
                for _ in 0..n {
                    for acc in sum_gx.iter_mut() {
                        for _ in 0..plane {
                            *acc += g[i] * xhat[i];
                            i += 1;
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let start = (b * c + ch) * plane;
                            let scale = gv.data()[ch] * inv_std[ch];
                            match mode {
                                Mode::Train => {
                                    let mg = sum_g[ch] / count;
                                    let mgx = sum_gx[ch] / count;
                                    for i in start..start + plane {
                                        dx[i] = scale * (g[i] - mg - xhat[i] * mgx);
                                    }
                                }
                                Mode::Eval => {
                                    for i in start..start + plane {
                                        dx[i] = scale * g[i];
                                    }
                                }
                            }
                        }
                    }
                    Tensor::from_vec_unchecked(shape, dx)
                });
                let channel = Shape::new(&[c])?;
                Ok(vec![
                    dx,
                    needs[1].then(|| Tensor::from_vec_unchecked(channel, sum_gx.clone())),
                    needs[2].then(|| Tensor::from_vec_unchecked(channel, sum_g.clone())),
                ])
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bn(x: Tensor<f64>, mean: &mut Tensor<f64>, var: &mut Tensor<f64>, mode: Mode) -> Tensor<f64> {
        let c = x.dims()[1];
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::ones(Shape::new(&[c]).unwrap()));
        let beta = g.constant(Tensor::zeros(Shape::new(&[c]).unwrap()));
        let stats = RunningStats {
            mean,
            var,
            momentum: 0.1,
            eps: 1e-5,
        };
        let y = g.batch_norm(xv, gamma, beta, stats, mode).unwrap();
        g.value(y).unwrap().clone()
    }

    fn fresh(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        let s = Shape::new(&[c]).unwrap();
        (Tensor::zeros(s), Tensor::ones(s))
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let (mut m, mut v) = fresh(1);
        let y = bn(Tensor::full(Shape::nchw(2, 1, 2, 2).unwrap(), 3.0).unwrap(), &mut m, &mut v, Mode::Train);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_values_normalize_to_plus_minus_one() {
        let (mut m, mut v) = fresh(1);
        let y = bn(Tensor::from_slice(&[2, 1, 1, 1], &[0.0, 2.0]).unwrap(), &mut m, &mut v, Mode::Train);
        // mean 1, biased var 1: (x - 1) / sqrt(1 + 1e-5)
        let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expected).abs() < 1e-12);
        assert!((y.data()[1] - expected).abs() < 1e-12);
        assert!((expected - 0.999995).abs() < 1e-6);
        // running stats moved 10% toward the batch statistics
        assert!((m.data()[0] - 0.1).abs() < 1e-12);
        assert!((v.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eval_with_identity_statistics_is_near_identity() {
        let (mut m, mut v) = fresh(2);
        let x = Tensor::from_slice(&[1, 2, 1, 2], &[0.3, -1.2, 4.0, 0.0]).unwrap();
        let y = bn(x.clone(), &mut m, &mut v, Mode::Eval);
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= a.abs() * 1e-5);
        }
        assert_eq!(m.data(), &[0.0, 0.0]);
        assert_eq!(v.data(), &[1.0, 1.0]);
    }

    #[test]
    fn channel_mismatch() {
        let (mut m, mut v) = fresh(3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros(Shape::nchw(1, 2, 2, 2).unwrap()));
        let gamma = g.constant(Tensor::ones(Shape::new(&[3]).unwrap()));
        let beta = g.constant(Tensor::zeros(Shape::new(&[3]).unwrap()));
        let stats = RunningStats {
            mean: &mut m,
            var: &mut v,
            momentum: 0.1,
            eps: 1e-5,
        };
        assert!(matches!(g.batch_norm(x, gamma, beta, stats, Mode::Train), Err(Error::Shape { .. })));
    }
}
