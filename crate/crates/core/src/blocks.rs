//! The two residual units of the encoder branches.
//!
//! * [`DualBlock`]: `ReLU(M + S)` where the main path is
//!   `M = BN(conv3x3(ReLU(BN(conv1x1(x)))))` and the shortcut `S` is a
//!   1x1 convolution with batch norm when the channel count changes, the
//!   input itself otherwise.
//! * [`SingleBlock`]: `ReLU(BN(conv3x3(x)) + x)` with a pure identity skip.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, BatchNormConfig, Conv2d, Ctx, ParamStore};
use crate::rng::SeededRng;
use crate::scalar::Scalar;

fn check_channels<T: Scalar>(ctx: &Ctx<'_, T>, x: Var, expected: usize, op: &'static str) -> Result<()> {
    let (_, c, _, _) = ctx.graph.shape(x)?.nchw_dims(op)?;
    if c != expected {
        return Err(Error::shape(op, format!("input has {c} channels, block expects {expected}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Projection {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct DualBlock {
    pub conv_a: Conv2d,
    pub bn_a: BatchNorm2d,
    pub conv_b: Conv2d,
    pub bn_b: BatchNorm2d,
    /// Present exactly when `in_ch != out_ch`.
    pub shortcut: Option<Projection>,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl DualBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        bn: BatchNormConfig,
    ) -> Result<Self> {
        let conv_a = Conv2d::new(store, rng, &format!("{name}.conv_a"), in_ch, out_ch, 1)?;
        let bn_a = BatchNorm2d::new(store, &format!("{name}.bn_a"), out_ch, bn)?;
        let conv_b = Conv2d::new(store, rng, &format!("{name}.conv_b"), out_ch, out_ch, 3)?;
        let bn_b = BatchNorm2d::new(store, &format!("{name}.bn_b"), out_ch, bn)?;
        let shortcut = if in_ch != out_ch {
            Some(Projection {
                conv: Conv2d::new(store, rng, &format!("{name}.shortcut.conv"), in_ch, out_ch, 1)?,
                bn: BatchNorm2d::new(store, &format!("{name}.shortcut.bn"), out_ch, bn)?,
            })
        } else {
            None
        };
        Ok(DualBlock {
            conv_a,
            bn_a,
            conv_b,
            bn_b,
            shortcut,
            in_ch,
            out_ch,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_channels(ctx, x, self.in_ch, "dual_block")?;
        let m = self.conv_a.forward(ctx, x)?;
        let m = self.bn_a.forward(ctx, m)?;
        let m = ctx.graph.relu(m)?;
        let m = self.conv_b.forward(ctx, m)?;
        let m = self.bn_b.forward(ctx, m)?;
        let s = match &self.shortcut {
            Some(p) => {
                let s = p.conv.forward(ctx, x)?;
                p.bn.forward(ctx, s)?
            }
            None => x,
        };
        let sum = ctx.graph.add(m, s)?;
        ctx.graph.relu(sum)
    }

    pub fn param_count(&self) -> usize {
        let shortcut = self
            .shortcut
            .as_ref()
            .map_or(0, |p| p.conv.param_count() + p.bn.param_count());
        self.conv_a.param_count() + self.bn_a.param_count() + self.conv_b.param_count() + self.bn_b.param_count() + shortcut
    }
}

#[derive(Clone, Debug)]
pub struct SingleBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub channels: usize,
}

impl SingleBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        name: &str,
        channels: usize,
        bn: BatchNormConfig,
    ) -> Result<Self> {
        Ok(SingleBlock {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), channels, channels, 3)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), channels, bn)?,
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        check_channels(ctx, x, self.channels, "single_block")?;
        let f = self.conv.forward(ctx, x)?;
        let f = self.bn.forward(ctx, f)?;
        let sum = ctx.graph.add(f, x)?;
        ctx.graph.relu(sum)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }
}

/// Either residual unit, for uniform parameter accounting.
pub enum Block<'a> {
    Dual(&'a DualBlock),
    Single(&'a SingleBlock),
}

pub fn param_count_block(block: Block<'_>) -> usize {
    match block {
        Block::Dual(b) => b.param_count(),
        Block::Single(b) => b.param_count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::ops::Mode;
    use crate::tensor::{Shape, Tensor};

    /// Independent tally: conv k x k (in -> out) with bias, plus 2 per BN channel.
    fn conv_count(k: usize, cin: usize, cout: usize) -> usize {
        k * k * cin * cout + cout
    }

    fn bn_count(c: usize) -> usize {
        2 * c
    }

    fn zero_params(store: &mut ParamStore<f64>, ids: &[crate::layers::ParamId]) {
        for &id in ids {
            let shape = store.get(id).shape();
            store.set(id, Tensor::zeros(shape)).unwrap();
        }
    }

    fn run<F>(store: &mut ParamStore<f64>, x: &Tensor<f64>, mode: Mode, f: F) -> Result<Tensor<f64>>
    where
        F: FnOnce(&mut Ctx<'_, f64>, Var) -> Result<Var>,
    {
        let mut graph = Graph::new();
        let vars = store.attach(&mut graph, false);
        let xv = graph.constant(x.clone());
        let mut ctx = Ctx {
            graph: &mut graph,
            store,
            params: &vars,
            mode,
        };
        let y = f(&mut ctx, xv)?;
        Ok(graph.value(y)?.clone())
    }

    fn sample_input(c: usize) -> Tensor<f64> {
        let n = 2 * c * 4 * 4;
        let data = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect::<Vec<_>>();
        Tensor::from_slice(&[2, c, 4, 4], &data).unwrap()
    }

    #[test]
    fn single_block_param_count() {
        let mut store = ParamStore::<f32>::new();
        let b = SingleBlock::new(&mut store, &mut SeededRng::new(0), "s", 8, BatchNormConfig::default()).unwrap();
        assert_eq!(conv_count(3, 8, 8) + bn_count(8), 600);
        assert_eq!(param_count_block(Block::Single(&b)), 600);
    }

    #[test]
    fn dual_block_param_counts() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = SeededRng::new(0);
        let same = DualBlock::new(&mut store, &mut rng, "d", 8, 8, BatchNormConfig::default()).unwrap();
        assert!(same.shortcut.is_none());
        let tally = conv_count(1, 8, 8) + bn_count(8) + conv_count(3, 8, 8) + bn_count(8);
        assert_eq!(tally, 688);
        assert_eq!(param_count_block(Block::Dual(&same)), 688);

        let proj = DualBlock::new(&mut store, &mut rng, "p", 3, 8, BatchNormConfig::default()).unwrap();
        assert!(proj.shortcut.is_some());
        let tally = conv_count(1, 3, 8) + bn_count(8) + conv_count(3, 8, 8) + bn_count(8) + conv_count(1, 3, 8) + bn_count(8);
        assert_eq!(tally, 696);
        assert_eq!(param_count_block(Block::Dual(&proj)), 696);
    }

    #[test]
    fn zeroed_single_block_is_relu() {
        let mut store = ParamStore::new();
        let b = SingleBlock::new(&mut store, &mut SeededRng::new(0), "s", 2, BatchNormConfig::default()).unwrap();
        zero_params(&mut store, &[b.conv.weight, b.conv.bias]);
        let x = sample_input(2);
        let y = run(&mut store, &x, Mode::Eval, |ctx, v| b.forward(ctx, v)).unwrap();
        // zero conv output stays exactly zero through identity-statistics BN
        let expected = x.map(|v| v.max(0.0)).unwrap();
        assert_eq!(y, expected);
    }

    #[test]
    fn single_block_bias_trace() {
        let mut store = ParamStore::new();
        let b = SingleBlock::new(&mut store, &mut SeededRng::new(0), "s", 2, BatchNormConfig::default()).unwrap();
        zero_params(&mut store, &[b.conv.weight]);
        store.set(b.conv.bias, Tensor::from_slice(&[2], &[0.5, 2.0]).unwrap()).unwrap();
        let x = Tensor::zeros(Shape::nchw(1, 2, 4, 4).unwrap());
        let y = run(&mut store, &x, Mode::Eval, |ctx, v| b.forward(ctx, v)).unwrap();
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (ch, c) in [0.5, 2.0].into_iter().enumerate() {
            let plane = y.slice_channels(ch, ch + 1).unwrap();
            assert!(plane.data().iter().all(|&v| (v - c * scale).abs() < 1e-12));
        }
    }

    #[test]
    fn zeroed_dual_block_is_relu_of_shortcut() {
        let mut store = ParamStore::new();
        let b = DualBlock::new(&mut store, &mut SeededRng::new(0), "d", 3, 3, BatchNormConfig::default()).unwrap();
        zero_params(&mut store, &[b.conv_a.weight, b.conv_a.bias, b.conv_b.weight, b.conv_b.bias]);
        let x = sample_input(3);
        let y = run(&mut store, &x, Mode::Eval, |ctx, v| b.forward(ctx, v)).unwrap();
        assert_eq!(y, x.map(|v| v.max(0.0)).unwrap());
    }

    #[test]
    fn projection_changes_width() {
        let mut store = ParamStore::new();
        let b = DualBlock::new(&mut store, &mut SeededRng::new(4), "d", 3, 8, BatchNormConfig::default()).unwrap();
        let y = run(&mut store, &sample_input(3), Mode::Train, |ctx, v| b.forward(ctx, v)).unwrap();
        assert_eq!(y.dims(), &[2, 8, 4, 4]);
        assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut store = ParamStore::new();
        let d = DualBlock::new(&mut store, &mut SeededRng::new(0), "d", 3, 8, BatchNormConfig::default()).unwrap();
        let s = SingleBlock::new(&mut store, &mut SeededRng::new(0), "s", 4, BatchNormConfig::default()).unwrap();
        let x = sample_input(2);
        assert!(matches!(run(&mut store, &x, Mode::Eval, |ctx, v| d.forward(ctx, v)), Err(Error::Shape { .. })));
        assert!(matches!(run(&mut store, &x, Mode::Eval, |ctx, v| s.forward(ctx, v)), Err(Error::Shape { .. })));
    }
}
