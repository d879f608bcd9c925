//! The standard gradient suite: every differentiable op, both residual
//! blocks and a full desk-scale network, each checked in `f64` against
//! central differences.

use crate::autodiff::{Graph, Var};
use crate::blocks::{DualBlock, SingleBlock};
use crate::error::Result;
use crate::layers::{BatchNormConfig, Ctx, ParamStore};
use crate::net::{NetConfig, Network};
use crate::ops::{Mode, RunningStats};
use crate::rng::SeededRng;
use crate::tensor::{Shape, Tensor};

use super::{check_gradients, Coords, GradCheckOptions, GradCheckReport};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const NET_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;
const KINK: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error < self.tolerance
    }
}

fn normal(rng: &mut SeededRng, dims: &[usize], scale: f64) -> Tensor<f64> {
    let shape = Shape::new(dims).expect("suite shapes are valid");
    let data = (0..shape.numel()).map(|_| scale * rng.standard_normal()).collect();
    Tensor::new(shape, data).expect("finite samples")
}

fn targets(rng: &mut SeededRng, dims: &[usize]) -> Tensor<f64> {
    let shape = Shape::new(dims).expect("suite shapes are valid");
    let data = (0..shape.numel()).map(|_| rng.uniform(0.0, 1.0)).collect();
    Tensor::new(shape, data).expect("finite samples")
}

fn opts(kinks: bool) -> GradCheckOptions {
    GradCheckOptions {
        eps: EPS,
        coords: Coords::All,
        kink_threshold: kinks.then_some(KINK),
    }
}

/// A layer's trainable tensors become extra leaves after the input.
fn block_case<B>(
    name: &'static str,
    store: ParamStore<f64>,
    block: B,
    x: Tensor<f64>,
    t: Tensor<f64>,
    forward: fn(&B, &mut Ctx<'_, f64>, Var) -> Result<Var>,
) -> Result<SuiteCase> {
    let mut inputs = vec![x];
    inputs.extend(store.trainable_values());
    let report = check_gradients(
        |g, v| {
            let mut store = store.clone();
            let params = store.bind(&v[1..])?;
            let mut ctx = Ctx {
                graph: g,
                store: &mut store,
                params: &params,
                mode: Mode::Train,
            };
            let y = forward(&block, &mut ctx, v[0])?;
            g.bce_with_logits(y, &t)
        },
        &inputs,
        &opts(true),
    )?;
    Ok(SuiteCase {
        name,
        tolerance: OP_TOLERANCE,
        report,
    })
}

/// Runs every case. Inputs are drawn from `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut rng = SeededRng::new(seed);
    let mut cases = Vec::new();
    let mut op = |name, inputs: Vec<Tensor<f64>>, kinks, f: &mut dyn FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>| -> Result<()> {
        let report = check_gradients(f, &inputs, &opts(kinks))?;
        cases.push(SuiteCase {
            name,
            tolerance: OP_TOLERANCE,
            report,
        });
        Ok(())
    };

    let t = targets(&mut rng, &[2, 3, 2, 2]);
    op(
        "add",
        vec![normal(&mut rng, &[2, 3, 2, 2], 1.0), normal(&mut rng, &[2, 3, 2, 2], 1.0)],
        false,
        &mut |g, v| {
            let y = g.add(v[0], v[1])?;
            g.bce_with_logits(y, &t)
        },
    )?;
    op("mean", vec![normal(&mut rng, &[4, 4, 4], 1.0)], false, &mut |g, v| g.mean(v[0]))?;

    let t = targets(&mut rng, &[1, 3, 4, 4]);
    op(
        "conv2d_1x1",
        vec![
            normal(&mut rng, &[1, 2, 4, 4], 1.0),
            normal(&mut rng, &[3, 2, 1, 1], 0.7),
            normal(&mut rng, &[3], 0.1),
        ],
        false,
        &mut |g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            g.bce_with_logits(y, &t)
        },
    )?;
    let t = targets(&mut rng, &[1, 2, 4, 4]);
    op(
        "conv2d_3x3",
        vec![
            normal(&mut rng, &[1, 2, 4, 4], 1.0),
            normal(&mut rng, &[2, 2, 3, 3], 0.4),
            normal(&mut rng, &[2], 0.1),
        ],
        false,
        &mut |g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            g.bce_with_logits(y, &t)
        },
    )?;
    let t = targets(&mut rng, &[1, 2, 4, 4]);
    op(
        "conv_transpose2d",
        vec![
            normal(&mut rng, &[1, 3, 2, 2], 1.0),
            normal(&mut rng, &[3, 2, 2, 2], 0.6),
            normal(&mut rng, &[2], 0.1),
        ],
        false,
        &mut |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], v[2])?;
            g.bce_with_logits(y, &t)
        },
    )?;
    let t = targets(&mut rng, &[2, 3, 3, 3]);
    op(
        "batch_norm_train",
        vec![
            normal(&mut rng, &[2, 3, 3, 3], 1.5),
            normal(&mut rng, &[3], 1.0),
            normal(&mut rng, &[3], 0.5),
        ],
        false,
        &mut |g, v| {
            let (mut mean, mut var) = (Tensor::zeros(Shape::new(&[3])?), Tensor::ones(Shape::new(&[3])?));
            let stats = RunningStats {
                mean: &mut mean,
                var: &mut var,
                momentum: 0.1,
                eps: 1e-5,
            };
            let y = g.batch_norm(v[0], v[1], v[2], stats, Mode::Train)?;
            g.bce_with_logits(y, &t)
        },
    )?;
    let t = targets(&mut rng, &[2, 2, 4, 4]);
    op("relu", vec![normal(&mut rng, &[2, 2, 4, 4], 1.0)], true, &mut |g, v| {
        let y = g.relu(v[0])?;
        g.bce_with_logits(y, &t)
    })?;
    op("sigmoid", vec![normal(&mut rng, &[2, 2, 4, 4], 2.0)], false, &mut |g, v| {
        let y = g.sigmoid(v[0])?;
        g.bce_with_logits(y, &t)
    })?;
    let t = targets(&mut rng, &[1, 2, 2, 2]);
    op("max_pool2", vec![normal(&mut rng, &[1, 2, 4, 4], 1.0)], true, &mut |g, v| {
        let y = g.max_pool2(v[0])?;
        g.bce_with_logits(y, &t)
    })?;
    let t = targets(&mut rng, &[1, 3, 2, 2]);
    op(
        "concat_channels",
        vec![normal(&mut rng, &[1, 1, 2, 2], 1.0), normal(&mut rng, &[1, 2, 2, 2], 1.0)],
        false,
        &mut |g, v| {
            let y = g.concat_channels(v[0], v[1])?;
            g.bce_with_logits(y, &t)
        },
    )?;
    let t = targets(&mut rng, &[2, 2, 4, 4]);
    op("bce_with_logits", vec![normal(&mut rng, &[2, 2, 4, 4], 3.0)], false, &mut |g, v| {
        g.bce_with_logits(v[0], &t)
    })?;

    let bn = BatchNormConfig::default();
    for (name, cin) in [("dual_block_projection", 1), ("dual_block_identity", 2)] {
        let mut store = ParamStore::new();
        let block = DualBlock::new(&mut store, &mut rng, "b", cin, 2, bn)?;
        let x = normal(&mut rng, &[2, cin, 4, 4], 1.0);
        let t = targets(&mut rng, &[2, 2, 4, 4]);
        cases.push(block_case(name, store, block, x, t, DualBlock::forward)?);
    }
    let mut store = ParamStore::new();
    let block = SingleBlock::new(&mut store, &mut rng, "b", 2, bn)?;
    let x = normal(&mut rng, &[2, 2, 4, 4], 1.0);
    let t = targets(&mut rng, &[2, 2, 4, 4]);
    cases.push(block_case("single_block", store, block, x, t, SingleBlock::forward)?);

    cases.push(desk_network_case(&mut rng, seed)?);
    Ok(cases)
}

/// BCE through the full desk network with respect to a 1% sample of every
/// parameter tensor (at least one coordinate each) and of the input.
fn desk_network_case(rng: &mut SeededRng, seed: u64) -> Result<SuiteCase> {
    let net = Network::<f64>::build(&NetConfig::desk(), seed)?;
    let x = normal(rng, &[2, 3, 8, 8], 1.0);
    let t = targets(rng, &[2, 1, 8, 8]).map(|v| if v < 0.3 { 1.0 } else { 0.0 })?;
    let mut inputs = vec![x];
    inputs.extend(net.store().trainable_values());
    let opts = GradCheckOptions {
        eps: EPS,
        coords: Coords::Sample {
            fraction: 0.01,
            min: 1,
            seed,
        },
        kink_threshold: Some(KINK),
    };
    let report = check_gradients(
        |g, v| {
            let mut net = net.clone();
            let params = net.store().bind(&v[1..])?;
            let y = net.forward(g, v[0], &params, Mode::Train)?;
            g.bce_with_logits(y, &t)
        },
        &inputs,
        &opts,
    )?;
    Ok(SuiteCase {
        name: "desk_network",
        tolerance: NET_TOLERANCE,
        report,
    })
}
