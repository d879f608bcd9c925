//! Named parameter storage and the parameterized layers built on top of the
//! graph ops.

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::ops::{Mode, RunningStats};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State carried alongside the weights (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Ordered collection of every named tensor of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    /// Replaces a value; the shape must stay the same.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::ParamMismatch {
                name: entry.name.clone(),
                expected: entry.value.shape().to_string(),
                found: value.shape().to_string(),
            });
        }
        entry.value = value;
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(i, _)| ParamId(i))
    }

    pub fn trainable_values(&self) -> Vec<Tensor<T>> {
        self.trainable_ids().map(|id| self.get(id).clone()).collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Registers every trainable tensor on `graph`, as gradient-tracking
    /// leaves when `track` is set, as constants otherwise.
    pub fn attach(&self, graph: &mut Graph<T>, track: bool) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|e| match e.kind {
                ParamKind::Trainable if track => Some(graph.leaf(e.value.clone())),
                ParamKind::Trainable => Some(graph.constant(e.value.clone())),
                ParamKind::Buffer => None,
            })
            .collect();
        ParamVars { vars }
    }

    /// Uses caller-provided vars, one per trainable tensor in store order.
    pub fn bind(&self, trainable: &[Var]) -> Result<ParamVars> {
        let mut it = trainable.iter().copied();
        let vars: Vec<Option<Var>> = self
            .entries
            .iter()
            .map(|e| match e.kind {
                ParamKind::Trainable => it.next(),
                ParamKind::Buffer => None,
            })
            .collect();
        let expected = self.trainable_ids().count();
        if trainable.len() != expected || vars.iter().zip(&self.entries).any(|(v, e)| e.kind == ParamKind::Trainable && v.is_none()) {
            return Err(Error::InvalidArgument(format!(
                "{} vars bound to {expected} trainable tensors",
                trainable.len()
            )));
        }
        Ok(ParamVars { vars })
    }

    /// Gradients of the trainable tensors in store order.
    pub fn gradients(&self, vars: &ParamVars, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.trainable_ids()
            .map(|id| {
                vars.get(id)
                    .and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.get(id).shape()))
            })
            .collect()
    }
}

/// Graph handles of the trainable tensors for one forward pass.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Option<Var>>,
}

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Option<Var> {
        self.vars.get(id.0).copied().flatten()
    }
}

/// Everything a layer needs during a forward pass.
pub struct Ctx<'a, T> {
    pub graph: &'a mut Graph<T>,
    pub store: &'a mut ParamStore<T>,
    pub params: &'a ParamVars,
    pub mode: Mode,
}

impl<T: Scalar> Ctx<'_, T> {
    fn var(&self, id: ParamId) -> Result<Var> {
        self.params
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("parameter `{}` is not bound", self.store.entries[id.0].name)))
    }
}

fn kaiming<T: Scalar>(shape: Shape, fan_in: usize, rng: &mut SeededRng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..shape.numel())
        .map(|_| T::from_f64_lossy(std * rng.standard_normal()))
        .collect();
    Tensor::from_vec_unchecked(shape, data)
}

/// Stride-1 "same" convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Result<Self> {
        if !(kernel == 1 || kernel == 3) {
            return Err(Error::InvalidArgument(format!("unsupported conv kernel {kernel}")));
        }
        let shape = Shape::nchw(out_ch, in_ch, kernel, kernel)?;
        let weight = store.add(format!("{name}.weight"), ParamKind::Trainable, kaiming(shape, in_ch * kernel * kernel, rng));
        let bias = store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(Shape::new(&[out_ch])?));
        Ok(Conv2d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.weight)?, ctx.var(self.bias)?);
        ctx.graph.conv2d(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }
}

/// 2x2, stride-2 transposed convolution with bias; weight is `(in, out, 2, 2)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut SeededRng, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        // each output pixel receives exactly one tap per input channel
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Trainable,
            kaiming(Shape::nchw(in_ch, out_ch, 2, 2)?, in_ch, rng),
        );
        let bias = store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(Shape::new(&[out_ch])?));
        Ok(ConvTranspose2d {
            weight,
            bias,
            in_ch,
            out_ch,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.weight)?, ctx.var(self.bias)?);
        ctx.graph.conv_transpose2d(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.in_ch * self.out_ch * 4 + self.out_ch
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig { eps: 1e-5, momentum: 0.1 }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub config: BatchNormConfig,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, config: BatchNormConfig) -> Result<Self> {
        let shape = Shape::new(&[channels])?;
        Ok(BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Trainable, Tensor::ones(shape)),
            beta: store.add(format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(shape)),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(shape)),
            running_var: store.add(format!("{name}.running_var"), ParamKind::Buffer, Tensor::ones(shape)),
            channels,
            config,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.var(self.gamma)?, ctx.var(self.beta)?);
        let mut mean = ctx.store.get(self.running_mean).clone();
        let mut var = ctx.store.get(self.running_var).clone();
        let stats = RunningStats {
            mean: &mut mean,
            var: &mut var,
            momentum: self.config.momentum,
            eps: self.config.eps,
        };
        let y = ctx.graph.batch_norm(x, gamma, beta, stats, ctx.mode)?;
        if ctx.mode == Mode::Train {
            ctx.store.set(self.running_mean, mean)?;
            ctx.store.set(self.running_var, var)?;
        }
        Ok(y)
    }

    /// Trainable scalars only; running statistics are not counted.
    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// conv -> batch norm -> ReLU, used for channel lifting and in the decoder.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        bn: BatchNormConfig,
    ) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), in_ch, out_ch, 3)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_ch, bn)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        ctx.graph.relu(y)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }
}
