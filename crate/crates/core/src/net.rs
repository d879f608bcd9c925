//! Network assembly: two parallel encoder branches, channel-wise fusion,
//! transposed-convolution decoder and a 1x1 logit head.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::blocks::{Block, DualBlock, SingleBlock};
use crate::error::{Error, Result};
use crate::kv::{parse_list, KvText};
use crate::layers::{BatchNormConfig, Conv2d, ConvBnRelu, ConvTranspose2d, Ctx, ParamStore, ParamVars};
use crate::ops::Mode;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which encoder branches are built.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetVariant {
    DualOnly,
    SingleOnly,
    Both,
}

impl NetVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            NetVariant::DualOnly => "dual_only",
            NetVariant::SingleOnly => "single_only",
            NetVariant::Both => "both",
        }
    }

    pub fn has_dual(self) -> bool {
        self != NetVariant::SingleOnly
    }

    pub fn has_single(self) -> bool {
        self != NetVariant::DualOnly
    }
}

impl fmt::Display for NetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual_only" => Ok(NetVariant::DualOnly),
            "single_only" => Ok(NetVariant::SingleOnly),
            "both" => Ok(NetVariant::Both),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected dual_only, single_only or both)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub variant: NetVariant,
    /// Output channels of each encoder stage. Each decoder stage halves the
    /// channel count it receives.
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub input_channels: usize,
    /// Nominal (H, W); both must be divisible by `2^stages`.
    pub input_hw: (usize, usize),
    pub bn: BatchNormConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            variant: NetVariant::Both,
            stage_widths: vec![16, 32, 64, 128],
            blocks_per_stage: 1,
            input_channels: 3,
            input_hw: (288, 384),
            bn: BatchNormConfig::default(),
        }
    }
}

pub const NET_CONFIG_KEYS: &[&str] = &[
    "variant",
    "stage_widths",
    "blocks_per_stage",
    "input_channels",
    "input_height",
    "input_width",
    "bn_eps",
    "bn_momentum",
];

impl NetConfig {
    /// Two-stage configuration small enough to train on a CPU in minutes.
    pub fn desk() -> Self {
        NetConfig {
            stage_widths: vec![8, 16],
            input_hw: (96, 128),
            ..Default::default()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_widths.len()
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1usize << self.num_stages().min(usize::BITS as usize - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() {
            return Err(Error::Config("at least one encoder stage is required".into()));
        }
        if self.stage_widths.len() > 16 {
            return Err(Error::Config("at most 16 encoder stages are supported".into()));
        }
        if self.stage_widths.contains(&0) {
            return Err(Error::Config("stage widths must be at least 1".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be at least 1".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be at least 1".into()));
        }
        self.check_hw(self.input_hw.0, self.input_hw.1)?;
        if !(self.bn.eps > 0.0) || !(self.bn.momentum > 0.0 && self.bn.momentum < 1.0) {
            return Err(Error::Config("bn_eps must be > 0 and bn_momentum in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn check_hw(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} is not divisible by {m} (2^{} pooling stages)",
                self.num_stages()
            )));
        }
        Ok(())
    }

    /// Channels entering the decoder after fusion.
    pub fn bottleneck_channels(&self) -> usize {
        let last = *self.stage_widths.last().unwrap_or(&0);
        match self.variant {
            NetVariant::Both => 2 * last,
            _ => last,
        }
    }

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::default();
        self.write_kv(&mut kv);
        kv
    }

    pub fn write_kv(&self, kv: &mut KvText) {
        let widths: Vec<String> = self.stage_widths.iter().map(|w| w.to_string()).collect();
        kv.push("variant", self.variant);
        kv.push("stage_widths", widths.join(","));
        kv.push("blocks_per_stage", self.blocks_per_stage);
        kv.push("input_channels", self.input_channels);
        kv.push("input_height", self.input_hw.0);
        kv.push("input_width", self.input_hw.1);
        kv.push("bn_eps", self.bn.eps);
        kv.push("bn_momentum", self.bn.momentum);
    }

    /// Overrides fields present in `kv`; absent keys keep their value.
    pub fn apply_kv(&mut self, kv: &KvText) -> Result<()> {
        if let Some(v) = kv.parse_value("variant")? {
            self.variant = v;
        }
        if let Some(w) = kv.get("stage_widths") {
            self.stage_widths = parse_list(w).ok_or_else(|| Error::Config(format!("invalid stage_widths `{w}`")))?;
        }
        if let Some(v) = kv.parse_value("blocks_per_stage")? {
            self.blocks_per_stage = v;
        }
        if let Some(v) = kv.parse_value("input_channels")? {
            self.input_channels = v;
        }
        if let Some(v) = kv.parse_value("input_height")? {
            self.input_hw.0 = v;
        }
        if let Some(v) = kv.parse_value("input_width")? {
            self.input_hw.1 = v;
        }
        if let Some(v) = kv.parse_value("bn_eps")? {
            self.bn.eps = v;
        }
        if let Some(v) = kv.parse_value("bn_momentum")? {
            self.bn.momentum = v;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DualStage {
    blocks: Vec<DualBlock>,
}

#[derive(Clone, Debug)]
struct SingleStage {
    lift: ConvBnRelu,
    blocks: Vec<SingleBlock>,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: ConvTranspose2d,
    refine: ConvBnRelu,
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    config: NetConfig,
    seed: u64,
    store: ParamStore<T>,
    dual: Vec<DualStage>,
    single: Vec<SingleStage>,
    decoder: Vec<DecoderStage>,
    head: Conv2d,
}

impl<T: Scalar> Network<T> {
    /// Builds a freshly initialized network. Conv weights are drawn from a
    /// fan-in scaled normal, biases and BN shifts start at zero, BN scales
    /// at one.
    pub fn build(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let bn = config.bn;
        let bps = config.blocks_per_stage;

        let mut dual = Vec::new();
        if config.variant.has_dual() {
            let mut prev = config.input_channels;
            for (s, &width) in config.stage_widths.iter().enumerate() {
                let blocks = (0..bps)
                    .map(|b| {
                        let cin = if b == 0 { prev } else { width };
                        DualBlock::new(&mut store, &mut rng, &format!("dual.s{s}.b{b}"), cin, width, bn)
                    })
                    .collect::<Result<_>>()?;
                dual.push(DualStage { blocks });
                prev = width;
            }
        }

        let mut single = Vec::new();
        if config.variant.has_single() {
            let mut prev = config.input_channels;
            for (s, &width) in config.stage_widths.iter().enumerate() {
                let lift = ConvBnRelu::new(&mut store, &mut rng, &format!("single.s{s}.lift"), prev, width, bn)?;
                let blocks = (0..bps)
                    .map(|b| SingleBlock::new(&mut store, &mut rng, &format!("single.s{s}.b{b}"), width, bn))
                    .collect::<Result<_>>()?;
                single.push(SingleStage { lift, blocks });
                prev = width;
            }
        }

        let mut decoder = Vec::new();
        let mut prev = config.bottleneck_channels();
        for d in 0..config.num_stages() {
            let width = (prev / 2).max(1);
            let up = ConvTranspose2d::new(&mut store, &mut rng, &format!("decoder.d{d}.up"), prev, width)?;
            let refine = ConvBnRelu::new(&mut store, &mut rng, &format!("decoder.d{d}.refine"), width, width, bn)?;
            decoder.push(DecoderStage { up, refine });
            prev = width;
        }
        let head = Conv2d::new(&mut store, &mut rng, "head", prev, 1, 1)?;

        Ok(Network {
            config: config.clone(),
            seed,
            store,
            dual,
            single,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Registers the trainable tensors on `graph`.
    pub fn attach(&self, graph: &mut Graph<T>, track: bool) -> ParamVars {
        self.store.attach(graph, track)
    }

    /// Logits `(N, 1, H, W)` for an input `(N, C, H, W)`.
    pub fn forward(&mut self, graph: &mut Graph<T>, x: Var, params: &ParamVars, mode: Mode) -> Result<Var> {
        let (_, c, h, w) = graph.shape(x)?.nchw_dims("forward")?;
        if c != self.config.input_channels {
            return Err(Error::shape(
                "forward",
                format!("input has {c} channels, network expects {}", self.config.input_channels),
            ));
        }
        self.config.check_hw(h, w)?;

        let mut ctx = Ctx {
            graph,
            store: &mut self.store,
            params,
            mode,
        };

        let dual_out = if self.dual.is_empty() {
            None
        } else {
            let mut y = x;
            for stage in &self.dual {
                for block in &stage.blocks {
                    y = block.forward(&mut ctx, y)?;
                }
                y = ctx.graph.max_pool2(y)?;
            }
            Some(y)
        };
        let single_out = if self.single.is_empty() {
            None
        } else {
            let mut y = x;
            for stage in &self.single {
                y = stage.lift.forward(&mut ctx, y)?;
                for block in &stage.blocks {
                    y = block.forward(&mut ctx, y)?;
                }
                y = ctx.graph.max_pool2(y)?;
            }
            Some(y)
        };

        let mut y = match (dual_out, single_out) {
            (Some(a), Some(b)) => ctx.graph.concat_channels(a, b)?,
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => unreachable!("a validated config builds at least one branch"),
        };
        for stage in &self.decoder {
            y = stage.up.forward(&mut ctx, y)?;
            y = stage.refine.forward(&mut ctx, y)?;
        }
        self.head.forward(&mut ctx, y)
    }

    /// Eval-mode logits without gradient tracking.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut graph = Graph::new();
        let params = self.attach(&mut graph, false);
        let xv = graph.constant(x.clone());
        let y = self.forward(&mut graph, xv, &params, Mode::Eval)?;
        Ok(graph.value(y)?.clone())
    }

    /// Trainable scalars: conv weights and biases, BN scales and shifts.
    pub fn count_parameters(&self) -> usize {
        let dual: usize = self
            .dual
            .iter()
            .flat_map(|s| &s.blocks)
            .map(|b| crate::blocks::param_count_block(Block::Dual(b)))
            .sum();
        let single: usize = self
            .single
            .iter()
            .map(|s| {
                s.lift.param_count()
                    + s.blocks
                        .iter()
                        .map(|b| crate::blocks::param_count_block(Block::Single(b)))
                        .sum::<usize>()
            })
            .sum();
        let decoder: usize = self
            .decoder
            .iter()
            .map(|d| d.up.param_count() + d.refine.param_count())
            .sum();
        dual + single + decoder + self.head.param_count()
    }

    /// Channels fed to the first decoder stage.
    pub fn decoder_input_channels(&self) -> usize {
        self.decoder.first().map_or(0, |d| d.up.in_ch)
    }

    pub fn dual_blocks(&self) -> impl Iterator<Item = &DualBlock> {
        self.dual.iter().flat_map(|s| &s.blocks)
    }

    pub fn single_blocks(&self) -> impl Iterator<Item = &SingleBlock> {
        self.single.iter().flat_map(|s| &s.blocks)
    }
}

/// One row of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationEntry {
    pub label: &'static str,
    pub description: &'static str,
    pub variant: NetVariant,
    pub lr: f64,
}

/// Learning rate used by the "both branches, raised LR" ablation row.
pub const ABLATION_RAISED_LR: f64 = 1e-3;

/// The four ablation configurations, in table order.
pub fn ablation_variants(base_lr: f64) -> [AblationEntry; 4] {
    [
        AblationEntry {
            label: "Network1",
            description: "dual convolution block only",
            variant: NetVariant::DualOnly,
            lr: base_lr,
        },
        AblationEntry {
            label: "Network2",
            description: "single convolution block only",
            variant: NetVariant::SingleOnly,
            lr: base_lr,
        },
        AblationEntry {
            label: "Network3",
            description: "both parallel blocks, LR 1e-3",
            variant: NetVariant::Both,
            lr: ABLATION_RAISED_LR,
        },
        AblationEntry {
            label: "DPE-Net",
            description: "both parallel blocks",
            variant: NetVariant::Both,
            lr: base_lr,
        },
    ]
}
