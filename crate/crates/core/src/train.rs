//! Optimizer, training loop, evaluation and the ablation runner.

use std::fmt::{self, Write as _};
use std::path::Path;

use crate::autodiff::Graph;
use crate::data::{batch, DatasetSplit, Purpose, Sample, SampleSource};
use crate::error::{Error, Result};
use crate::kv::KvText;
use crate::metrics::{confusion_from_masks, MetricsReport};
use crate::net::{ablation_variants, NetConfig, Network};
use crate::ops::{sigmoid_scalar, Mode};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Classical momentum: `v <- momentum * v + g`, then `p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct SgdmState<T> {
    pub momentum: f64,
    pub lr: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdmState<T> {
    /// Zero velocity shaped like `params`.
    pub fn new(params: &[Tensor<T>], momentum: f64, lr: f64) -> Self {
        SgdmState {
            momentum,
            lr,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// Updates `params` in place.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::shape(
                "sgdm_step",
                format!(
                    "{} params, {} grads, {} velocities",
                    params.len(),
                    grads.len(),
                    self.velocity.len()
                ),
            ));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::shape(
                    "sgdm_step",
                    format!("param {} grad {} velocity {}", p.shape(), g.shape(), v.shape()),
                ));
            }
            g.ensure_finite("sgdm_step")?;
        }
        let mu = T::from_f64_lossy(self.momentum);
        let lr = T::from_f64_lossy(self.lr);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let new_v: Vec<T> = v.data().iter().zip(g.data()).map(|(&v, &g)| mu * v + g).collect();
            let new_p: Vec<T> = p.data().iter().zip(&new_v).map(|(&p, &v)| p - lr * v).collect();
            *v = Tensor::new(v.shape(), new_v)?;
            *p = Tensor::new(p.shape(), new_p)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 8,
            lr: 1e-4,
            momentum: 0.9,
            seed: 0,
            shuffle: true,
            eval_every: 1,
            threshold: 0.5,
        }
    }
}

pub const TRAIN_CONFIG_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "lr",
    "momentum",
    "seed",
    "shuffle",
    "eval_every",
    "threshold",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &KvText) -> Result<()> {
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = kv.parse_value(stringify!($field))? {
                    self.$field = v;
                }
            )*};
        }
        take!(epochs, batch_size, lr, momentum, seed, shuffle, eval_every, threshold);
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvText) {
        kv.push("epochs", self.epochs);
        kv.push("batch_size", self.batch_size);
        kv.push("lr", self.lr);
        kv.push("momentum", self.momentum);
        kv.push("seed", self.seed);
        kv.push("shuffle", self.shuffle);
        kv.push("eval_every", self.eval_every);
        kv.push("threshold", self.threshold);
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Sample-weighted mean of the batch losses of this epoch.
    pub loss: f64,
    pub val: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

impl TrainLog {
    /// `epoch,step,loss,mdice_val,miou_val`, metric cells empty between
    /// evaluations.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,loss,mdice_val,miou_val\n");
        for r in &self.epochs {
            let _ = match r.val {
                Some((d, i)) => writeln!(out, "{},{},{},{},{}", r.epoch, r.step, r.loss, d, i),
                None => writeln!(out, "{},{},{},,", r.epoch, r.step, r.loss),
            };
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, step },
        e => e,
    }
}

/// Drives training one epoch at a time. Training samples are read once with
/// [`Purpose::Fit`]; validation samples only ever with
/// [`Purpose::Evaluate`].
pub struct Trainer<'a, T, S> {
    net: &'a mut Network<T>,
    source: &'a S,
    cfg: TrainConfig,
    optimizer: SgdmState<T>,
    train: Vec<Sample<T>>,
    val_ids: Vec<String>,
    rng: SeededRng,
    log: TrainLog,
}

impl<'a, T: Scalar, S: SampleSource<T>> Trainer<'a, T, S> {
    pub fn new(net: &'a mut Network<T>, source: &'a S, split: &DatasetSplit, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if split.train.is_empty() {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        let train = split
            .train
            .iter()
            .map(|id| source.load(id, Purpose::Fit))
            .collect::<Result<Vec<_>>>()?;
        let optimizer = SgdmState::new(&net.store().trainable_values(), cfg.momentum, cfg.lr);
        Ok(Trainer {
            net,
            source,
            cfg: cfg.clone(),
            optimizer,
            train,
            val_ids: split.val.clone(),
            rng: SeededRng::new(cfg.seed),
            log: TrainLog::default(),
        })
    }

    pub fn net(&mut self) -> &mut Network<T> {
        self.net
    }

    pub fn train_samples(&self) -> &[Sample<T>] {
        &self.train
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    /// One forward/backward/update on the given samples; returns the loss.
    fn step(&mut self, samples: &[Sample<T>], epoch: usize) -> Result<f64> {
        let step = self.log.step_losses.len() + 1;
        let (images, masks) = batch(samples)?;
        let mut graph = Graph::new();
        let params = self.net.attach(&mut graph, true);
        let x = graph.constant(images);
        let (loss, grads) = (|| {
            let logits = self.net.forward(&mut graph, x, &params, Mode::Train)?;
            let loss = graph.bce_with_logits(logits, &masks)?;
            let grads = graph.backward(loss)?;
            Ok((graph.value(loss)?.item()?.to_f64_lossy(), grads))
        })()
        .map_err(|e| diverged(e, epoch, step))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, step });
        }
        let grads = self.net.store().gradients(&params, &grads);
        let ids: Vec<_> = self.net.store().trainable_ids().collect();
        let mut values = self.net.store().trainable_values();
        self.optimizer
            .step(&mut values, &grads)
            .map_err(|e| diverged(e, epoch, step))?;
        let store = self.net.store_mut();
        for (id, v) in ids.into_iter().zip(values) {
            store.set(id, v)?;
        }
        self.log.step_losses.push(loss);
        Ok(loss)
    }

    /// Runs the next epoch and returns its log record.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let epoch = self.log.epochs.len() + 1;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        if self.cfg.shuffle {
            self.rng.shuffle(&mut order);
        }
        let mut weighted = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let samples: Vec<_> = chunk.iter().map(|&i| self.train[i].clone()).collect();
            weighted += self.step(&samples, epoch)? * samples.len() as f64;
        }
        let val = if self.cfg.eval_every > 0 && epoch % self.cfg.eval_every == 0 && !self.val_ids.is_empty() {
            let r = evaluate(self.net, self.source, &self.val_ids, self.cfg.threshold)?;
            Some((r.mdice, r.miou))
        } else {
            None
        };
        self.log.epochs.push(EpochRecord {
            epoch,
            step: self.log.step_losses.len(),
            loss: weighted / self.train.len() as f64,
            val,
        });
        Ok(self.log.epochs.last().expect("just pushed"))
    }

    pub fn finish(self) -> TrainLog {
        self.log
    }
}

/// Trains for `cfg.epochs` epochs.
pub fn train_loop<T: Scalar, S: SampleSource<T>>(
    net: &mut Network<T>,
    source: &S,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let mut trainer = Trainer::new(net, source, split, cfg)?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.finish())
}

const EVAL_BATCH: usize = 8;

/// Eval-mode predictions for `samples`, as probabilities `(N, 1, H, W)`.
pub fn predict_probabilities<T: Scalar>(net: &mut Network<T>, samples: &[Sample<T>]) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let (images, _) = batch(chunk)?;
        let probs = net.predict(&images)?.map(sigmoid_scalar)?;
        for i in 0..chunk.len() {
            out.push(probs.slice_batch(i, i + 1)?);
        }
    }
    Ok(out)
}

/// Scores `samples` against their own masks.
pub fn evaluate_samples<T: Scalar>(net: &mut Network<T>, samples: &[Sample<T>], threshold: f64) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let probs = predict_probabilities(net, samples)?;
    let mut rows = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(probs) {
        let truth = s.mask.reshape(p.dims())?;
        rows.push((s.id.clone(), confusion_from_masks(&p, &truth, threshold)?[0]));
    }
    MetricsReport::from_counts(rows)
}

/// Loads `ids` with [`Purpose::Evaluate`] and scores them.
pub fn evaluate<T: Scalar, S: SampleSource<T>>(
    net: &mut Network<T>,
    source: &S,
    ids: &[String],
    threshold: f64,
) -> Result<MetricsReport> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("no ids to evaluate".into()));
    }
    let samples = ids
        .iter()
        .map(|id| source.load(id, Purpose::Evaluate))
        .collect::<Result<Vec<_>>>()?;
    evaluate_samples(net, &samples, threshold)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: &'static str,
    pub description: &'static str,
    pub lr: f64,
    pub params: usize,
    pub final_loss: f64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("network,description,lr,params,final_loss,mdice,miou,accuracy\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.label, r.description, r.lr, r.params, r.final_loss, r.report.mdice, r.report.miou, r.report.accuracy
            );
        }
        out
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:<32} {:>8} {:>9} {:>8} {:>9}",
            "network", "description", "lr", "params", "mDice", "accuracy"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<10} {:<32} {:>8.0e} {:>9} {:>8.4} {:>9.4}",
                r.label, r.description, r.lr, r.params, r.report.mdice, r.report.accuracy
            )?;
        }
        Ok(())
    }
}

/// Trains each ablation variant from the same seed on the same split and
/// scores it on `eval_ids`.
pub fn run_ablation<T: Scalar, S: SampleSource<T>>(
    base: &NetConfig,
    source: &S,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    eval_ids: &[String],
    mut progress: impl FnMut(&str),
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for entry in ablation_variants(cfg.lr) {
        progress(entry.label);
        let net_cfg = NetConfig {
            variant: entry.variant,
            ..base.clone()
        };
        let mut net = Network::<T>::build(&net_cfg, cfg.seed)?;
        let train_cfg = TrainConfig {
            lr: entry.lr,
            eval_every: 0,
            ..cfg.clone()
        };
        let log = train_loop(&mut net, source, split, &train_cfg)?;
        let report = evaluate(&mut net, source, eval_ids, cfg.threshold)?;
        rows.push(AblationRow {
            label: entry.label,
            description: entry.description,
            lr: entry.lr,
            params: net.count_parameters(),
            final_loss: log.epochs.last().map_or(f64::NAN, |r| r.loss),
            report,
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, AccessLog, InMemoryDataset};

    fn t(v: f64) -> Tensor<f64> {
        Tensor::scalar(v).unwrap()
    }

    #[test]
    fn plain_sgd_reduction() {
        let mut p = vec![t(1.0)];
        let mut opt = SgdmState::new(&p, 0.0, 0.1);
        opt.step(&mut p, &[t(2.0)]).unwrap();
        assert!((p[0].item().unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![t(0.3)];
        let mut opt = SgdmState::new(&p, 0.9, 1.0);
        opt.step(&mut p, &[t(0.0)]).unwrap();
        assert_eq!(p[0].item().unwrap(), 0.3);
    }

    #[test]
    fn momentum_hand_iteration() {
        let mut p = vec![t(0.0)];
        let mut opt = SgdmState::new(&p, 0.9, 1.0);
        opt.step(&mut p, &[t(1.0)]).unwrap();
        assert_eq!(p[0].item().unwrap(), -1.0);
        opt.step(&mut p, &[t(1.0)]).unwrap();
        assert!((p[0].item().unwrap() + 2.9).abs() < 1e-15);
    }

    #[test]
    fn optimizer_errors() {
        let mut p = vec![t(0.0)];
        let mut opt = SgdmState::new(&p, 0.9, 1.0);
        let wide = Tensor::from_slice(&[2], &[1.0, 1.0]).unwrap();
        assert!(matches!(opt.step(&mut p, &[wide]), Err(Error::Shape { .. })));
        let nan = Tensor::from_vec_unchecked(crate::tensor::Shape::scalar(), vec![f64::NAN]);
        assert!(matches!(opt.step(&mut p, &[nan]), Err(Error::NonFinite { .. })));
        assert!(opt.step(&mut p, &[]).is_err());
    }

    fn tiny_setup() -> (NetConfig, InMemoryDataset<f32>, DatasetSplit) {
        let cfg = NetConfig {
            stage_widths: vec![2, 4],
            input_hw: (16, 16),
            ..NetConfig::default()
        };
        let ds = InMemoryDataset::new(generate_synthetic_dataset(10, (16, 16), 2).unwrap()).unwrap();
        let split = crate::data::split_dataset(&ds.ids(), 2).unwrap();
        (cfg, ds, split)
    }

    #[test]
    fn training_reads_only_the_train_split_for_fitting() {
        let (cfg, ds, split) = tiny_setup();
        let logged = AccessLog::new(ds);
        let mut net = Network::<f32>::build(&cfg, 0).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let log = train_loop(&mut net, &logged, &split, &tc).unwrap();
        assert_eq!(log.step_losses.len(), 2 * 3);
        assert!(log.epochs.iter().all(|r| r.val.is_some()));
        for (id, purpose) in logged.entries() {
            match purpose {
                Purpose::Fit => assert!(split.train.contains(&id)),
                Purpose::Evaluate => assert!(split.val.contains(&id), "{id}"),
            }
        }
        assert!(!logged.entries().iter().any(|(id, _)| split.test.contains(id)));
    }

    #[test]
    fn csv_layout() {
        let log = TrainLog {
            epochs: vec![
                EpochRecord {
                    epoch: 1,
                    step: 2,
                    loss: 0.5,
                    val: None,
                },
                EpochRecord {
                    epoch: 2,
                    step: 4,
                    loss: 0.25,
                    val: Some((0.75, 0.5)),
                },
            ],
            step_losses: vec![],
        };
        assert_eq!(log.to_csv(), "epoch,step,loss,mdice_val,miou_val\n1,2,0.5,,\n2,4,0.25,0.75,0.5\n");
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let (cfg, ds, mut split) = tiny_setup();
        split.train.clear();
        let mut net = Network::<f32>::build(&cfg, 0).unwrap();
        assert!(train_loop(&mut net, &ds, &split, &TrainConfig::default()).is_err());
    }

    #[test]
    fn config_validation_and_kv() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let mut kv = KvText::default();
        let cfg = TrainConfig {
            epochs: 3,
            shuffle: false,
            ..TrainConfig::default()
        };
        cfg.write_kv(&mut kv);
        let mut back = TrainConfig::default();
        back.apply_kv(&kv).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let (cfg, ds, split) = tiny_setup();
        let mut net = Network::<f32>::build(&cfg, 0).unwrap();
        let tc = TrainConfig {
            epochs: 50,
            lr: 1e30,
            eval_every: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(train_loop(&mut net, &ds, &split, &tc), Err(Error::Diverged { .. })));
    }
}
