//! Command-line workflows.
//!
//! Config files hold `key = value` lines covering the network, training and
//! path settings; unknown keys are rejected. Command-line flags override the
//! file. Errors are reported on stderr as `error:<category>: <message>` and
//! mapped to a per-category exit code.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{
    generate_synthetic_dataset, read_ppm, resize_bilinear, resize_mask, split_dataset, write_pgm, DatasetDir,
};
use crate::error::{Error, Result};
use crate::gradcheck::run_suite;
use crate::kv::{parse_list, KvText};
use crate::net::{NetConfig, NetVariant, Network, NET_CONFIG_KEYS};
use crate::ops::sigmoid_scalar;
use crate::tensor::Tensor;
use crate::train::{evaluate, run_ablation, TrainConfig, Trainer, TRAIN_CONFIG_KEYS};

const PATH_KEYS: &[&str] = &["data", "out", "log"];

#[derive(Parser, Debug)]
#[command(name = "dpenet", version, about = "Dual-parallel-encoder polyp segmentation on the CPU")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory with a split file
    GenData(GenDataArgs),
    /// Train a network and write a checkpoint plus a CSV log
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset
    Eval(EvalArgs),
    /// Segment one PPM image into a binary PGM mask
    Infer(InferArgs),
    /// Train and score the four ablation variants on one dataset
    Ablate(AblateArgs),
    /// Run the finite-difference gradient suite
    Gradcheck(GradcheckArgs),
    /// Print the number of trainable parameters of a configuration
    CountParams(CountParamsArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Number of samples
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    /// Image size as HxW
    #[arg(long, default_value = "288x384", value_parser = parse_hw)]
    pub size: (usize, usize),
    /// Seed for generation and splitting
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

/// Network and training overrides shared by `train` and `ablate`.
#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    /// Config file with `key = value` lines
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Encoder branches: dual_only, single_only or both [default: both]
    #[arg(long)]
    pub variant: Option<NetVariant>,
    /// Encoder stage widths, comma separated [default: 16,32,64,128]
    #[arg(long)]
    pub widths: Option<String>,
    /// Residual blocks per encoder stage [default: 1]
    #[arg(long)]
    pub blocks_per_stage: Option<usize>,
    /// Learning rate [default: 1e-4]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs [default: 40]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 8]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Momentum [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Seed for initialization and shuffling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Validate every N epochs, 0 to disable [default: 1]
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Probability threshold for binarization [default: 0.5]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Keep the sample order fixed across epochs
    #[arg(long)]
    pub no_shuffle: bool,
    /// Dataset directory
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Checkpoint to write
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV log to write [default: <out>.csv]
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Split to score: train, test or val
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Probability threshold for binarization
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Checkpoint to use
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input PPM image
    #[arg(long)]
    pub image: PathBuf,
    /// Output PGM mask
    #[arg(long)]
    pub mask: PathBuf,
    /// Probability threshold for binarization
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Directory for the ablation table and checkpoints
    #[arg(long)]
    pub out: PathBuf,
    /// Split to score: train, test or val
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Seed for the random test inputs
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct CountParamsArgs {
    /// Config file with `key = value` lines
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Encoder branches: dual_only, single_only or both [default: both]
    #[arg(long)]
    pub variant: Option<NetVariant>,
    /// Encoder stage widths, comma separated [default: 16,32,64,128]
    #[arg(long)]
    pub widths: Option<String>,
}

fn parse_hw(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("expected HxW, got `{s}`"));
    Ok((parse(h)?, parse(w)?))
}

/// Contents of a config file after validation against the known keys.
#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
    /// Whether the file fixed the input size.
    pub sets_input_hw: bool,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvText::parse(text)?;
        let allowed: Vec<&str> = NET_CONFIG_KEYS
            .iter()
            .chain(TRAIN_CONFIG_KEYS)
            .chain(PATH_KEYS)
            .copied()
            .collect();
        kv.reject_unknown(&allowed)?;
        let mut cfg = ConfigFile::default();
        cfg.net.apply_kv(&kv)?;
        cfg.train.apply_kv(&kv)?;
        let path = |k: &str| kv.get(k).map(PathBuf::from);
        cfg.data = path("data");
        cfg.out = path("out");
        cfg.log = path("log");
        cfg.sets_input_hw = kv.get("input_height").is_some() || kv.get("input_width").is_some();
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(ConfigFile::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                ConfigFile::parse(&text).map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("{}: {msg}", p.display())),
                    e => e,
                })
            }
        }
    }
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    parse_list(s).ok_or_else(|| Error::Config(format!("invalid widths `{s}`")))
}

impl TrainFlags {
    /// File values overridden by any flags given.
    fn resolve(&self) -> Result<ConfigFile> {
        let mut cfg = ConfigFile::load(self.config.as_deref())?;
        if let Some(v) = self.variant {
            cfg.net.variant = v;
        }
        if let Some(w) = &self.widths {
            cfg.net.stage_widths = parse_widths(w)?;
        }
        if let Some(v) = self.blocks_per_stage {
            cfg.net.blocks_per_stage = v;
        }
        let t = &mut cfg.train;
        t.lr = self.lr.unwrap_or(t.lr);
        t.epochs = self.epochs.unwrap_or(t.epochs);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.momentum = self.momentum.unwrap_or(t.momentum);
        t.seed = self.seed.unwrap_or(t.seed);
        t.eval_every = self.eval_every.unwrap_or(t.eval_every);
        t.threshold = self.threshold.unwrap_or(t.threshold);
        if self.no_shuffle {
            t.shuffle = false;
        }
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// Opens the dataset and fixes the network input size: the configured size
/// when the config sets one (samples are resized to it), the dataset's own
/// size otherwise.
fn open_dataset(cfg: &mut ConfigFile) -> Result<(DatasetDir, crate::data::DatasetSplit)> {
    let root = cfg
        .data
        .clone()
        .ok_or_else(|| Error::Config("no dataset directory (use --data or `data = ...`)".into()))?;
    let dir = DatasetDir::new(root);
    let split = dir.read_split()?;
    let first = split
        .train
        .first()
        .ok_or_else(|| Error::InvalidArgument("training split is empty".into()))?;
    let native = dir.native_hw(first)?;
    if !cfg.sets_input_hw {
        cfg.net.input_hw = native;
    }
    cfg.net.validate()?;
    let resize = (cfg.net.input_hw != native).then_some(cfg.net.input_hw);
    Ok((dir.with_resize(resize), split))
}

fn checkpoint_dir(net: &NetConfig, root: &Path) -> DatasetDir {
    DatasetDir::new(root).with_resize(Some(net.input_hw))
}

fn cmd_gen_data(args: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let samples = generate_synthetic_dataset::<f32>(args.n, args.size, args.seed)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = split_dataset(&ids, args.seed)?;
    DatasetDir::new(&args.out).write(&samples, &split)?;
    let _ = writeln!(
        out,
        "wrote {} samples of {}x{} to {} (train {}, test {}, val {})",
        samples.len(),
        args.size.0,
        args.size.1,
        args.out.display(),
        split.train.len(),
        split.test.len(),
        split.val.len()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = args.flags.resolve()?;
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    if let Some(l) = &args.log {
        cfg.log = Some(l.clone());
    }
    let ckpt = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("no checkpoint path (use --out or `out = ...`)".into()))?;
    let log_path = cfg.log.clone().unwrap_or_else(|| ckpt.with_extension("csv"));
    let (dir, split) = open_dataset(&mut cfg)?;

    let mut net = Network::<f32>::build(&cfg.net, cfg.train.seed)?;
    let _ = writeln!(
        out,
        "training {} ({} parameters) on {} samples at {}x{}, lr {}",
        cfg.net.variant,
        net.count_parameters(),
        split.train.len(),
        cfg.net.input_hw.0,
        cfg.net.input_hw.1,
        cfg.train.lr
    );
    let start = Instant::now();
    let mut trainer = Trainer::new(&mut net, &dir, &split, &cfg.train)?;
    for _ in 0..cfg.train.epochs {
        let r = trainer.run_epoch()?;
        let val = r
            .val
            .map_or(String::new(), |(d, i)| format!(" val_mdice {d:.4} val_miou {i:.4}"));
        let _ = writeln!(
            out,
            "epoch {:>3} step {:>5} loss {:.6}{val} ({:.1}s)",
            r.epoch,
            r.step,
            r.loss,
            start.elapsed().as_secs_f64()
        );
    }
    let log = trainer.finish();
    log.write_csv(&log_path)?;
    save_checkpoint(&net, &ckpt)?;
    let _ = writeln!(out, "wrote {} and {}", ckpt.display(), log_path.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let mut net = load_checkpoint::<f32>(&args.ckpt)?;
    let dir = checkpoint_dir(net.config(), &args.data);
    let split = dir.read_split()?;
    let ids = split.section(&args.split)?;
    let report = evaluate(&mut net, &dir, ids, args.threshold)?;
    let _ = writeln!(out, "{report}");
    Ok(())
}

fn cmd_infer(args: &InferArgs, out: &mut dyn Write) -> Result<()> {
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {} outside (0, 1)", args.threshold)));
    }
    let mut net = load_checkpoint::<f32>(&args.ckpt)?;
    let image: Tensor<f32> = read_ppm(&args.image)?;
    let (h, w) = (image.dims()[1], image.dims()[2]);
    let input = resize_bilinear(&image, net.config().input_hw)?;
    let (nh, nw) = net.config().input_hw;
    let logits = net.predict(&input.reshape(&[1, 3, nh, nw])?)?;
    let threshold = args.threshold as f32;
    let mask = logits
        .map(|z| if sigmoid_scalar(z) >= threshold { 1.0 } else { 0.0 })?
        .reshape(&[1, nh, nw])?;
    let mask = resize_mask(&mask, (h, w))?;
    write_pgm(&args.mask, &mask)?;
    let fg = mask.sum() / (h * w) as f32;
    let _ = writeln!(out, "wrote {} ({:.2}% foreground)", args.mask.display(), 100.0 * fg);
    Ok(())
}

fn cmd_ablate(args: &AblateArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = args.flags.resolve()?;
    let (dir, split) = open_dataset(&mut cfg)?;
    let eval_ids = split.section(&args.split)?.to_vec();
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let table = run_ablation::<f32, _>(&cfg.net, &dir, &split, &cfg.train, &eval_ids, |label| {
        let _ = writeln!(out, "training {label}");
    })?;
    let path = args.out.join("ablation.csv");
    std::fs::write(&path, table.to_csv()).map_err(|e| Error::io(&path, e))?;
    let _ = write!(out, "{table}");
    let _ = writeln!(out, "wrote {}", path.display());
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let start = Instant::now();
    let cases = run_suite(args.seed)?;
    let mut failed = Vec::new();
    for c in &cases {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        let _ = writeln!(
            out,
            "{:<24} max_rel_error {:.3e} (tol {:.0e}) checked {:>4} skipped {:>3} {verdict}",
            c.name, c.report.max_rel_error, c.tolerance, c.report.checked, c.report.skipped_kinks
        );
        if !c.passed() {
            failed.push(c.name);
        }
    }
    let _ = writeln!(out, "{} cases in {:.2}s", cases.len(), start.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckFailed(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn cmd_count_params(args: &CountParamsArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = ConfigFile::load(args.config.as_deref())?;
    if let Some(v) = args.variant {
        cfg.net.variant = v;
    }
    if let Some(w) = &args.widths {
        cfg.net.stage_widths = parse_widths(w)?;
    }
    let net = Network::<f32>::build(&cfg.net, 0)?;
    let _ = writeln!(out, "{}", net.count_parameters());
    Ok(())
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Infer(a) => cmd_infer(a, out),
        Command::Ablate(a) => cmd_ablate(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::CountParams(a) => cmd_count_params(a, out),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error:argument: {first}");
            return 2;
        }
    };
    let stdout = std::io::stdout();
    match run(&cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error:{}: {e}", e.category());
            e.exit_code()
        }
    }
}
