//! Command-line surface: `phantom`, `train`, `eval` and `gradcheck`.
//!
//! Every command writes `manifest.json` into its output directory before
//! doing any heavy work. Exit codes: 0 success, 1 usage error, 2 validation
//! or contract failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{fibonacci_shells, generate_phantom, read_dataset, write_dataset, PhantomSpec, SamplingConfig, VolumeSet};
use crate::embedding::Variant;
use crate::gradcheck::{run_suite, OPS};
use crate::model::PCCNNConfig;
use crate::pcconv::WeightMode;
use crate::trainer::{
    evaluate, loss_csv, train, Ablation, AdamWConfig, Checkpoint, EvalConfig, Predictor, Protocol, TrainConfig,
};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "pccnn", version, about = "Angular super-resolution of diffusion MRI with PCConv networks")]
pub struct Cli {
    /// Worker threads; results are identical for any value.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: u16,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-tensor phantom dataset.
    Phantom(PhantomArgs),
    /// Train a PCCNN on phantom datasets.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a baseline and write metric reports.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PhantomArgs {
    /// Comma-separated b-values in s/mm².
    #[arg(long, value_delimiter = ',', default_value = "1000,2000,3000")]
    pub shells: Vec<f64>,
    /// Directions per shell.
    #[arg(long, default_value_t = 90)]
    pub dirs: usize,
    /// Edge length of the cubic volume in voxels.
    #[arg(long, default_value_t = 40)]
    pub size: usize,
    /// Rician noise level relative to the b=0 signal.
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantArg {
    Standard,
    Bv,
    Sp,
    BvSp,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Standard => Variant::Standard,
            VariantArg::Bv => Variant::Bv,
            VariantArg::Sp => Variant::Sp,
            VariantArg::BvSp => Variant::BvSp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArg {
    None,
    NoFourier,
    NoBvectors,
    DmaxQuarterPi,
    DmaxEighthPi,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::None => Ablation::None,
            AblationArg::NoFourier => Ablation::NoFourier,
            AblationArg::NoBvectors => Ablation::NoBvectors,
            AblationArg::DmaxQuarterPi => Ablation::DmaxQuarterPi,
            AblationArg::DmaxEighthPi => Ablation::DmaxEighthPi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightModeArg {
    Full,
    PerChannel,
    Scalar,
}

impl From<WeightModeArg> for WeightMode {
    fn from(w: WeightModeArg) -> Self {
        match w {
            WeightModeArg::Full => WeightMode::Full,
            WeightModeArg::PerChannel => WeightMode::PerChannel,
            WeightModeArg::Scalar => WeightMode::Scalar,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Training dataset directories.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Validation dataset directories; the best validation state is kept.
    #[arg(long, num_args = 1..)]
    pub val: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = VariantArg::Standard)]
    pub variant: VariantArg,
    #[arg(long, value_enum, default_value_t = AblationArg::None)]
    pub ablation: AblationArg,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 10)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 5)]
    pub stride: usize,
    #[arg(long, default_value_t = 6)]
    pub q_in_min: usize,
    #[arg(long, default_value_t = 20)]
    pub q_in_max: usize,
    /// Targets per example; all remaining directions when omitted.
    #[arg(long)]
    pub q_out: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub n_pointwise: usize,
    #[arg(long, default_value_t = 2)]
    pub n_blocks: usize,
    /// Channel width of every hidden layer.
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub bands: usize,
    #[arg(long, default_value_t = 20)]
    pub k_q: usize,
    #[arg(long, value_enum, default_value_t = WeightModeArg::PerChannel)]
    pub weight_mode: WeightModeArg,
    /// Angular radius in radians before any ablation.
    #[arg(long, default_value_t = std::f64::consts::PI)]
    pub d_max: f64,
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
    #[arg(long, default_value_t = 100)]
    pub val_every: usize,
    #[arg(long, default_value_t = 16)]
    pub val_examples: usize,
}

impl TrainArgs {
    pub fn config(&self, threads: usize) -> TrainConfig {
        TrainConfig {
            model: PCCNNConfig {
                n_pointwise: self.n_pointwise,
                n_blocks: self.n_blocks,
                c1: self.channels,
                c3: self.channels,
                hidden: self.hidden,
                bands: self.bands,
                k_q: self.k_q,
                variant: self.variant.into(),
                weight_mode: self.weight_mode.into(),
                d_max: self.d_max,
                ..PCCNNConfig::default()
            },
            sampling: SamplingConfig {
                patch_size: self.patch_size,
                stride: self.stride,
                q_in_min: self.q_in_min,
                q_in_max: self.q_in_max,
                q_out: self.q_out,
            },
            optim: AdamWConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            batch_size: self.batch,
            iterations: self.iters,
            seed: self.seed,
            ablation: self.ablation.into(),
            log_every: self.log_every,
            val_every: if self.val.is_empty() { 0 } else { self.val_every },
            val_examples: self.val_examples,
            threads,
            check_finite: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineArg {
    Lowres,
    Sh,
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolArg {
    Single,
    Multi,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(group = clap::ArgGroup::new("predictor").required(true).args(["checkpoint", "baseline"]))]
pub struct EvalArgs {
    /// Test dataset directories; each is one subject.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    #[arg(long, value_enum, default_value_t = ProtocolArg::Single)]
    pub protocol: ProtocolArg,
    #[arg(long, default_value_t = 6)]
    pub qin: usize,
    /// Input shell in s/mm².
    #[arg(long, default_value_t = 1000.0)]
    pub b_in: f64,
    #[arg(long, default_value_t = 0)]
    pub q0: usize,
    #[arg(long, default_value_t = 10)]
    pub patch_size: usize,
    /// Targets per model pass; a whole shell at once when omitted.
    #[arg(long)]
    pub chunk: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negates the backward rule of one op (fault injection).
    #[arg(long, hide = true)]
    pub flip: Option<String>,
    /// Directory for the manifest and the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Resolved invocation recorded next to every output.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub threads: usize,
    pub config: serde_json::Value,
    /// Input path → SHA-256 over its files.
    pub inputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, threads: usize, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            threads,
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), digest_path(path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        let p = dir.join(MANIFEST_FILE);
        fs::write(&p, json).map_err(|e| Error::io(&p, e))
    }
}

/// SHA-256 over the relative names and contents of every file below
/// `path` in sorted order, excluding manifests.
pub fn digest_path(path: &Path) -> Result<String> {
    fn collect(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                collect(root, &p, out)?;
            } else if p.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        collect(path, path, &mut files)?;
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            hasher.update(rel.to_string_lossy().as_bytes());
            hasher.update([0]);
            hasher.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
        }
    } else {
        hasher.update(fs::read(path).map_err(|e| Error::io(path, e))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_all(dirs: &[PathBuf]) -> Result<Vec<VolumeSet>> {
    dirs.iter().map(|d| read_dataset(d)).collect()
}

pub fn cmd_phantom(args: &PhantomArgs, threads: usize) -> Result<()> {
    let spec = PhantomSpec::standard(args.size, args.noise, args.seed);
    spec.validate()?;
    if args.dirs == 0 || args.shells.is_empty() || args.shells.iter().any(|&b| !(b > 0.0)) {
        return Err(Error::InvalidConfig("need at least one positive shell and one direction".into()));
    }
    RunManifest::new("phantom", Some(args.seed), threads, args)?.write(&args.out)?;
    let vols = generate_phantom(&spec, &fibonacci_shells(&args.shells, args.dirs, args.seed))?;
    let mut extra = BTreeMap::new();
    extra.insert("noise_sigma".to_string(), serde_json::json!(args.noise));
    write_dataset(&args.out, &vols, Some(args.seed), extra)?;
    eprintln!("wrote {} volumes of {:?} to {}", vols.n_volumes(), vols.dims, args.out.display());
    Ok(())
}

pub const BEST_DIR: &str = "checkpoint";
pub const LAST_DIR: &str = "last";
pub const LOSS_FILE: &str = "loss.csv";

pub fn cmd_train(args: &TrainArgs, threads: usize) -> Result<()> {
    let cfg = args.config(threads);
    cfg.validate()?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        train: &'a TrainConfig,
        data: &'a [PathBuf],
        val: &'a [PathBuf],
    }
    let mut manifest = RunManifest::new(
        "train",
        Some(cfg.seed),
        threads,
        &Resolved {
            train: &TrainConfig { threads: 1, ..cfg.clone() },
            data: &args.data,
            val: &args.val,
        },
    )?;
    for p in args.data.iter().chain(&args.val) {
        manifest.add_input(p)?;
    }
    manifest.write(&args.out)?;
    let train_sets = load_all(&args.data)?;
    let val_sets = load_all(&args.val)?;
    let outcome = train(&cfg, &train_sets, &val_sets)?;
    outcome.best.save(&args.out.join(BEST_DIR))?;
    outcome.last.save(&args.out.join(LAST_DIR))?;
    write_text(&args.out.join(LOSS_FILE), &loss_csv(&outcome.history)?)?;
    match outcome.best_val_loss {
        Some(v) => eprintln!("best validation loss {v:.6} at step {}", outcome.best.descriptor.iteration),
        None => eprintln!("trained {} steps", cfg.iterations),
    }
    Ok(())
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

pub fn cmd_eval(args: &EvalArgs, threads: usize) -> Result<()> {
    let cfg = EvalConfig {
        protocol: match args.protocol {
            ProtocolArg::Single => Protocol::Single,
            ProtocolArg::Multi => Protocol::Multi,
        },
        q_in: args.qin,
        b_in: args.b_in,
        q0: args.q0,
        patch_size: args.patch_size,
        chunk: args.chunk,
        threads,
    };
    #[derive(Serialize)]
    struct Resolved<'a> {
        eval: &'a EvalConfig,
        args: &'a EvalArgs,
    }
    let mut manifest = RunManifest::new(
        "eval",
        None,
        threads,
        &Resolved {
            eval: &EvalConfig { threads: 1, ..cfg.clone() },
            args,
        },
    )?;
    for p in args.data.iter().chain(&args.checkpoint) {
        manifest.add_input(p)?;
    }
    manifest.write(&args.out)?;
    let subjects = load_all(&args.data)?;
    let model = args.checkpoint.as_deref().map(Checkpoint::load).transpose()?.map(|c| c.model()).transpose()?;
    let predictor = match (&model, args.baseline) {
        (Some(m), _) => Predictor::Model(m),
        (None, Some(BaselineArg::Sh)) => Predictor::ShInterpolation,
        (None, Some(BaselineArg::Lowres)) => Predictor::LowRes,
        (None, Some(BaselineArg::GroundTruth)) => Predictor::GroundTruth,
        (None, None) => return Err(Error::InvalidConfig("need --checkpoint or --baseline".into())),
    };
    let report = evaluate(&predictor, &subjects, &cfg)?;
    report.write(&args.out.join(REPORT_JSON), &args.out.join(REPORT_CSV))?;
    for row in &report.rows {
        println!(
            "{} {} b={} q_in={} {}: {:.6} ± {:.6}",
            row.method, row.protocol, row.shell, row.q_in, row.metric, row.summary.mean, row.summary.std
        );
    }
    Ok(())
}

/// Runs the suite; `Ok(false)` when any check fails.
pub fn cmd_gradcheck(args: &GradcheckArgs, threads: usize) -> Result<bool> {
    let flip = match &args.flip {
        Some(name) => Some(
            *OPS.iter()
                .find(|op| **op == name.as_str())
                .ok_or_else(|| Error::InvalidConfig(format!("unknown op {name:?}")))?,
        ),
        None => None,
    };
    if let Some(out) = &args.out {
        RunManifest::new("gradcheck", Some(args.seed), threads, args)?.write(out)?;
    }
    let report = run_suite(args.seed, flip)?;
    for c in &report.checks {
        let status = if c.passed(report.tolerance) { "ok  " } else { "FAIL" };
        println!("{status} {:40} n={:<5} max_rel_err={:.3e}", c.name, c.n_checked, c.max_rel_err);
    }
    if let Some(out) = &args.out {
        let mut json = serde_json::to_string_pretty(&report)?;
        json.push('\n');
        write_text(&out.join(REPORT_JSON), &json)?;
    }
    if report.passed() {
        println!("all {} checks passed at tolerance {:e}", report.checks.len(), report.tolerance);
        return Ok(true);
    }
    if let Some(w) = report.worst() {
        eprintln!("gradient check failed; worst offender {} (max rel err {:.3e}, at {:?})", w.name, w.max_rel_err, w.worst);
    }
    Ok(false)
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let threads = cli.threads as usize;
    let outcome = match &cli.command {
        Command::Phantom(a) => cmd_phantom(a, threads).map(|_| true),
        Command::Train(a) => cmd_train(a, threads).map(|_| true),
        Command::Eval(a) => cmd_eval(a, threads).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a, threads),
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
