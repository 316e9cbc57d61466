//! AdamW training on sampled patch pairs, checkpoints, evaluation and
//! ablations.
//!
//! Each example of a batch is recorded on its own tape; per-example
//! gradients are reduced in example order, so results do not depend on the
//! number of worker threads.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    angular_grid, extract_patches, gather_patch, normalize_99, patch_mask, sample_training_example, PatchDescriptor,
    PatchPair, SamplingConfig, VolumeSet,
};
use crate::geometry::{d_cos, farthest_point_extend, farthest_point_subset, Direction};
use crate::metrics::{acc, mae, mssim, psnr, sh_interpolate, ReportRow, ShFitter, Summary, ACC_ORDER, SSIM_WINDOW};
use crate::metrics::MetricReport;
use crate::model::{PCCNNConfig, INPUT_SLOTS, PCCNN};
use crate::pcconv::WeightCache;
use crate::tensor::{ParamStore, Real, Tape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid optimiser settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments per parameter, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamWState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One decoupled-weight-decay Adam step using the gradients stored in
/// `store`. With `check_finite`, non-finite gradients abort the step.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
    check_finite: bool,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::shape("adamw", format!("{} moments for {} parameters", state.m.len(), store.len())));
    }
    if check_finite {
        if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let bc1 = T::of(1.0 - cfg.beta1.powi(t));
    let bc2 = T::of(1.0 - cfg.beta2.powi(t));
    let lr = T::of(cfg.lr);
    let decay = T::of(1.0 - cfg.lr * cfg.weight_decay);
    let eps = T::of(cfg.eps);
    for (i, p) in store.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let grad = p.grad.data().to_vec();
        for (k, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad[k];
            *w *= decay;
            m[k] = b1 * m[k] + (T::one() - b1) * g;
            v[k] = b2 * v[k] + (T::one() - b2) * g * g;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    NoFourier,
    NoBvectors,
    DmaxQuarterPi,
    DmaxEighthPi,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::None,
        Ablation::NoFourier,
        Ablation::NoBvectors,
        Ablation::DmaxQuarterPi,
        Ablation::DmaxEighthPi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoFourier => "no_fourier",
            Ablation::NoBvectors => "no_bvectors",
            Ablation::DmaxQuarterPi => "dmax_quarter_pi",
            Ablation::DmaxEighthPi => "dmax_eighth_pi",
        }
    }

    pub fn apply(self, cfg: &PCCNNConfig) -> PCCNNConfig {
        let mut c = *cfg;
        match self {
            Ablation::None => {}
            Ablation::NoFourier => c.fourier = false,
            Ablation::NoBvectors => c.include_dcos = false,
            Ablation::DmaxQuarterPi => c.d_max = PI / 4.0,
            Ablation::DmaxEighthPi => c.d_max = PI / 8.0,
        }
        c
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: PCCNNConfig,
    pub sampling: SamplingConfig,
    pub optim: AdamWConfig,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Training loss is logged every `log_every` steps.
    pub log_every: usize,
    /// Validation runs every `val_every` steps (0 disables it).
    pub val_every: usize,
    pub val_examples: usize,
    pub threads: usize,
    pub check_finite: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: PCCNNConfig::default(),
            sampling: SamplingConfig::default(),
            optim: AdamWConfig::default(),
            batch_size: 16,
            iterations: 2000,
            seed: 0,
            ablation: Ablation::None,
            log_every: 10,
            val_every: 100,
            val_examples: 16,
            threads: 1,
            check_finite: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.sampling.validate()?;
        self.optim.validate()?;
        if self.batch_size == 0 || self.log_every == 0 || self.threads == 0 {
            return Err(Error::InvalidConfig("batch size, log interval and threads must be ≥ 1".into()));
        }
        if self.val_every > 0 && self.val_examples == 0 {
            return Err(Error::InvalidConfig("validation needs at least one example".into()));
        }
        Ok(())
    }

    /// Model configuration with the ablation applied.
    pub fn model_config(&self) -> PCCNNConfig {
        self.ablation.apply(&self.model)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}

/// Normalised subject with its patch grid.
#[derive(Debug, Clone)]
pub struct Subject {
    pub vols: VolumeSet,
    pub patches: Vec<PatchDescriptor>,
}

impl Subject {
    pub fn new(raw: &VolumeSet, sampling: &SamplingConfig) -> Result<Self> {
        let vols = match raw.norm {
            Some(_) => raw.clone(),
            None => normalize_99(raw)?.0,
        };
        let patches = extract_patches(&vols, sampling.patch_size, sampling.stride)?;
        Ok(Self { vols, patches })
    }
}

fn example_tensors(ex: &PatchPair) -> (Tensor<f32>, Tensor<f32>) {
    let f = Tensor::from_f64(vec![ex.x_in.len(), 1], &ex.x_in).expect("shape");
    let t = Tensor::from_f64(vec![ex.x_out.len(), 1], &ex.x_out).expect("shape");
    (f, t)
}

fn draw_example(subjects: &[Subject], sampling: &SamplingConfig, seed: u64) -> Result<PatchPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = &subjects[rng.random_range(0..subjects.len())];
    sample_training_example(&s.vols, &s.patches, sampling, rng.random())
}

/// ℓ1 loss of one example and, with `grads`, its parameter gradients in
/// parameter order.
fn example_loss(model: &PCCNN<f32>, ex: &PatchPair, grads: bool, check_finite: bool) -> Result<(f64, Option<Vec<Vec<f32>>>)> {
    let geom = model.prepare(&ex.in_grid, &ex.out_grid, Some(ex.centroid()))?;
    let (f, target) = example_tensors(ex);
    let mut tape = Tape::new();
    tape.set_check_finite(check_finite);
    let fv = tape.input(f);
    let out = model.forward(&mut tape, fv, &geom)?;
    let loss = tape.l1_loss(out, &target, &ex.valid)?;
    let value = tape.value(loss).data()[0] as f64;
    if !grads {
        return Ok((value, None));
    }
    let g = tape.backward(loss)?;
    let mut out: Vec<Vec<f32>> = model.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
    for (id, t) in g.param_grads() {
        out[id.index()].copy_from_slice(t.data());
    }
    Ok((value, Some(out)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub val_loss: Option<f64>,
}

pub fn loss_csv(history: &[LossRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss", "val_loss"])?;
    for r in history {
        w.write_record([
            r.step.to_string(),
            format!("{}", r.loss),
            r.val_loss.map(|v| format!("{v}")).unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last step.
    pub last: Checkpoint,
    /// Lowest validation loss seen, or the last state without validation.
    pub best: Checkpoint,
    pub history: Vec<LossRecord>,
    pub best_val_loss: Option<f64>,
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))
}

/// Mean ℓ1 loss over `examples` without gradients.
pub fn mean_loss(model: &PCCNN<f32>, examples: &[PatchPair], threads: usize) -> Result<f64> {
    let losses: Vec<f64> = pool(threads)?.install(|| {
        examples
            .par_iter()
            .map(|ex| example_loss(model, ex, false, false).map(|(l, _)| l))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// One AdamW step on the mean ℓ1 loss of `batch`; returns that loss.
fn optimise_step(
    model: &mut PCCNN<f32>,
    state: &mut AdamWState<f32>,
    batch: &[PatchPair],
    optim: &AdamWConfig,
    check_finite: bool,
    workers: &rayon::ThreadPool,
) -> Result<f64> {
    let results: Vec<(f64, Option<Vec<Vec<f32>>>)> = workers.install(|| {
        batch
            .par_iter()
            .map(|ex| example_loss(model, ex, true, check_finite))
            .collect::<Result<Vec<_>>>()
    })?;
    model.params.zero_grad();
    let mut loss = 0.0;
    for (l, g) in &results {
        loss += l;
        for (p, g) in model.params.iter_mut().zip(g.as_ref().expect("gradients requested")) {
            for (dst, src) in p.grad.data_mut().iter_mut().zip(g) {
                *dst += *src;
            }
        }
    }
    let scale = 1.0 / batch.len() as f32;
    for p in model.params.iter_mut() {
        for g in p.grad.data_mut() {
            *g *= scale;
        }
    }
    adamw_step(&mut model.params, state, optim, check_finite)?;
    Ok(loss / batch.len() as f64)
}

/// Repeatedly optimises on a fixed set of examples; returns the loss
/// before each step followed by the final loss.
pub fn fit_examples(
    model: &mut PCCNN<f32>,
    examples: &[PatchPair],
    optim: &AdamWConfig,
    steps: usize,
    threads: usize,
) -> Result<Vec<f64>> {
    optim.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidConfig("no examples to fit".into()));
    }
    let workers = pool(threads)?;
    let mut state = AdamWState::new(&model.params);
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        losses.push(optimise_step(model, &mut state, examples, optim, true, &workers)?);
    }
    losses.push(mean_loss(model, examples, threads)?);
    Ok(losses)
}

/// Trains from a fresh initialisation seeded by `cfg.seed`.
pub fn train(cfg: &TrainConfig, train_sets: &[VolumeSet], val_sets: &[VolumeSet]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = PCCNN::<f32>::build(cfg.model_config(), cfg.seed)?;
    train_from(cfg, model, train_sets, val_sets)
}

/// Trains an existing model on examples drawn from `train_sets`.
pub fn train_from(cfg: &TrainConfig, mut model: PCCNN<f32>, train_sets: &[VolumeSet], val_sets: &[VolumeSet]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_sets.is_empty() {
        return Err(Error::InvalidConfig("no training subjects".into()));
    }
    let subjects = train_sets
        .iter()
        .map(|v| Subject::new(v, &cfg.sampling))
        .collect::<Result<Vec<_>>>()?;
    let val_subjects = val_sets
        .iter()
        .map(|v| Subject::new(v, &cfg.sampling))
        .collect::<Result<Vec<_>>>()?;
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_5eed);
    let val_examples = if cfg.val_every > 0 && !val_subjects.is_empty() {
        let mut vr = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0a1_0da7a);
        (0..cfg.val_examples)
            .map(|_| draw_example(&val_subjects, &cfg.sampling, vr.random()))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let workers = pool(cfg.threads)?;
    let mut state = AdamWState::new(&model.params);
    let digest = cfg.digest();
    let mut history = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;

    for step in 1..=cfg.iterations {
        let batch = (0..cfg.batch_size)
            .map(|_| draw_example(&subjects, &cfg.sampling, seeds.random()))
            .collect::<Result<Vec<_>>>()?;
        let loss = optimise_step(&mut model, &mut state, &batch, &cfg.optim, cfg.check_finite, &workers)?;

        let val_loss = if !val_examples.is_empty() && step % cfg.val_every == 0 {
            Some(mean_loss(&model, &val_examples, cfg.threads)?)
        } else {
            None
        };
        if step % cfg.log_every == 0 || val_loss.is_some() {
            history.push(LossRecord { step, loss, val_loss });
        }
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, Checkpoint::capture(&model, Some(&state), step as u64, &digest)));
            }
        }
    }
    let last = Checkpoint::capture(&model, Some(&state), cfg.iterations as u64, &digest);
    let (best_val_loss, best) = match best {
        Some((v, c)) => (Some(v), c),
        None => (None, last.clone()),
    };
    Ok(TrainOutcome {
        last,
        best,
        history,
        best_val_loss,
    })
}

/// One named tensor in a checkpoint blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDescriptor {
    pub format: String,
    pub dtype: String,
    pub model: PCCNNConfig,
    pub iteration: u64,
    pub config_digest: String,
    pub optimizer_step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

/// Model parameters plus optional optimiser moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: CheckpointDescriptor,
    pub blob: Vec<f32>,
}

pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const CHECKPOINT_BLOB: &str = "weights.f32";

impl Checkpoint {
    pub fn capture(model: &PCCNN<f32>, state: Option<&AdamWState<f32>>, iteration: u64, digest: &str) -> Self {
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: blob.len(),
                len: data.len(),
            });
            blob.extend_from_slice(data);
        };
        for p in model.params.iter() {
            push(p.name.clone(), p.value.shape().to_vec(), p.value.data());
        }
        if let Some(s) = state {
            for (i, p) in model.params.iter().enumerate() {
                push(format!("adamw.m.{}", p.name), p.value.shape().to_vec(), &s.m[i]);
            }
            for (i, p) in model.params.iter().enumerate() {
                push(format!("adamw.v.{}", p.name), p.value.shape().to_vec(), &s.v[i]);
            }
        }
        Self {
            descriptor: CheckpointDescriptor {
                format: "pccnn-checkpoint/1".into(),
                dtype: "float32".into(),
                model: model.cfg,
                iteration,
                config_digest: digest.to_string(),
                optimizer_step: state.map(|s| s.step),
                tensors,
            },
            blob,
        }
    }

    fn tensor(&self, name: &str) -> Option<(&TensorEntry, &[f32])> {
        self.descriptor
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| (t, &self.blob[t.offset..t.offset + t.len]))
    }

    pub fn model(&self) -> Result<PCCNN<f32>> {
        let mut model = PCCNN::<f32>::build(self.descriptor.model, 0)?;
        for p in model.params.iter_mut() {
            let (entry, data) = self
                .tensor(&p.name)
                .ok_or_else(|| Error::Parse(format!("checkpoint lacks parameter {}", p.name)))?;
            if entry.shape != p.value.shape() {
                return Err(Error::Parse(format!("shape mismatch for {}", p.name)));
            }
            p.value.data_mut().copy_from_slice(data);
        }
        Ok(model)
    }

    pub fn optimizer(&self, model: &PCCNN<f32>) -> Result<Option<AdamWState<f32>>> {
        let Some(step) = self.descriptor.optimizer_step else {
            return Ok(None);
        };
        let mut state = AdamWState::new(&model.params);
        state.step = step;
        for (i, p) in model.params.iter().enumerate() {
            for (kind, dst) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
                let (_, data) = self
                    .tensor(&format!("adamw.{kind}.{}", p.name))
                    .ok_or_else(|| Error::Parse(format!("checkpoint lacks moment {kind} of {}", p.name)))?;
                dst.copy_from_slice(data);
            }
        }
        Ok(Some(state))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut json = serde_json::to_string_pretty(&self.descriptor)?;
        json.push('\n');
        let jp = dir.join(CHECKPOINT_JSON);
        fs::write(&jp, json).map_err(|e| Error::io(&jp, e))?;
        let bytes: Vec<u8> = self.blob.iter().flat_map(|v| v.to_le_bytes()).collect();
        let bp = dir.join(CHECKPOINT_BLOB);
        fs::write(&bp, bytes).map_err(|e| Error::io(&bp, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let jp = dir.join(CHECKPOINT_JSON);
        let text = fs::read(&jp).map_err(|e| Error::io(&jp, e))?;
        let descriptor: CheckpointDescriptor = serde_json::from_slice(&text)?;
        let bp = dir.join(CHECKPOINT_BLOB);
        let bytes = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Parse("checkpoint blob length is not a multiple of 4".into()));
        }
        let blob: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let end = descriptor.tensors.iter().map(|t| t.offset + t.len).max().unwrap_or(0);
        if end > blob.len() {
            return Err(Error::Parse("checkpoint blob is shorter than its descriptor".into()));
        }
        Ok(Self { descriptor, blob })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Held-out directions of the input shell.
    Single,
    /// Held-out input-shell directions plus every other shell.
    Multi,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Single => "single",
            Protocol::Multi => "multi",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Protocol::Single),
            "multi" => Ok(Protocol::Multi),
            _ => Err(Error::InvalidConfig(format!("unknown protocol {s:?}"))),
        }
    }
}

/// Source of predictions at target directions.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Model(&'a PCCNN<f32>),
    /// Order-2 SH fit of the input directions.
    ShInterpolation,
    /// Value of the angularly nearest input direction.
    LowRes,
    /// The acquired target values themselves.
    GroundTruth,
}

impl Predictor<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Predictor::Model(_) => "pccnn",
            Predictor::ShInterpolation => "sh",
            Predictor::LowRes => "lowres",
            Predictor::GroundTruth => "ground_truth",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub q_in: usize,
    pub b_in: f64,
    /// Start index of the greedy input selection.
    pub q0: usize,
    pub patch_size: usize,
    /// Targets per model forward pass; `None` predicts a shell at once.
    pub chunk: Option<usize>,
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Single,
            q_in: 6,
            b_in: 1000.0,
            q0: 0,
            patch_size: 10,
            chunk: None,
            threads: 1,
        }
    }
}

/// Input volumes and per-shell target volumes for one subject.
pub fn eval_split(vols: &VolumeSet, cfg: &EvalConfig) -> Result<(Vec<usize>, Vec<(f64, Vec<usize>)>)> {
    let shell = vols.shell_volumes(cfg.b_in)?;
    let dirs: Vec<Direction> = shell.iter().map(|&v| vols.gradients[v].dir).collect();
    if cfg.q_in == 0 || cfg.q_in > INPUT_SLOTS || cfg.q_in >= dirs.len() {
        return Err(Error::Protocol(format!(
            "q_in = {} is invalid for a {}-direction shell",
            cfg.q_in,
            dirs.len()
        )));
    }
    let mut chosen = farthest_point_subset(&dirs, cfg.q0 % dirs.len(), cfg.q_in)?;
    let inputs: Vec<usize> = chosen.iter().map(|&i| shell[i]).collect();
    // remaining input-shell directions in greedy order
    farthest_point_extend(&dirs, &mut chosen, dirs.len() - cfg.q_in);
    let mut targets = vec![(cfg.b_in, chosen[cfg.q_in..].iter().map(|&i| shell[i]).collect())];
    if cfg.protocol == Protocol::Multi {
        let others: Vec<f64> = vols.shells().into_iter().filter(|&b| b != cfg.b_in).collect();
        if others.is_empty() {
            return Err(Error::Protocol("multi-shell evaluation needs more than one shell".into()));
        }
        for b in others {
            targets.push((b, vols.shell_volumes(b)?));
        }
    }
    Ok((inputs, targets))
}

/// Splits greedy-ordered targets into interleaved chunks of at most `size`.
fn chunks(targets: &[usize], size: Option<usize>) -> Vec<Vec<usize>> {
    let n = match size {
        Some(s) if s > 0 && s < targets.len() => targets.len().div_ceil(s),
        _ => 1,
    };
    (0..n).map(|c| targets.iter().skip(c).step_by(n).copied().collect()).collect()
}

fn tile_patches(dims: [usize; 3], size: usize) -> Result<Vec<PatchDescriptor>> {
    if dims.iter().any(|&d| d < size) {
        return Err(Error::InvalidConfig(format!("patch size {size} exceeds volume {dims:?}")));
    }
    let axis = |d: usize| {
        let mut o: Vec<usize> = (0..=dims[d] - size).step_by(size).collect();
        if *o.last().unwrap() != dims[d] - size {
            o.push(dims[d] - size);
        }
        o
    };
    let (ax, ay, az) = (axis(0), axis(1), axis(2));
    let mut out = Vec::new();
    for &x in &ax {
        for &y in &ay {
            for &z in &az {
                out.push(PatchDescriptor {
                    origin: [x, y, z],
                    size,
                    centroid: [0.5; 3],
                });
            }
        }
    }
    Ok(out)
}

/// Model prediction in raw intensity units, `[voxel × targets]`.
pub fn predict_with_model(
    model: &PCCNN<f32>,
    raw: &VolumeSet,
    inputs: &[usize],
    targets: &[usize],
    cfg: &EvalConfig,
) -> Result<Vec<f64>> {
    let (vols, rec) = normalize_99(raw)?;
    let nt = targets.len();
    let mut out = vec![0.0; vols.n_voxels() * nt];
    // centroids follow the same convention as training patches
    let centroids: Vec<PatchDescriptor> = extract_patches(&vols, cfg.patch_size, cfg.patch_size)?;
    let centroid_of = |p: &PatchDescriptor| {
        centroids
            .iter()
            .find(|c| c.origin == p.origin)
            .map(|c| c.centroid)
            .unwrap_or_else(|| {
                let (lo, hi) = vols.mask_bbox().expect("mask checked by normalisation");
                std::array::from_fn(|d| {
                    let center = p.origin[d] as f64 + (p.size as f64 - 1.0) / 2.0;
                    let ext = (hi[d] - lo[d]) as f64;
                    if ext == 0.0 {
                        0.5
                    } else {
                        ((center - lo[d] as f64) / ext).clamp(0.0, 1.0)
                    }
                })
            })
    };
    let patches: Vec<PatchDescriptor> = tile_patches(vols.dims, cfg.patch_size)?
        .into_iter()
        .filter(|p| patch_mask(&vols, p).iter().any(|&m| m))
        .map(|p| PatchDescriptor {
            centroid: centroid_of(&p),
            ..p
        })
        .collect();
    let target_chunks = chunks(targets, cfg.chunk);
    let cache = WeightCache::<f32>::new();
    let in_grid = angular_grid(&vols, cfg.patch_size, inputs, INPUT_SLOTS);
    let jobs: Vec<(usize, usize)> = (0..patches.len())
        .flat_map(|p| (0..target_chunks.len()).map(move |c| (p, c)))
        .collect();
    let results: Vec<Vec<f64>> = pool(cfg.threads)?.install(|| {
        jobs.par_iter()
            .map(|&(p, c)| {
                let patch = &patches[p];
                let tc = &target_chunks[c];
                let out_grid = angular_grid(&vols, cfg.patch_size, tc, 0);
                let geom = model.prepare(&in_grid, &out_grid, Some(patch.centroid))?;
                let x = gather_patch(&vols, patch, inputs, INPUT_SLOTS - inputs.len());
                let f = Tensor::from_f64(vec![x.len() / INPUT_SLOTS, INPUT_SLOTS], &x)?;
                Ok(model.predict(&f, &geom, Some(&cache))?.to_f64_vec())
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let s = cfg.patch_size;
    for (&(p, c), pred) in jobs.iter().zip(results) {
        let patch = &patches[p];
        let tc = &target_chunks[c];
        for i in 0..s * s * s {
            let coords = [
                patch.origin[0] + i / (s * s),
                patch.origin[1] + (i / s) % s,
                patch.origin[2] + i % s,
            ];
            let v = vols.voxel_index(coords);
            for (k, t) in tc.iter().enumerate() {
                let col = targets.iter().position(|x| x == t).expect("target in set");
                out[v * nt + col] = pred[i * tc.len() + k] * rec.scale;
            }
        }
    }
    Ok(out)
}

fn gather(vols: &VolumeSet, volumes: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(vols.n_voxels() * volumes.len());
    for v in 0..vols.n_voxels() {
        out.extend(volumes.iter().map(|&k| vols.value(v, k)));
    }
    out
}

/// Predictions for `targets` of one shell, `[voxel × targets]`.
pub fn predict(
    predictor: &Predictor,
    vols: &VolumeSet,
    inputs: &[usize],
    targets: &[usize],
    cfg: &EvalConfig,
) -> Result<Vec<f64>> {
    let same_shell = targets.iter().all(|&t| vols.gradients[t].bval == cfg.b_in);
    let dirs = |idx: &[usize]| idx.iter().map(|&k| vols.gradients[k].dir).collect::<Vec<_>>();
    match predictor {
        Predictor::GroundTruth => Ok(gather(vols, targets)),
        Predictor::Model(m) => predict_with_model(m, vols, inputs, targets, cfg),
        Predictor::ShInterpolation | Predictor::LowRes if !same_shell => Err(Error::Protocol(format!(
            "{} predicts within the input shell only",
            predictor.name()
        ))),
        Predictor::ShInterpolation => sh_interpolate(&gather(vols, inputs), &dirs(inputs), &dirs(targets), 2),
        Predictor::LowRes => {
            let (di, dt) = (dirs(inputs), dirs(targets));
            let nearest: Vec<usize> = dt
                .iter()
                .map(|t| {
                    (0..di.len())
                        .max_by(|&a, &b| d_cos(t, &di[a]).abs().total_cmp(&d_cos(t, &di[b]).abs()).then(b.cmp(&a)))
                        .expect("inputs non-empty")
                })
                .collect();
            let x = gather(vols, inputs);
            let ni = inputs.len();
            let mut out = Vec::with_capacity(vols.n_voxels() * dt.len());
            for v in 0..vols.n_voxels() {
                out.extend(nearest.iter().map(|&j| x[v * ni + j]));
            }
            Ok(out)
        }
    }
}

fn masked_acc(vols: &VolumeSet, pred_full: &[f64], truth_full: &[f64], dirs: &[Direction]) -> Result<Option<f64>> {
    if dirs.len() < crate::metrics::sh_count(ACC_ORDER) {
        return Ok(None);
    }
    let fitter = ShFitter::new(dirs, ACC_ORDER)?;
    let n = dirs.len();
    let (mut s, mut count) = (0.0, 0);
    for v in (0..vols.n_voxels()).filter(|&v| vols.mask[v]) {
        let a = fitter.fit(&pred_full[v * n..(v + 1) * n])?;
        let b = fitter.fit(&truth_full[v * n..(v + 1) * n])?;
        if let Ok(c) = acc(&a, &b) {
            s += c;
            count += 1;
        }
    }
    Ok((count > 0).then(|| s / count as f64))
}

/// Per-subject metrics for every target shell of the protocol.
pub fn evaluate(predictor: &Predictor, subjects: &[VolumeSet], cfg: &EvalConfig) -> Result<MetricReport> {
    if subjects.is_empty() {
        return Err(Error::InvalidConfig("evaluation needs at least one subject".into()));
    }
    // (shell, metric) → per-subject values
    let mut table: Vec<((String, String), Vec<f64>)> = Vec::new();
    let mut record = |shell: f64, metric: &str, value: f64| {
        let key = (format!("{shell}"), metric.to_string());
        match table.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(value),
            None => table.push((key, vec![value])),
        }
    };
    for vols in subjects {
        let (inputs, targets) = eval_split(vols, cfg)?;
        for (bval, tgt) in &targets {
            let pred = predict(predictor, vols, &inputs, tgt, cfg)?;
            let truth = gather(vols, tgt);
            let nt = tgt.len();
            let mask: Vec<bool> = vols.mask.iter().flat_map(|&m| std::iter::repeat_n(m, nt)).collect();
            record(*bval, "mae", mae(&pred, &truth, &mask)?);
            record(*bval, "psnr", psnr(&pred, &truth, &mask, None)?);
            if vols.dims.iter().all(|&d| d >= SSIM_WINDOW) {
                record(*bval, "mssim", mssim(&pred, &truth, vols.dims, nt, &vols.mask)?);
            }
            // full shell: acquired inputs plus predictions for the input shell
            let (full_idx, full_pred) = if *bval == cfg.b_in {
                let x = gather(vols, &inputs);
                let ni = inputs.len();
                let mut fp = Vec::with_capacity(vols.n_voxels() * (ni + nt));
                for v in 0..vols.n_voxels() {
                    fp.extend_from_slice(&x[v * ni..(v + 1) * ni]);
                    fp.extend_from_slice(&pred[v * nt..(v + 1) * nt]);
                }
                ([inputs.clone(), tgt.clone()].concat(), fp)
            } else {
                (tgt.clone(), pred.clone())
            };
            let dirs: Vec<Direction> = full_idx.iter().map(|&k| vols.gradients[k].dir).collect();
            if let Some(a) = masked_acc(vols, &full_pred, &gather(vols, &full_idx), &dirs)? {
                record(*bval, "acc", a);
            }
        }
    }
    let rows = table
        .into_iter()
        .map(|((shell, metric), values)| {
            Ok(ReportRow {
                method: predictor.name().to_string(),
                protocol: cfg.protocol.name().to_string(),
                shell,
                q_in: cfg.q_in,
                metric,
                summary: Summary::from_subject_means(values)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport { rows })
}

/// Trains and evaluates one arm per ablation with identical seeds and data.
pub fn run_ablation(
    base: &TrainConfig,
    arms: &[Ablation],
    train_sets: &[VolumeSet],
    val_sets: &[VolumeSet],
    test_sets: &[VolumeSet],
    eval: &EvalConfig,
) -> Result<(MetricReport, Vec<TrainOutcome>)> {
    let mut report = MetricReport::default();
    let mut outcomes = Vec::new();
    for &arm in arms {
        let cfg = TrainConfig {
            ablation: arm,
            ..base.clone()
        };
        let outcome = train(&cfg, train_sets, val_sets)?;
        let model = outcome.best.model()?;
        let r = evaluate(&Predictor::Model(&model), test_sets, eval)?;
        report.rows.extend(r.rows.into_iter().map(|row| ReportRow {
            method: format!("pccnn[{}]", arm.name()),
            ..row
        }));
        outcomes.push(outcome);
    }
    Ok((report, outcomes))
}
