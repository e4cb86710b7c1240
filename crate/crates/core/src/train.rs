//! Losses, the optimizer, the training loop and checkpoints.
//!
//! A checkpoint is one file: magic `VTTSCKPT`, a `u32` version, a `u32`
//! block count, then named blocks (`u32` name length, UTF-8 name, `u32`
//! rank, `u32` dims, little-endian `f64` values). Parameters are stored as
//! `param/<name>`, batch-norm running statistics as `buffer/<name>` and Adam
//! moments as `adam.m/<name>` and `adam.v/<name>`. The experiment config
//! (`meta.config`, UTF-8 bytes), baseline vocabulary (`meta.vocab`, code
//! points), step counter and Adam time step travel as `meta.*` blocks.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acoustic::{
    AcousticModel, CharVocab, FrontEndKind, FrontInput, MelSpectrogram, VariancePrediction, VarianceTargets,
};
use crate::config::ExperimentConfig;
use crate::data::{Utterance, UtteranceRecord};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mat::Mat;
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::textimg::mix64;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VTTSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const FINE_TUNE_LEARNING_RATE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub mel: f64,
    pub duration: f64,
    pub pitch: f64,
    pub energy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mel: 1.0,
            duration: 1.0,
            pitch: 1.0,
            energy: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient descent.
    Sgd,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::Config(format!("optimizer must be adam or sgd, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Zero disables clipping.
    pub grad_clip_norm: f64,
    pub optimizer: OptimizerKind,
    pub weights: LossWeights,
    /// Zero writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            learning_rate: 1e-3,
            batch_size: 8,
            max_steps: 2000,
            grad_clip_norm: 1.0,
            optimizer: OptimizerKind::Adam,
            weights: LossWeights::default(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps < 1 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm < 0.0 {
            return Err(Error::Config("grad_clip_norm must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub mel_l1: f64,
    /// MSE on `ln(duration + 1)`.
    pub duration_mse: f64,
    pub pitch_mse: f64,
    pub energy_mse: f64,
    pub total: f64,
}

impl LossReport {
    fn from_parts(mel_l1: f64, duration_mse: f64, pitch_mse: f64, energy_mse: f64, w: &LossWeights) -> Self {
        Self {
            mel_l1,
            duration_mse,
            pitch_mse,
            energy_mse,
            total: w.mel * mel_l1 + w.duration * duration_mse + w.pitch * pitch_mse + w.energy * energy_mse,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.mel_l1,
            self.duration_mse,
            self.pitch_mse,
            self.energy_mse,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn to_tsv(&self, step: u64) -> String {
        format!(
            "{step}\t{}\t{}\t{}\t{}\t{}",
            self.mel_l1, self.duration_mse, self.pitch_mse, self.energy_mse, self.total
        )
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.mel_l1 += r.mel_l1 / n;
            m.duration_mse += r.duration_mse / n;
            m.pitch_mse += r.pitch_mse / n;
            m.energy_mse += r.energy_mse / n;
            m.total += r.total / n;
        }
        m
    }
}

fn log_durations(d: &[usize]) -> Vec<f64> {
    d.iter().map(|&v| (v as f64 + 1.0).ln()).collect()
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

fn mean_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

/// Losses of concrete predictions against targets.
pub fn compute_loss<T: Scalar>(
    mel: &MelSpectrogram<T>,
    prediction: &VariancePrediction,
    target_mel: &Mat<T>,
    targets: &VarianceTargets,
    weights: &LossWeights,
) -> Result<LossReport> {
    if mel.frames.shape() != target_mel.shape() {
        return Err(Error::shape(
            "predicted mel",
            format!("{}x{}", target_mel.rows(), target_mel.cols()),
            format!("{}x{}", mel.frames.rows(), mel.frames.cols()),
        ));
    }
    let n = targets.durations.len();
    if prediction.log_duration.len() != n || prediction.pitch.len() != n || prediction.energy.len() != n {
        return Err(Error::shape("variance predictions", n, prediction.log_duration.len()));
    }
    let p: Vec<f64> = mel.frames.as_slice().iter().map(|v| v.as_f64()).collect();
    let t: Vec<f64> = target_mel.as_slice().iter().map(|v| v.as_f64()).collect();
    Ok(LossReport::from_parts(
        mean_abs(&p, &t),
        mean_sq(&prediction.log_duration, &log_durations(&targets.durations)),
        mean_sq(&prediction.pitch, &targets.pitch),
        mean_sq(&prediction.energy, &targets.energy),
        weights,
    ))
}

fn column<T: Scalar>(v: &[f64]) -> Mat<T> {
    Mat::from_vec(v.len(), 1, v.iter().map(|&x| T::of(x)).collect())
}

/// One prepared training example.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub id: String,
    pub input: FrontInput,
    pub targets: VarianceTargets,
    pub mel: Mat<T>,
}

impl<T: Scalar> Example<T> {
    pub fn new(model: &AcousticModel<T>, utterance: &Utterance) -> Result<Self> {
        let r = &utterance.record;
        let input = model.prepare(&r.chars(), &r.decorations, r.typeface_variant)?;
        let targets = r.targets();
        if utterance.mel.rows() != targets.total_frames() || utterance.mel.cols() != model.config.acoustic.n_mels {
            return Err(Error::Record {
                id: r.utterance_id.clone(),
                reason: format!(
                    "mel is {}x{}, expected {}x{}",
                    utterance.mel.rows(),
                    utterance.mel.cols(),
                    targets.total_frames(),
                    model.config.acoustic.n_mels
                ),
            });
        }
        Ok(Self {
            id: r.utterance_id.clone(),
            input,
            targets,
            mel: utterance.mel.cast(),
        })
    }
}

/// Builds the weighted loss of one example on `g`. Returns the total and
/// the concrete report.
pub fn loss_graph<T: Scalar>(
    model: &AcousticModel<T>,
    g: &mut Graph<'_, T>,
    example: &Example<T>,
    weights: &LossWeights,
    ctx: &mut Ctx,
) -> Result<(Var, LossReport, Vec<crate::graph::BatchStats<T>>)> {
    let out = model.forward_graph(g, &example.input, Some(&example.targets), ctx)?;
    let mel = g.mean_abs(out.mel, example.mel.clone());
    let dur = g.mean_sq(out.log_duration, column(&log_durations(&example.targets.durations)));
    let pitch = g.mean_sq(out.pitch, column(&example.targets.pitch));
    let energy = g.mean_sq(out.energy, column(&example.targets.energy));
    let parts = [
        (mel, weights.mel),
        (dur, weights.duration),
        (pitch, weights.pitch),
        (energy, weights.energy),
    ];
    let values: Vec<f64> = parts.iter().map(|(v, _)| g.value(*v)[(0, 0)].as_f64()).collect();
    let mut total = g.scale(mel, T::of(weights.mel));
    for &(v, w) in &parts[1..] {
        let s = g.scale(v, T::of(w));
        total = g.add(total, s);
    }
    let report = LossReport::from_parts(values[0], values[1], values[2], values[3], weights);
    Ok((total, report, out.bn_stats))
}

/// First and second moments for Adam.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Global L2 norm of a gradient store.
pub fn global_norm<T: Scalar>(grads: &ParamStore<T>) -> f64 {
    grads.values().iter().map(|g| g.sum_sq().as_f64()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm` (zero
/// disables). Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.values_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

pub struct Trainer<T: Scalar> {
    pub model: AcousticModel<T>,
    pub config: TrainConfig,
    pub optimizer: OptimizerState<T>,
    /// Number of completed steps.
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: AcousticModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(&model.params);
        Ok(Self {
            model,
            config,
            optimizer,
            step: 0,
        })
    }

    /// Fresh model from an experiment config. The baseline vocabulary comes
    /// from `training_texts`.
    pub fn from_experiment<'a>(
        exp: &ExperimentConfig,
        training_texts: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        exp.validate()?;
        let vocab = match exp.model.front_end {
            FrontEndKind::Baseline => Some(CharVocab::from_texts(training_texts)),
            FrontEndKind::Visual => None,
        };
        let model = AcousticModel::new(exp.model.clone(), vocab, exp.train.seed)?;
        Self::new(model, exp.train.clone())
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model.config.clone(),
            train: self.config.clone(),
        }
    }

    pub fn prepare(&self, utterances: &[Utterance]) -> Result<Vec<Example<T>>> {
        utterances.iter().map(|u| Example::new(&self.model, u)).collect()
    }

    /// Mean parameter gradients and loss over a batch; also folds batch-norm
    /// statistics into the running estimates.
    pub fn batch_gradients(&mut self, batch: &[&Example<T>]) -> Result<(ParamStore<T>, LossReport)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let step = self.step + 1;
        let scale = T::of(1.0 / batch.len() as f64);
        let mut total = self.model.params.zeros_like();
        let mut reports = Vec::with_capacity(batch.len());
        let mut all_stats = Vec::with_capacity(batch.len());
        for (i, ex) in batch.iter().enumerate() {
            let seed = mix64(self.config.seed ^ mix64(step.wrapping_mul(0x1_0000).wrapping_add(i as u64)));
            let mut ctx = Ctx::train(self.model.config.acoustic.dropout, seed);
            let mut g = Graph::new(&self.model.params);
            let (loss, report, stats) = loss_graph(&self.model, &mut g, ex, &self.config.weights, &mut ctx)?;
            if !report.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    detail: format!("loss on {}: {report:?}", ex.id),
                });
            }
            let grads = g.backward(loss).into_param_grads(&self.model.params);
            for (acc, gr) in total.values_mut().iter_mut().zip(grads.values()) {
                let mut gr = gr.clone();
                gr.scale_assign(scale);
                acc.add_assign(&gr);
            }
            reports.push(report);
            all_stats.push((stats, ex.input.len()));
        }
        for (stats, rows) in all_stats {
            self.model.update_running_stats(&stats, rows);
        }
        Ok((total, LossReport::mean(&reports)))
    }

    /// Applies already-computed gradients: clip, then one optimizer update.
    pub fn apply_gradients(&mut self, mut grads: ParamStore<T>) -> Result<()> {
        let step = self.step + 1;
        let norm = clip_global_norm(&mut grads, self.config.grad_clip_norm);
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("gradient norm {norm}"),
            });
        }
        let lr = self.config.learning_rate;
        match self.config.optimizer {
            OptimizerKind::Sgd => {
                let s = T::of(-lr);
                for (p, g) in self.model.params.values_mut().iter_mut().zip(grads.values()) {
                    for (pv, &gv) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *pv += s * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let st = &mut self.optimizer;
                st.t += 1;
                let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
                let c1 = 1.0 - ADAM_BETA1.powi(st.t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(st.t as i32);
                let step_size = T::of(lr * c2.sqrt() / c1);
                let eps = T::of(ADAM_EPS * c2.sqrt());
                let one = T::one();
                let params = self.model.params.values_mut();
                let ms = st.m.values_mut();
                let vs = st.v.values_mut();
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads.values())
                    .zip(ms.iter_mut())
                    .zip(vs.iter_mut())
                {
                    let (p, m, v) = (p.as_mut_slice(), m.as_mut_slice(), v.as_mut_slice());
                    for (j, &gv) in g.as_slice().iter().enumerate() {
                        m[j] = b1 * m[j] + (one - b1) * gv;
                        v[j] = b2 * v[j] + (one - b2) * gv * gv;
                        p[j] -= step_size * m[j] / (v[j].sqrt() + eps);
                    }
                }
            }
        }
        self.step = step;
        Ok(())
    }

    /// One gradient step on `batch`.
    pub fn train_step(&mut self, batch: &[&Example<T>]) -> Result<LossReport> {
        let (grads, report) = self.batch_gradients(batch)?;
        self.apply_gradients(grads)?;
        Ok(report)
    }

    /// Example indices for step `step` (1-based). Each epoch is a fresh
    /// permutation drawn from `(seed, epoch)`, so the order depends only on
    /// the step and a resumed run sees the same batches.
    pub fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        let b = self.config.batch_size.min(n);
        let start = (step - 1) as usize * b;
        let perm = |epoch: usize| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(mix64(
                self.config.seed ^ mix64(epoch as u64 + 1),
            )));
            p
        };
        let mut cached: Option<(usize, Vec<usize>)> = None;
        (start..start + b)
            .map(|k| {
                let epoch = k / n;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    cached = Some((epoch, perm(epoch)));
                }
                cached.as_ref().expect("set above").1[k % n]
            })
            .collect()
    }

    /// Trains until `max_steps`, continuing from the current step. With an
    /// output directory, appends `loss.tsv` and writes `step_NNNNNN.ckpt`
    /// every `checkpoint_every` steps plus at the end (also copied to
    /// `final.ckpt`). Returns the per-step reports of this call.
    pub fn fit(&mut self, examples: &[Example<T>], out_dir: Option<&Path>) -> Result<Vec<(u64, LossReport)>> {
        if examples.is_empty() {
            return Err(Error::Input("no training examples".into()));
        }
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(
                    std::fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(dir.join("loss.tsv"))?,
                )
            }
            None => None,
        };
        let mut history = Vec::new();
        while self.step < self.config.max_steps {
            let idx = self.batch_indices(self.step + 1, examples.len());
            let batch: Vec<&Example<T>> = idx.iter().map(|&i| &examples[i]).collect();
            let report = self.train_step(&batch)?;
            history.push((self.step, report));
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", report.to_tsv(self.step))?;
            }
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_every;
                if (every > 0 && self.step.is_multiple_of(every)) || self.step == self.config.max_steps {
                    self.save(&checkpoint_path(dir, self.step))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            let last = checkpoint_path(dir, self.step);
            if !last.exists() {
                self.save(&last)?;
            }
            std::fs::copy(&last, dir.join("final.ckpt"))?;
        }
        Ok(history)
    }

    /// Mean loss over examples with teacher forcing, eval mode.
    pub fn evaluate(&self, examples: &[Example<T>]) -> Result<LossReport> {
        let mut reports = Vec::new();
        for ex in examples {
            let (mel, pred) = self.model.forward(&ex.input, Some(&ex.targets), &mut Ctx::eval())?;
            reports.push(compute_loss(&mel, &pred, &ex.mel, &ex.targets, &self.config.weights)?);
        }
        Ok(LossReport::mean(&reports))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blocks: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        let cfg = self.experiment().to_text();
        blocks.push((
            "meta.config".into(),
            vec![cfg.len()],
            cfg.bytes().map(f64::from).collect(),
        ));
        if let Some(v) = self.model.vocab() {
            let cps: Vec<f64> = v.chars().iter().map(|&c| c as u32 as f64).collect();
            blocks.push(("meta.vocab".into(), vec![cps.len()], cps));
        }
        blocks.push(("meta.step".into(), vec![1], vec![self.step as f64]));
        blocks.push(("meta.adam_t".into(), vec![1], vec![self.optimizer.t as f64]));
        let stores = [
            ("param/", &self.model.params),
            ("buffer/", &self.model.buffers),
            ("adam.m/", &self.optimizer.m),
            ("adam.v/", &self.optimizer.v),
        ];
        for (prefix, store) in stores {
            for (name, m) in store.iter() {
                blocks.push((
                    format!("{prefix}{name}"),
                    vec![m.rows(), m.cols()],
                    m.as_slice().iter().map(|v| v.as_f64()).collect(),
                ));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, dims, data) in &blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for &d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Restores model, optimizer state and step counter.
    pub fn load(path: &Path) -> Result<Self> {
        let blocks = read_blocks(path)?;
        let find = |name: &str| blocks.iter().find(|b| b.0 == name);
        let bad = |reason: String| Error::format(path, reason);
        let cfg_block = find("meta.config").ok_or_else(|| bad("missing meta.config".into()))?;
        let text: Vec<u8> = cfg_block.2.iter().map(|&v| v as u8).collect();
        let exp = ExperimentConfig::parse(&String::from_utf8(text).map_err(|e| bad(e.to_string()))?)?;
        let vocab =
            find("meta.vocab").map(|b| CharVocab::from_chars(b.2.iter().filter_map(|&v| char::from_u32(v as u32))));
        let model = AcousticModel::new(exp.model.clone(), vocab, exp.train.seed)?;
        let mut trainer = Self::new(model, exp.train)?;
        let scalar = |name: &str| find(name).and_then(|b| b.2.first().copied()).unwrap_or(0.0) as u64;
        trainer.step = scalar("meta.step");
        trainer.optimizer.t = scalar("meta.adam_t");
        let stores = [
            ("param/", &mut trainer.model.params),
            ("buffer/", &mut trainer.model.buffers),
            ("adam.m/", &mut trainer.optimizer.m),
            ("adam.v/", &mut trainer.optimizer.v),
        ];
        for (prefix, store) in stores {
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                let name = format!("{prefix}{}", store.name(id));
                let (_, dims, data) = find(&name).ok_or_else(|| bad(format!("missing block {name}")))?;
                let target = store.get_mut(id);
                if dims[..] != [target.rows(), target.cols()] {
                    return Err(bad(format!(
                        "block {name} has dims {dims:?}, model expects {:?}",
                        target.shape()
                    )));
                }
                for (t, &v) in target.as_mut_slice().iter_mut().zip(data) {
                    *t = T::of(v);
                }
            }
        }
        Ok(trainer)
    }

    /// Loads a checkpoint for fine-tuning: parameters and running statistics
    /// are kept, while the step counter and optimizer state restart and the
    /// learning rate drops to `learning_rate`.
    pub fn fine_tune_from(path: &Path, learning_rate: f64, max_steps: u64) -> Result<Self> {
        let mut t = Self::load(path)?;
        t.step = 0;
        t.optimizer = OptimizerState::new(&t.model.params);
        t.config.learning_rate = learning_rate;
        t.config.max_steps = max_steps;
        t.config.validate()?;
        Ok(t)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}

type Block = (String, Vec<usize>, Vec<f64>);

/// Raw named blocks of a checkpoint file.
pub fn read_blocks(path: &Path) -> Result<Vec<Block>> {
    let bytes = std::fs::read(path)?;
    let bad = |reason: &str| Error::format(path, reason.to_string());
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a VTTSCKPT checkpoint"));
    }
    let mut pos = 8;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated checkpoint"))?;
        pos += n;
        Ok(s)
    };
    let word = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
    let version = word(take(4)?);
    if version != CHECKPOINT_VERSION as usize {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let count = word(take(4)?);
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let len = word(take(4)?);
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("block name is not UTF-8"))?;
        let ndim = word(take(4)?);
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(word(take(4)?));
        }
        let n: usize = dims.iter().product();
        let data = take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        blocks.push((name, dims, data));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after the last block"));
    }
    Ok(blocks)
}

/// Loads a manifest, builds a trainer (fresh, resumed or fine-tuned) and
/// trains it, writing checkpoints and `loss.tsv` to `out_dir`.
pub fn fit(
    exp: &ExperimentConfig,
    manifest: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    fine_tune: Option<&Path>,
) -> Result<Trainer<f32>> {
    let utterances = crate::data::load_utterances(manifest)?;
    let mut trainer = match (resume, fine_tune) {
        (Some(_), Some(_)) => return Err(Error::Config("resume and fine-tune are mutually exclusive".into())),
        (Some(p), None) => {
            let mut t = Trainer::load(p)?;
            t.config.max_steps = exp.train.max_steps;
            t
        }
        (None, Some(p)) => Trainer::fine_tune_from(p, FINE_TUNE_LEARNING_RATE, exp.train.max_steps)?,
        (None, None) => Trainer::from_experiment(exp, utterances.iter().map(|u| u.record.text.as_str()))?,
    };
    let examples = trainer.prepare(&utterances)?;
    trainer.fit(&examples, Some(out_dir))?;
    Ok(trainer)
}

/// Texts of a record list, for vocabularies and statistics.
pub fn texts(records: &[UtteranceRecord]) -> Vec<&str> {
    records.iter().map(|r| r.text.as_str()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acoustic::{AcousticConfig, ModelConfig};
    use crate::data::{make_synthetic_corpus, CorpusSpec};
    use crate::features::ExtractorConfig;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelConfig {
                extractor: ExtractorConfig {
                    output_dim: 16,
                    ..Default::default()
                },
                acoustic: AcousticConfig {
                    model_dim: 16,
                    ff_hidden: 16,
                    predictor_hidden: 16,
                    pitch_bins: 16,
                    energy_bins: 16,
                    ..Default::default()
                },
                ..Default::default()
            },
            train: TrainConfig {
                batch_size: 2,
                max_steps: 3,
                ..Default::default()
            },
        }
    }

    fn corpus() -> Vec<Utterance> {
        make_synthetic_corpus(&CorpusSpec {
            size: 4,
            min_len: 3,
            max_len: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn loss_identities() {
        let mel = Mat::<f64>::from_fn(4, 3, |r, c| (r + c) as f64);
        let t = VarianceTargets {
            durations: vec![1, 3],
            pitch: vec![0.5, -0.5],
            energy: vec![1.0, 2.0],
        };
        let pred = VariancePrediction {
            log_duration: log_durations(&t.durations),
            pitch: t.pitch.clone(),
            energy: t.energy.clone(),
            durations: t.durations.clone(),
        };
        let w = LossWeights::default();
        let same = compute_loss(&MelSpectrogram { frames: mel.clone() }, &pred, &mel, &t, &w).unwrap();
        assert_eq!(same, LossReport::default());
        let shifted = MelSpectrogram {
            frames: mel.map(|v| v + 1.0),
        };
        assert_eq!(compute_loss(&shifted, &pred, &mel, &t, &w).unwrap().mel_l1, 1.0);
        let zero = LossWeights {
            mel: 0.0,
            duration: 0.0,
            pitch: 0.0,
            energy: 0.0,
        };
        assert_eq!(compute_loss(&shifted, &pred, &mel, &t, &zero).unwrap().total, 0.0);
        assert!(compute_loss(&shifted, &pred, &Mat::zeros(3, 3), &t, &w).is_err());
    }

    #[test]
    fn graph_loss_matches_concrete_loss() {
        let u = corpus();
        let t = Trainer::<f64>::from_experiment(&tiny(), u.iter().map(|u| u.record.text.as_str())).unwrap();
        let ex = Example::new(&t.model, &u[0]).unwrap();
        let mut g = Graph::new(&t.model.params);
        let (_, report, _) = loss_graph(&t.model, &mut g, &ex, &t.config.weights, &mut Ctx::eval()).unwrap();
        assert!((report.total - t.evaluate(std::slice::from_ref(&ex)).unwrap().total).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let u = corpus();
        let mut exp = tiny();
        exp.train.learning_rate = 0.0;
        let mut t = Trainer::<f64>::from_experiment(&exp, u.iter().map(|u| u.record.text.as_str())).unwrap();
        let before = t.model.params.clone();
        let ex = t.prepare(&u).unwrap();
        t.train_step(&[&ex[0], &ex[1]]).unwrap();
        assert_eq!(t.step, 1);
        assert!(before.values().iter().zip(t.model.params.values()).all(|(a, b)| a == b));
    }

    #[test]
    fn batches_cover_each_epoch() {
        let t = Trainer::<f32>::from_experiment(&tiny(), ["ab"]).unwrap();
        let mut seen: Vec<usize> = (1..=3).flat_map(|s| t.batch_indices(s, 6)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
        assert_eq!(t.batch_indices(5, 6), t.batch_indices(5, 6));
    }
}
