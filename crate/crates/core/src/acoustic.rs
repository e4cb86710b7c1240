//! Non-autoregressive acoustic model: encoder, variance adapter (duration,
//! pitch, energy), length regulator and decoder, behind either the visual
//! front-end or a character lookup table.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{ExtractorConfig, VisualExtractor};
use crate::graph::{BatchStats, Graph, Var};
use crate::mat::Mat;
use crate::nn::{normal, positional_encoding, Ctx, FftBlock, Linear, VariancePredictor};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::slicer::{slice, SliceSpec, SlicedSequence};
use crate::textimg::{render_chars, Decoration, RenderSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct AcousticConfig {
    pub model_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub attention_heads: usize,
    pub ff_conv_kernel: usize,
    pub ff_hidden: usize,
    pub predictor_hidden: usize,
    pub predictor_kernel: usize,
    pub n_mels: usize,
    pub pitch_bins: usize,
    pub energy_bins: usize,
    pub pitch_min: f64,
    pub pitch_max: f64,
    pub energy_min: f64,
    pub energy_max: f64,
    pub dropout: f64,
    pub max_frames: usize,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        Self {
            model_dim: 256,
            encoder_blocks: 2,
            decoder_blocks: 2,
            attention_heads: 2,
            ff_conv_kernel: 9,
            ff_hidden: 256,
            predictor_hidden: 256,
            predictor_kernel: 3,
            n_mels: 80,
            pitch_bins: 256,
            energy_bins: 256,
            pitch_min: -2.0,
            pitch_max: 2.0,
            energy_min: 0.0,
            energy_max: 4.0,
            dropout: 0.1,
            max_frames: 2000,
        }
    }
}

impl AcousticConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model_dim", self.model_dim),
            ("encoder_blocks", self.encoder_blocks),
            ("decoder_blocks", self.decoder_blocks),
            ("attention_heads", self.attention_heads),
            ("ff_hidden", self.ff_hidden),
            ("predictor_hidden", self.predictor_hidden),
            ("n_mels", self.n_mels),
            ("max_frames", self.max_frames),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.attention_heads) {
            return Err(Error::Config("model_dim must be divisible by attention_heads".into()));
        }
        if self.ff_conv_kernel.is_multiple_of(2) || self.predictor_kernel.is_multiple_of(2) {
            return Err(Error::Config("convolution kernels must be odd".into()));
        }
        if self.pitch_bins < 2 || self.energy_bins < 2 {
            return Err(Error::Config("pitch and energy need at least two bins".into()));
        }
        if self.pitch_max <= self.pitch_min || self.energy_max <= self.energy_min {
            return Err(Error::Config("variance ranges must have max > min".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn pitch_edges(&self) -> Vec<f64> {
        bin_edges(self.pitch_min, self.pitch_max, self.pitch_bins)
    }

    pub fn energy_edges(&self) -> Vec<f64> {
        bin_edges(self.energy_min, self.energy_max, self.energy_bins)
    }
}

/// `bins - 1` strictly increasing interior edges, evenly spaced.
pub fn bin_edges(min: f64, max: f64, bins: usize) -> Vec<f64> {
    (1..bins).map(|i| min + (max - min) * i as f64 / bins as f64).collect()
}

/// Bin index of `value`: the number of edges `<= value`, so a value exactly
/// on an edge lands in the higher bin.
pub fn bucketize(value: f64, edges: &[f64]) -> usize {
    edges.partition_point(|&e| e <= value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrontEndKind {
    Visual,
    Baseline,
}

impl std::fmt::Display for FrontEndKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FrontEndKind::Visual => "visual",
            FrontEndKind::Baseline => "baseline",
        })
    }
}

impl std::str::FromStr for FrontEndKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual" => Ok(FrontEndKind::Visual),
            "baseline" => Ok(FrontEndKind::Baseline),
            _ => Err(Error::Config(format!(
                "front_end must be visual or baseline, got {s:?}"
            ))),
        }
    }
}

/// Everything needed to rebuild a model's layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub front_end: FrontEndKind,
    pub render: RenderSpec,
    pub slice: SliceSpec,
    pub extractor: ExtractorConfig,
    pub acoustic: AcousticConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            front_end: FrontEndKind::Visual,
            render: RenderSpec::default(),
            slice: SliceSpec::default(),
            extractor: ExtractorConfig::default(),
            acoustic: AcousticConfig::default(),
        }
    }
}

/// Character → id table for the lookup front-end. Id 0 is "unknown".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharVocab {
    ids: BTreeMap<char, usize>,
}

impl CharVocab {
    pub const UNKNOWN: usize = 0;

    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let mut set: Vec<char> = chars.into_iter().collect();
        set.sort_unstable();
        set.dedup();
        Self {
            ids: set.into_iter().enumerate().map(|(i, c)| (c, i + 1)).collect(),
        }
    }

    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::from_chars(texts.into_iter().flat_map(str::chars))
    }

    pub fn id(&self, ch: char) -> usize {
        self.ids.get(&ch).copied().unwrap_or(Self::UNKNOWN)
    }

    pub fn contains(&self, ch: char) -> bool {
        self.ids.contains_key(&ch)
    }

    /// Table rows including the unknown row.
    pub fn size(&self) -> usize {
        self.ids.len() + 1
    }

    /// Known characters in id order.
    pub fn chars(&self) -> Vec<char> {
        self.ids.keys().copied().collect()
    }
}

#[derive(Clone, Debug)]
pub struct LookupEmbedding {
    pub table: ParamId,
    pub vocab: CharVocab,
}

impl LookupEmbedding {
    /// `n × d` rows of the table; unknown characters share row 0.
    pub fn embed<T: Scalar>(&self, text: &[char], params: &ParamStore<T>) -> Mat<T> {
        let table = params.get(self.table);
        let mut out = Mat::zeros(text.len(), table.cols());
        for (i, &c) in text.iter().enumerate() {
            out.row_mut(i).copy_from_slice(table.row(self.vocab.id(c)));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub enum FrontEnd {
    Visual(VisualExtractor),
    Baseline(LookupEmbedding),
}

/// Prepared model input.
#[derive(Clone, Debug, PartialEq)]
pub enum FrontInput {
    Slices(SlicedSequence),
    Chars(Vec<char>),
}

impl FrontInput {
    pub fn len(&self) -> usize {
        match self {
            FrontInput::Slices(s) => s.len(),
            FrontInput::Chars(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ground-truth prosody for one utterance, one entry per character.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceTargets {
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

impl VarianceTargets {
    pub fn total_frames(&self) -> usize {
        self.durations.iter().sum()
    }
}

/// Predicted prosody plus the durations that drove length regulation.
#[derive(Clone, Debug, PartialEq)]
pub struct VariancePrediction {
    /// `ln(duration + 1)`.
    pub log_duration: Vec<f64>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub durations: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram<T> {
    /// `T × n_mels` log-amplitude frames.
    pub frames: Mat<T>,
}

impl<T: Scalar> MelSpectrogram<T> {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

/// Graph handles of one forward pass.
pub struct ForwardOut<T> {
    pub features: Var,
    pub mel: Var,
    pub log_duration: Var,
    pub pitch: Var,
    pub energy: Var,
    pub durations: Vec<usize>,
    pub bn_stats: Vec<BatchStats<T>>,
}

/// Integer durations from predicted `ln(d + 1)`: round half up, clamp at
/// zero, at least one frame in total, at most `max_frames`.
pub fn durations_from_log(log_duration: &[f64], max_frames: usize) -> Vec<usize> {
    let mut d: Vec<usize> = log_duration
        .iter()
        .map(|&p| (p.exp() - 1.0 + 0.5).floor().max(0.0) as usize)
        .collect();
    if !d.is_empty() && d.iter().sum::<usize>() == 0 {
        let best = log_duration
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > log_duration[b] { i } else { b });
        d[best] = 1;
    }
    let mut total = 0usize;
    for v in &mut d {
        let room = max_frames.saturating_sub(total);
        *v = (*v).min(room);
        total += *v;
    }
    d
}

/// Row indices realizing the length regulator: row `i` repeated `d[i]` times.
pub fn regulator_index(durations: &[usize]) -> Vec<usize> {
    durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
        .collect()
}

pub fn length_regulate<T: Scalar>(hidden: &Mat<T>, durations: &[usize]) -> Result<Mat<T>> {
    if durations.len() != hidden.rows() {
        return Err(Error::shape("durations", hidden.rows(), durations.len()));
    }
    let index = regulator_index(durations);
    if index.is_empty() {
        return Err(Error::Input("all durations are zero".into()));
    }
    let mut out = Mat::zeros(index.len(), hidden.cols());
    for (r, &i) in index.iter().enumerate() {
        out.row_mut(r).copy_from_slice(hidden.row(i));
    }
    Ok(out)
}

/// Layout and parameters of a complete acoustic model.
#[derive(Clone, Debug)]
pub struct AcousticModel<T> {
    pub config: ModelConfig,
    pub front_end: FrontEnd,
    encoder: Vec<FftBlock>,
    duration: VariancePredictor,
    pitch: VariancePredictor,
    energy: VariancePredictor,
    pitch_embedding: ParamId,
    energy_embedding: ParamId,
    decoder: Vec<FftBlock>,
    mel_linear: Linear,
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
}

const FRONT_END_STREAM: u64 = 0xF0E1_D2C3;

impl<T: Scalar> AcousticModel<T> {
    /// Builds and initializes a model. The front-end draws from its own
    /// random stream, so for a fixed seed the downstream parameters are the
    /// same whichever front-end is used. `vocab` is required for the
    /// baseline and ignored otherwise.
    pub fn new(config: ModelConfig, vocab: Option<CharVocab>, seed: u64) -> Result<Self> {
        config.render.validate()?;
        config.slice.validate()?;
        config.acoustic.validate()?;
        let ac = &config.acoustic;
        let d = ac.model_dim;
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut front_rng = ChaCha8Rng::seed_from_u64(seed ^ FRONT_END_STREAM);
        let front_end = match config.front_end {
            FrontEndKind::Visual => {
                if config.extractor.output_dim != d {
                    return Err(Error::Config(format!(
                        "extractor output_dim {} differs from model_dim {d}",
                        config.extractor.output_dim
                    )));
                }
                FrontEnd::Visual(VisualExtractor::init(
                    &config.extractor,
                    config.render.char_height,
                    config.slice.window_width(config.render.char_width),
                    "extractor",
                    &mut params,
                    &mut buffers,
                    &mut front_rng,
                )?)
            }
            FrontEndKind::Baseline => {
                let vocab = vocab.ok_or_else(|| Error::Config("baseline front-end needs a vocabulary".into()))?;
                let table = params.insert("embedding.table", normal(&mut front_rng, vocab.size(), d, 1.0));
                FrontEnd::Baseline(LookupEmbedding { table, vocab })
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = |store: &mut ParamStore<T>, name: String, rng: &mut ChaCha8Rng| {
            FftBlock::init(
                store,
                &name,
                d,
                ac.attention_heads,
                ac.ff_hidden,
                ac.ff_conv_kernel,
                rng,
            )
        };
        let encoder = (0..ac.encoder_blocks)
            .map(|i| block(&mut params, format!("encoder.block{i}"), &mut rng))
            .collect();
        let predictor = |store: &mut ParamStore<T>, name: &str, rng: &mut ChaCha8Rng| {
            VariancePredictor::init(store, name, d, ac.predictor_hidden, ac.predictor_kernel, rng)
        };
        let duration = predictor(&mut params, "variance.duration", &mut rng);
        let pitch = predictor(&mut params, "variance.pitch", &mut rng);
        let energy = predictor(&mut params, "variance.energy", &mut rng);
        let pitch_embedding = params.insert("variance.pitch_embedding", normal(&mut rng, ac.pitch_bins, d, 1.0));
        let energy_embedding = params.insert("variance.energy_embedding", normal(&mut rng, ac.energy_bins, d, 1.0));
        let decoder = (0..ac.decoder_blocks)
            .map(|i| block(&mut params, format!("decoder.block{i}"), &mut rng))
            .collect();
        let mel_linear = Linear::init(&mut params, "decoder.mel_linear", d, ac.n_mels, &mut rng);
        Ok(Self {
            config,
            front_end,
            encoder,
            duration,
            pitch,
            energy,
            pitch_embedding,
            energy_embedding,
            decoder,
            mel_linear,
            params,
            buffers,
        })
    }

    pub fn vocab(&self) -> Option<&CharVocab> {
        match &self.front_end {
            FrontEnd::Baseline(e) => Some(&e.vocab),
            FrontEnd::Visual(_) => None,
        }
    }

    /// Renders and slices text for the visual front-end, or passes the
    /// characters through for the baseline.
    pub fn prepare(&self, text: &[char], decorations: &[Decoration], variant: u32) -> Result<FrontInput> {
        match self.front_end {
            FrontEnd::Visual(_) => {
                let spec = self.config.render.with_variant(variant);
                let image = render_chars(text, &spec, decorations)?;
                Ok(FrontInput::Slices(slice(&image, self.config.slice)?))
            }
            FrontEnd::Baseline(_) => Ok(FrontInput::Chars(text.to_vec())),
        }
    }

    /// Front-end output `n × d` as a graph node.
    pub fn features_graph(
        &self,
        g: &mut Graph<'_, T>,
        input: &FrontInput,
        ctx: &Ctx,
    ) -> Result<(Var, Vec<BatchStats<T>>)> {
        match (&self.front_end, input) {
            (FrontEnd::Visual(ex), FrontInput::Slices(s)) => {
                ex.check_input(s)?;
                let x = g.constant(s.to_batch());
                Ok(ex.forward(g, x, &self.buffers, ctx))
            }
            (FrontEnd::Baseline(emb), FrontInput::Chars(text)) => {
                let table = g.param(emb.table);
                let ids = text.iter().map(|&c| emb.vocab.id(c)).collect();
                Ok((g.gather(table, ids), Vec::new()))
            }
            _ => Err(Error::Input("input kind does not match the model's front-end".into())),
        }
    }

    fn check_width(&self, g: &Graph<'_, T>, x: Var) -> Result<()> {
        let (n, w) = g.value(x).shape();
        if w != self.config.acoustic.model_dim {
            return Err(Error::shape("encoder input width", self.config.acoustic.model_dim, w));
        }
        if n == 0 {
            return Err(Error::Input("empty character sequence".into()));
        }
        Ok(())
    }

    fn stack(&self, g: &mut Graph<'_, T>, blocks: &[FftBlock], x: Var, ctx: &mut Ctx) -> Var {
        let (len, d) = g.value(x).shape();
        let pe = g.constant(positional_encoding(len, d));
        let mut h = g.add(x, pe);
        for b in blocks {
            h = b.forward(g, h, ctx);
        }
        h
    }

    pub fn encode_graph(&self, g: &mut Graph<'_, T>, features: Var, ctx: &mut Ctx) -> Result<Var> {
        self.check_width(g, features)?;
        Ok(self.stack(g, &self.encoder, features, ctx))
    }

    /// Predicts prosody, adds pitch/energy embeddings and regulates length.
    /// Returns `(regulated, log_duration, pitch, energy, durations)`.
    #[allow(clippy::type_complexity)]
    pub fn variance_graph(
        &self,
        g: &mut Graph<'_, T>,
        hidden: Var,
        targets: Option<&VarianceTargets>,
        ctx: &mut Ctx,
    ) -> Result<(Var, Var, Var, Var, Vec<usize>)> {
        let n = g.value(hidden).rows();
        if let Some(t) = targets {
            if t.durations.len() != n || t.pitch.len() != n || t.energy.len() != n {
                return Err(Error::shape("variance targets", n, t.durations.len()));
            }
            if t.total_frames() == 0 {
                return Err(Error::Input("all target durations are zero".into()));
            }
        }
        let ac = &self.config.acoustic;
        let log_duration = self.duration.forward(g, hidden, ctx);
        let pitch = self.pitch.forward(g, hidden, ctx);
        let pitch_values: Vec<f64> = match targets {
            Some(t) => t.pitch.clone(),
            None => column(g.value(pitch)),
        };
        let edges = ac.pitch_edges();
        let bins = pitch_values.iter().map(|&v| bucketize(v, &edges)).collect();
        let table = g.param(self.pitch_embedding);
        let emb = g.gather(table, bins);
        let x = g.add(hidden, emb);

        let energy = self.energy.forward(g, x, ctx);
        let energy_values: Vec<f64> = match targets {
            Some(t) => t.energy.clone(),
            None => column(g.value(energy)),
        };
        let edges = ac.energy_edges();
        let bins = energy_values.iter().map(|&v| bucketize(v, &edges)).collect();
        let table = g.param(self.energy_embedding);
        let emb = g.gather(table, bins);
        let x = g.add(x, emb);

        let durations = match targets {
            Some(t) => t.durations.clone(),
            None => durations_from_log(&column(g.value(log_duration)), ac.max_frames),
        };
        let regulated = g.gather(x, regulator_index(&durations));
        Ok((regulated, log_duration, pitch, energy, durations))
    }

    pub fn decode_graph(&self, g: &mut Graph<'_, T>, regulated: Var, ctx: &mut Ctx) -> Result<Var> {
        let (frames, w) = g.value(regulated).shape();
        if frames == 0 {
            return Err(Error::Input("decoder needs at least one frame".into()));
        }
        if w != self.config.acoustic.model_dim {
            return Err(Error::shape("decoder input width", self.config.acoustic.model_dim, w));
        }
        let h = self.stack(g, &self.decoder, regulated, ctx);
        Ok(self.mel_linear.forward(g, h))
    }

    /// Full pass: front-end → encoder → variance adapter → decoder.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_, T>,
        input: &FrontInput,
        targets: Option<&VarianceTargets>,
        ctx: &mut Ctx,
    ) -> Result<ForwardOut<T>> {
        let (features, bn_stats) = self.features_graph(g, input, ctx)?;
        let hidden = self.encode_graph(g, features, ctx)?;
        let (regulated, log_duration, pitch, energy, durations) = self.variance_graph(g, hidden, targets, ctx)?;
        let mel = self.decode_graph(g, regulated, ctx)?;
        Ok(ForwardOut {
            features,
            mel,
            log_duration,
            pitch,
            energy,
            durations,
            bn_stats,
        })
    }

    /// Eval-mode front-end output.
    pub fn features(&self, input: &FrontInput) -> Result<Mat<T>> {
        let mut g = Graph::new(&self.params);
        let (f, _) = self.features_graph(&mut g, input, &Ctx::eval())?;
        Ok(g.value(f).clone())
    }

    /// Eval-mode encoder on an `n × d` feature matrix.
    pub fn encode(&self, features: &Mat<T>) -> Result<Mat<T>> {
        let mut g = Graph::new(&self.params);
        let x = g.constant(features.clone());
        let h = self.encode_graph(&mut g, x, &mut Ctx::eval())?;
        Ok(g.value(h).clone())
    }

    /// Eval-mode variance adapter on encoder output.
    pub fn variance_adapt(
        &self,
        hidden: &Mat<T>,
        targets: Option<&VarianceTargets>,
    ) -> Result<(Mat<T>, VariancePrediction)> {
        let mut g = Graph::new(&self.params);
        let x = g.constant(hidden.clone());
        let (reg, ld, p, e, durations) = self.variance_graph(&mut g, x, targets, &mut Ctx::eval())?;
        Ok((
            g.value(reg).clone(),
            VariancePrediction {
                log_duration: column(g.value(ld)),
                pitch: column(g.value(p)),
                energy: column(g.value(e)),
                durations,
            },
        ))
    }

    /// Eval-mode decoder on `T × d` regulated hidden states.
    pub fn decode(&self, regulated: &Mat<T>) -> Result<MelSpectrogram<T>> {
        let mut g = Graph::new(&self.params);
        let x = g.constant(regulated.clone());
        let mel = self.decode_graph(&mut g, x, &mut Ctx::eval())?;
        Ok(MelSpectrogram {
            frames: g.value(mel).clone(),
        })
    }

    /// End-to-end pass returning concrete values.
    pub fn forward(
        &self,
        input: &FrontInput,
        targets: Option<&VarianceTargets>,
        ctx: &mut Ctx,
    ) -> Result<(MelSpectrogram<T>, VariancePrediction)> {
        let mut g = Graph::new(&self.params);
        let out = self.forward_graph(&mut g, input, targets, ctx)?;
        Ok((
            MelSpectrogram {
                frames: g.value(out.mel).clone(),
            },
            VariancePrediction {
                log_duration: column(g.value(out.log_duration)),
                pitch: column(g.value(out.pitch)),
                energy: column(g.value(out.energy)),
                durations: out.durations,
            },
        ))
    }

    /// Eval-mode synthesis from predicted prosody.
    pub fn infer(&self, input: &FrontInput) -> Result<(MelSpectrogram<T>, VariancePrediction)> {
        self.forward(input, None, &mut Ctx::eval())
    }

    /// Folds training-mode batch statistics into the extractor's running
    /// estimates; no-op for the baseline.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>], rows: usize) {
        if let FrontEnd::Visual(ex) = &self.front_end {
            ex.update_running_stats(&mut self.buffers, stats, rows);
        }
    }

    /// Replaces the extractor's running statistics with the batch statistics
    /// of `input` (all slices as one batch); no-op for the baseline.
    pub fn calibrate_batch_norm(&mut self, input: &FrontInput) -> Result<()> {
        let FrontEnd::Visual(ex) = &self.front_end else {
            return Ok(());
        };
        let mut g = Graph::new(&self.params);
        let (_, stats) = self.features_graph(&mut g, input, &Ctx::train(0.0, 0))?;
        ex.fold_running_stats(&mut self.buffers, &stats, input.len(), 1.0);
        Ok(())
    }

    /// Names and shapes of every parameter outside the front-end.
    pub fn downstream_shapes(&self) -> Vec<(String, (usize, usize))> {
        self.params
            .iter()
            .filter(|(n, _)| !n.starts_with("extractor.") && !n.starts_with("embedding."))
            .map(|(n, m)| (n.to_string(), m.shape()))
            .collect()
    }
}

fn column<T: Scalar>(m: &Mat<T>) -> Vec<f64> {
    m.as_slice().iter().map(|v| v.as_f64()).collect()
}
