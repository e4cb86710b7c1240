//! Convolutional visual feature extractor.
//!
//! Each slice goes through `B` blocks of conv → batch-norm → ReLU → 2×2
//! max-pool, is flattened and projected by a linear layer to one
//! `d`-dimensional feature per character. Batch statistics in training mode
//! are taken over the slices of one sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Conv2dSpec, Graph, ImageGeom, Var};
use crate::mat::Mat;
use crate::nn::{uniform, Ctx, Linear, Mode};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::slicer::SlicedSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorConfig {
    pub num_blocks: usize,
    pub channels: usize,
    pub kernel: usize,
    pub padding: usize,
    pub stride: usize,
    pub pool: bool,
    pub output_dim: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            num_blocks: 2,
            channels: 1,
            kernel: 3,
            padding: 1,
            stride: 1,
            pool: true,
            output_dim: 256,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ExtractorConfig {
    fn conv_spec(&self) -> Conv2dSpec {
        Conv2dSpec {
            kernel: self.kernel,
            padding: self.padding,
            stride: self.stride,
        }
    }

    /// Per-block output geometry for a `height × width` slice.
    pub fn block_geometries(&self, height: usize, width: usize) -> Result<Vec<ImageGeom>> {
        if self.num_blocks == 0 || self.channels == 0 || self.output_dim == 0 || self.kernel == 0 {
            return Err(Error::Config(
                "extractor blocks, channels, kernel and output_dim must be positive".into(),
            ));
        }
        let mut geom = ImageGeom {
            channels: 1,
            height,
            width,
        };
        let mut out = Vec::with_capacity(self.num_blocks);
        for b in 0..self.num_blocks {
            let conv = self
                .conv_spec()
                .output(geom, self.channels)
                .ok_or_else(|| Error::Config(format!("extractor block {b}: kernel larger than its input")))?;
            geom = if self.pool {
                ImageGeom {
                    channels: conv.channels,
                    height: conv.height / 2,
                    width: conv.width / 2,
                }
            } else {
                conv
            };
            if geom.height == 0 || geom.width == 0 {
                return Err(Error::Config(format!(
                    "extractor block {b} reduces a {height}x{width} slice to nothing; use fewer blocks"
                )));
            }
            out.push(geom);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    input: ImageGeom,
    conv_out: ImageGeom,
}

/// Layout of the extractor: which parameters it owns and the slice size it
/// is bound to.
#[derive(Clone, Debug)]
pub struct VisualExtractor {
    pub config: ExtractorConfig,
    pub input: ImageGeom,
    blocks: Vec<ConvBlock>,
    linear: Linear,
}

impl VisualExtractor {
    /// Registers parameters under `prefix` in `params` and running
    /// statistics in `buffers`.
    pub fn init<T: Scalar>(
        config: &ExtractorConfig,
        height: usize,
        width: usize,
        prefix: &str,
        params: &mut ParamStore<T>,
        buffers: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let geoms = config.block_geometries(height, width)?;
        let spec = config.conv_spec();
        let mut input = ImageGeom {
            channels: 1,
            height,
            width,
        };
        let first_input = input;
        let mut blocks = Vec::with_capacity(geoms.len());
        for (b, out_geom) in geoms.iter().enumerate() {
            let fan_in = input.channels * config.kernel * config.kernel;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let name = format!("{prefix}.block{b}");
            let conv_out = spec.output(input, config.channels).expect("validated geometry");
            blocks.push(ConvBlock {
                weight: params.insert(
                    format!("{name}.conv.weight"),
                    uniform(rng, config.channels, fan_in, bound),
                ),
                bias: params.insert(format!("{name}.conv.bias"), uniform(rng, 1, config.channels, bound)),
                gamma: params.insert(format!("{name}.bn.gamma"), Mat::filled(1, config.channels, T::one())),
                beta: params.insert(format!("{name}.bn.beta"), Mat::zeros(1, config.channels)),
                running_mean: buffers.insert(format!("{name}.bn.running_mean"), Mat::zeros(1, config.channels)),
                running_var: buffers.insert(
                    format!("{name}.bn.running_var"),
                    Mat::filled(1, config.channels, T::one()),
                ),
                input,
                conv_out,
            });
            input = *out_geom;
        }
        let linear = Linear::init(
            params,
            &format!("{prefix}.linear"),
            input.numel(),
            config.output_dim,
            rng,
        );
        Ok(Self {
            config: config.clone(),
            input: first_input,
            blocks,
            linear,
        })
    }

    pub fn flattened_size(&self) -> usize {
        let last = self.blocks.last().expect("at least one block");
        if self.config.pool {
            ImageGeom {
                channels: last.conv_out.channels,
                height: last.conv_out.height / 2,
                width: last.conv_out.width / 2,
            }
            .numel()
        } else {
            last.conv_out.numel()
        }
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn check_input(&self, slices: &SlicedSequence) -> Result<()> {
        let (h, w) = (slices.char_height, slices.window_width());
        if (h, w) != (self.input.height, self.input.width) {
            return Err(Error::shape(
                "extractor slice",
                format!("{}x{}", self.input.height, self.input.width),
                format!("{h}x{w}"),
            ));
        }
        Ok(())
    }

    /// `batch` is `n × h·w` (one flattened slice per row); returns `n × d`
    /// and, in training mode, the batch statistics of every block.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        batch: Var,
        buffers: &ParamStore<T>,
        ctx: &Ctx,
    ) -> (Var, Vec<BatchStats<T>>) {
        let spec = self.config.conv_spec();
        let eps = T::of(self.config.bn_eps);
        let mut x = batch;
        let mut stats = Vec::new();
        for block in &self.blocks {
            let w = g.param(block.weight);
            let b = g.param(block.bias);
            x = g.conv2d(x, w, b, block.input, spec);
            let gamma = g.param(block.gamma);
            let beta = g.param(block.beta);
            x = match ctx.mode {
                Mode::Train => {
                    let (y, s) = g.batch_norm_train(x, gamma, beta, block.conv_out, eps);
                    stats.push(s);
                    y
                }
                Mode::Eval => g.batch_norm_eval(
                    x,
                    gamma,
                    beta,
                    block.conv_out,
                    buffers.get(block.running_mean).as_slice(),
                    buffers.get(block.running_var).as_slice(),
                    eps,
                ),
            };
            x = g.relu(x);
            if self.config.pool {
                x = g.max_pool2(x, block.conv_out).0;
            }
        }
        (self.linear.forward(g, x), stats)
    }

    /// Folds one set of batch statistics into the running estimates
    /// (unbiased variance, exponential moving average).
    pub fn update_running_stats<T: Scalar>(
        &self,
        buffers: &mut ParamStore<T>,
        stats: &[BatchStats<T>],
        batch_rows: usize,
    ) {
        self.fold_running_stats(buffers, stats, batch_rows, self.config.bn_momentum);
    }

    /// Moving-average update with an explicit momentum; `1.0` replaces the
    /// running estimates with the batch statistics.
    pub fn fold_running_stats<T: Scalar>(
        &self,
        buffers: &mut ParamStore<T>,
        stats: &[BatchStats<T>],
        batch_rows: usize,
        momentum: f64,
    ) {
        let m = T::of(momentum);
        for (block, s) in self.blocks.iter().zip(stats) {
            let count = (batch_rows * block.conv_out.plane()) as f64;
            let correction = T::of(if count > 1.0 { count / (count - 1.0) } else { 1.0 });
            for (r, &v) in buffers
                .get_mut(block.running_mean)
                .as_mut_slice()
                .iter_mut()
                .zip(&s.mean)
            {
                *r = (T::one() - m) * *r + m * v;
            }
            for (r, &v) in buffers.get_mut(block.running_var).as_mut_slice().iter_mut().zip(&s.var) {
                *r = (T::one() - m) * *r + m * v * correction;
            }
        }
    }
}

/// Features for one line of text.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatureSequence<T> {
    /// `n × d`.
    pub features: Mat<T>,
    pub context_chars: usize,
    pub char_width: usize,
    pub char_height: usize,
}

/// Standalone extractor with its own parameters.
#[derive(Clone, Debug)]
pub struct ExtractorParams<T> {
    pub extractor: VisualExtractor,
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
}

/// Deterministic initialization for slices of `height × width` pixels.
pub fn init_params<T: Scalar>(
    config: &ExtractorConfig,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<ExtractorParams<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    let extractor = VisualExtractor::init(config, height, width, "extractor", &mut params, &mut buffers, &mut rng)?;
    Ok(ExtractorParams {
        extractor,
        params,
        buffers,
    })
}

impl<T: Scalar> ExtractorParams<T> {
    fn run(&self, slices: &SlicedSequence, mode: Mode) -> Result<(Mat<T>, Vec<BatchStats<T>>)> {
        self.extractor.check_input(slices)?;
        let mut g = Graph::new(&self.params);
        let x = g.constant(slices.to_batch());
        let ctx = if mode == Mode::Train {
            Ctx::train(0.0, 0)
        } else {
            Ctx::eval()
        };
        let (y, stats) = self.extractor.forward(&mut g, x, &self.buffers, &ctx);
        Ok((g.value(y).clone(), stats))
    }

    fn wrap(&self, slices: &SlicedSequence, features: Mat<T>) -> VisualFeatureSequence<T> {
        VisualFeatureSequence {
            features,
            context_chars: slices.spec.context_chars,
            char_width: slices.char_width,
            char_height: slices.char_height,
        }
    }

    /// Inference with running statistics; read-only.
    pub fn extract_eval(&self, slices: &SlicedSequence) -> Result<VisualFeatureSequence<T>> {
        let (f, _) = self.run(slices, Mode::Eval)?;
        Ok(self.wrap(slices, f))
    }

    /// Training-mode pass: batch statistics are used and folded into the
    /// running estimates.
    pub fn extract_train(&mut self, slices: &SlicedSequence) -> Result<VisualFeatureSequence<T>> {
        let (f, stats) = self.run(slices, Mode::Train)?;
        if !slices.is_empty() {
            self.extractor
                .update_running_stats(&mut self.buffers, &stats, slices.len());
        }
        Ok(self.wrap(slices, f))
    }
}

pub fn extract<T: Scalar>(
    slices: &SlicedSequence,
    params: &mut ExtractorParams<T>,
    mode: Mode,
) -> Result<VisualFeatureSequence<T>> {
    match mode {
        Mode::Eval => params.extract_eval(slices),
        Mode::Train => params.extract_train(slices),
    }
}

/// Parameter gradients of `sum(upstream ∘ extract(slices))`.
pub fn extract_grad<T: Scalar>(
    slices: &SlicedSequence,
    params: &ExtractorParams<T>,
    mode: Mode,
    upstream: &Mat<T>,
) -> Result<ParamStore<T>> {
    params.extractor.check_input(slices)?;
    let expected = (slices.len(), params.extractor.output_dim());
    if upstream.shape() != expected {
        return Err(Error::shape(
            "upstream gradient",
            format!("{}x{}", expected.0, expected.1),
            format!("{}x{}", upstream.rows(), upstream.cols()),
        ));
    }
    let mut g = Graph::new(&params.params);
    let x = g.constant(slices.to_batch());
    let ctx = if mode == Mode::Train {
        Ctx::train(0.0, 0)
    } else {
        Ctx::eval()
    };
    let (y, _) = params.extractor.forward(&mut g, x, &params.buffers, &ctx);
    Ok(g.backward_with(y, upstream.clone()).into_param_grads(&params.params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slicer::{slice, SliceSpec};
    use crate::textimg::{render, RenderSpec};

    fn sliced(text: &str, c: usize) -> SlicedSequence {
        let img = render(text, &RenderSpec::default(), &[]).unwrap();
        slice(&img, SliceSpec::new(c).unwrap()).unwrap()
    }

    #[test]
    fn geometry_for_default_config() {
        let g = ExtractorConfig::default().block_geometries(30, 90).unwrap();
        assert_eq!((g[1].height, g[1].width), (7, 22));
        let too_deep = ExtractorConfig {
            num_blocks: 6,
            ..Default::default()
        };
        assert!(matches!(too_deep.block_geometries(30, 30), Err(Error::Config(_))));
    }

    #[test]
    fn same_padding_keeps_size() {
        let spec = ExtractorConfig::default().conv_spec();
        let geom = ImageGeom {
            channels: 1,
            height: 30,
            width: 90,
        };
        assert_eq!(spec.output(geom, 1), Some(geom));
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params::<f64>(&ExtractorConfig::default(), 30, 90, 1).unwrap();
        let b = init_params::<f64>(&ExtractorConfig::default(), 30, 90, 1).unwrap();
        let c = init_params::<f64>(&ExtractorConfig::default(), 30, 90, 2).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        assert_eq!(a.extractor.flattened_size(), 7 * 22);
    }

    #[test]
    fn output_shape_and_blank_rows() {
        let p = init_params::<f32>(&ExtractorConfig::default(), 30, 90, 3).unwrap();
        let f = p.extract_eval(&sliced("ab  c", 3)).unwrap();
        assert_eq!(f.features.shape(), (5, 256));
        assert!(f.features.all_finite());
        // slices 2 and 3 see " ", " ", neighbours b/c: not blank. Use c=1:
        let f1 = init_params::<f32>(&ExtractorConfig::default(), 30, 30, 3)
            .unwrap()
            .extract_eval(&sliced("a  b", 1))
            .unwrap();
        assert_eq!(f1.features.row(1), f1.features.row(2));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = init_params::<f32>(&ExtractorConfig::default(), 30, 90, 3).unwrap();
        let err = p.extract_eval(&sliced("ab", 5)).unwrap_err();
        assert!(err.to_string().contains("30x90"), "{err}");
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut p = init_params::<f64>(&ExtractorConfig::default(), 30, 90, 3).unwrap();
        let before = p.buffers.clone();
        extract(&sliced("abc", 3), &mut p, Mode::Train).unwrap();
        assert_ne!(before, p.buffers);
        assert!(p.buffers.values()[1].as_slice()[0] > 0.0);
        let after = p.buffers.clone();
        extract(&sliced("abc", 3), &mut p, Mode::Eval).unwrap();
        assert_eq!(after, p.buffers);
    }

    #[test]
    fn zero_upstream_gives_zero_grads_and_bias_identity() {
        let p = init_params::<f64>(&ExtractorConfig::default(), 30, 90, 4).unwrap();
        let s = sliced("xyz", 3);
        let zero = extract_grad(&s, &p, Mode::Train, &Mat::zeros(3, 256)).unwrap();
        assert!(zero.values().iter().all(|m| m.max_abs() == 0.0));
        let up = Mat::from_fn(3, 256, |r, c| (r as f64 + 1.0) * ((c % 7) as f64 - 3.0));
        let grads = extract_grad(&s, &p, Mode::Train, &up).unwrap();
        let bias = grads.get(p.params.id("extractor.linear.bias").unwrap());
        for c in 0..256 {
            let col: f64 = (0..3).map(|r| up[(r, c)]).sum();
            assert!((bias[(0, c)] - col).abs() < 1e-12);
        }
    }
}
