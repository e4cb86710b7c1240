//! Flat `key = value` experiment configuration. `#` starts a comment;
//! unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::acoustic::{FrontEndKind, ModelConfig};
use crate::error::{Error, Result};
use crate::slicer::SliceSpec;
use crate::textimg::FontSource;
use crate::train::{OptimizerKind, TrainConfig};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for key {key}"))),
    }
}

impl ExperimentConfig {
    /// Sets one key. `model_dim` also sets the extractor's output size.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let a = &mut m.acoustic;
        let x = &mut m.extractor;
        let t = &mut self.train;
        match key {
            "front_end" => m.front_end = parse::<FrontEndKind>(key, value)?,
            "char_width" => m.render.char_width = parse(key, value)?,
            "char_height" => m.render.char_height = parse(key, value)?,
            "font_size" => m.render.font_size = parse(key, value)?,
            "font" => m.render.font = FontSource::from_str(value)?,
            "context_chars" => m.slice = SliceSpec::new(parse(key, value)?)?,
            "extractor_blocks" => x.num_blocks = parse(key, value)?,
            "extractor_channels" => x.channels = parse(key, value)?,
            "extractor_kernel" => x.kernel = parse(key, value)?,
            "extractor_padding" => x.padding = parse(key, value)?,
            "extractor_stride" => x.stride = parse(key, value)?,
            "extractor_pool" => x.pool = parse_bool(key, value)?,
            "bn_eps" => x.bn_eps = parse(key, value)?,
            "bn_momentum" => x.bn_momentum = parse(key, value)?,
            "model_dim" => {
                a.model_dim = parse(key, value)?;
                x.output_dim = a.model_dim;
            }
            "encoder_blocks" => a.encoder_blocks = parse(key, value)?,
            "decoder_blocks" => a.decoder_blocks = parse(key, value)?,
            "attention_heads" => a.attention_heads = parse(key, value)?,
            "ff_conv_kernel" => a.ff_conv_kernel = parse(key, value)?,
            "ff_hidden" => a.ff_hidden = parse(key, value)?,
            "predictor_hidden" => a.predictor_hidden = parse(key, value)?,
            "predictor_kernel" => a.predictor_kernel = parse(key, value)?,
            "n_mels" => a.n_mels = parse(key, value)?,
            "pitch_bins" => a.pitch_bins = parse(key, value)?,
            "energy_bins" => a.energy_bins = parse(key, value)?,
            "pitch_min" => a.pitch_min = parse(key, value)?,
            "pitch_max" => a.pitch_max = parse(key, value)?,
            "energy_min" => a.energy_min = parse(key, value)?,
            "energy_max" => a.energy_max = parse(key, value)?,
            "dropout" => a.dropout = parse(key, value)?,
            "max_frames" => a.max_frames = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "max_steps" => t.max_steps = parse(key, value)?,
            "grad_clip_norm" => t.grad_clip_norm = parse(key, value)?,
            "optimizer" => t.optimizer = parse::<OptimizerKind>(key, value)?,
            "mel_weight" => t.weights.mel = parse(key, value)?,
            "duration_weight" => t.weights.duration = parse(key, value)?,
            "pitch_weight" => t.weights.pitch = parse(key, value)?,
            "energy_weight" => t.weights.energy = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: key {k} given twice", i + 1)));
            }
            cfg.set(k, v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.render.validate()?;
        self.model.slice.validate()?;
        self.model.acoustic.validate()?;
        self.model.extractor.block_geometries(
            self.model.render.char_height,
            self.model.slice.window_width(self.model.render.char_width),
        )?;
        self.train.validate()
    }

    /// Every key, in a form [`ExperimentConfig::parse`] reads back exactly.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let a = &m.acoustic;
        let x = &m.extractor;
        let t = &self.train;
        let pairs: Vec<(&str, String)> = vec![
            ("front_end", m.front_end.to_string()),
            ("char_width", m.render.char_width.to_string()),
            ("char_height", m.render.char_height.to_string()),
            ("font_size", m.render.font_size.to_string()),
            ("font", m.render.font.to_string()),
            ("context_chars", m.slice.context_chars.to_string()),
            ("extractor_blocks", x.num_blocks.to_string()),
            ("extractor_channels", x.channels.to_string()),
            ("extractor_kernel", x.kernel.to_string()),
            ("extractor_padding", x.padding.to_string()),
            ("extractor_stride", x.stride.to_string()),
            ("extractor_pool", x.pool.to_string()),
            ("bn_eps", format!("{:?}", x.bn_eps)),
            ("bn_momentum", format!("{:?}", x.bn_momentum)),
            ("model_dim", a.model_dim.to_string()),
            ("encoder_blocks", a.encoder_blocks.to_string()),
            ("decoder_blocks", a.decoder_blocks.to_string()),
            ("attention_heads", a.attention_heads.to_string()),
            ("ff_conv_kernel", a.ff_conv_kernel.to_string()),
            ("ff_hidden", a.ff_hidden.to_string()),
            ("predictor_hidden", a.predictor_hidden.to_string()),
            ("predictor_kernel", a.predictor_kernel.to_string()),
            ("n_mels", a.n_mels.to_string()),
            ("pitch_bins", a.pitch_bins.to_string()),
            ("energy_bins", a.energy_bins.to_string()),
            ("pitch_min", format!("{:?}", a.pitch_min)),
            ("pitch_max", format!("{:?}", a.pitch_max)),
            ("energy_min", format!("{:?}", a.energy_min)),
            ("energy_max", format!("{:?}", a.energy_max)),
            ("dropout", format!("{:?}", a.dropout)),
            ("max_frames", a.max_frames.to_string()),
            ("seed", t.seed.to_string()),
            ("learning_rate", format!("{:?}", t.learning_rate)),
            ("batch_size", t.batch_size.to_string()),
            ("max_steps", t.max_steps.to_string()),
            ("grad_clip_norm", format!("{:?}", t.grad_clip_norm)),
            ("optimizer", t.optimizer.to_string()),
            ("mel_weight", format!("{:?}", t.weights.mel)),
            ("duration_weight", format!("{:?}", t.weights.duration)),
            ("pitch_weight", format!("{:?}", t.weights.pitch)),
            ("energy_weight", format!("{:?}", t.weights.energy)),
            ("checkpoint_every", t.checkpoint_every.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::default();
        c.set("model_dim", "64").unwrap();
        c.set("front_end", "baseline").unwrap();
        c.set("learning_rate", "0.0003").unwrap();
        c.set("font", "synthetic:2").unwrap();
        let back = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.model.extractor.output_dim, 64);
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        assert!(ExperimentConfig::parse("colour = red").is_err());
        assert!(ExperimentConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(ExperimentConfig::parse("seed 1").is_err());
        assert!(ExperimentConfig::parse("context_chars = 2").is_err());
    }

    #[test]
    fn comments_and_blanks() {
        let c = ExperimentConfig::parse("# toy\n\nseed = 9  # trailing\n").unwrap();
        assert_eq!(c.train.seed, 9);
    }
}
