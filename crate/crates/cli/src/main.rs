//! `vtts` command-line tool.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vtts::acoustic::FrontEndKind;
use vtts::audio::{peak_normalize, write_wav, MelAnalyzer, SAMPLE_RATE};
use vtts::config::ExperimentConfig;
use vtts::data::{
    cer, load_manifest, make_synthetic_corpus, write_corpus, CorpusSpec, CorpusStats, EmphasisMode, VariantProsody,
};
use vtts::eval::{eval_emotion, eval_emphasis, eval_oov};
use vtts::slicer::{slice, SliceSpec};
use vtts::tensorfile::write_mat;
use vtts::textimg::{parse_decorations, render, DecorationKind};
use vtts::train::{fit, Trainer};
use vtts::Trainer32;

const GRIFFIN_LIM_ITERATIONS: usize = 60;

#[derive(Parser)]
#[command(name = "vtts", version, about = "Speech synthesis from rendered text")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (flat key = value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct TextArgs {
    /// Text to render.
    #[arg(long, allow_hyphen_values = true)]
    text: String,
    /// Decorations as kind:start:end;... (underline, bold, italic).
    #[arg(long, default_value = "")]
    decorations: String,
    /// Typeface variant of the synthetic font.
    #[arg(long)]
    variant: Option<u32>,
}

#[derive(Subcommand)]
enum Command {
    /// Render text and its slices as PGM images.
    Render {
        #[command(flatten)]
        text: TextArgs,
        /// Context characters per slice (odd).
        #[arg(long)]
        context: Option<usize>,
    },
    /// Write only the slices of rendered text as PGM images.
    Slice {
        #[command(flatten)]
        text: TextArgs,
        #[arg(long)]
        context: Option<usize>,
    },
    /// Train a model on a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Continue from a checkpoint (step counter and optimizer state kept).
        #[arg(long, conflicts_with = "fine_tune")]
        resume: Option<PathBuf>,
        /// Start from a checkpoint's weights with learning rate 1e-4.
        #[arg(long)]
        fine_tune: Option<PathBuf>,
        /// Overrides max_steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Synthesize a mel spectrogram (and optionally a waveform).
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        text: TextArgs,
        /// Also write a Griffin-Lim waveform.
        #[arg(long)]
        wav: bool,
    },
    /// Pitch contrast of decorated versus undecorated input.
    EvalEmphasis {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Re-label every decoration with this kind.
        #[arg(long)]
        kind: Option<DecorationKind>,
    },
    /// Template-decoding CER per vocabulary split for both front-ends.
    EvalOov {
        #[arg(long)]
        visual: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        /// Training manifest, for character statistics.
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Mean predicted pitch under two typeface variants.
    EvalEmotion {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        high_variant: u32,
        #[arg(long)]
        low_variant: u32,
    },
    /// Character error rate between two strings.
    Cer {
        #[arg(long)]
        reference: String,
        #[arg(long)]
        hypothesis: String,
    },
    /// Generate a synthetic corpus (mel files plus manifest.jsonl).
    MakeCorpus {
        #[arg(long, default_value_t = 20)]
        size: usize,
        #[arg(long, default_value = "abcdefghij")]
        alphabet: String,
        /// Emphasized spans raise pitch and template gain.
        #[arg(long)]
        emphasis: bool,
        /// Decoration marking the emphasized span.
        #[arg(long, default_value = "underline")]
        emphasis_kind: DecorationKind,
        /// Typeface prosody as variant:pitch_shift:frames_per_char,...
        #[arg(long, default_value = "")]
        variant_map: String,
        #[arg(long, default_value_t = 4)]
        min_len: usize,
        #[arg(long, default_value_t = 8)]
        max_len: usize,
    },
}

fn experiment(common: &Common) -> Result<ExperimentConfig> {
    let mut exp = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        exp.train.seed = s;
    }
    Ok(exp)
}

fn context_spec(exp: &ExperimentConfig, context: Option<usize>) -> Result<SliceSpec> {
    match context {
        Some(c) => SliceSpec::new(c).map_err(|e| anyhow::anyhow!("invalid --context {c}: {e}")),
        None => Ok(exp.model.slice),
    }
}

fn render_text(exp: &ExperimentConfig, t: &TextArgs) -> Result<vtts::textimg::VisualTextImage> {
    let decorations = parse_decorations(&t.decorations).context("invalid --decorations")?;
    let spec = match t.variant {
        Some(v) => exp.model.render.with_variant(v),
        None => exp.model.render.clone(),
    };
    Ok(render(&t.text, &spec, &decorations)?)
}

fn load_checkpoint(path: &Path) -> Result<Trainer32> {
    Trainer::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn parse_variant_map(s: &str) -> Result<Vec<VariantProsody>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let parts: Vec<&str> = p.split(':').collect();
            let [v, shift, fpc] = parts[..] else {
                bail!("invalid --variant-map entry {p:?}, expected variant:pitch_shift:frames_per_char");
            };
            Ok(VariantProsody {
                variant: v.parse().with_context(|| format!("variant in {p:?}"))?,
                pitch_shift: shift.parse().with_context(|| format!("pitch shift in {p:?}"))?,
                frames_per_char: fpc.parse().with_context(|| format!("frames per char in {p:?}"))?,
            })
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let exp = experiment(common)?;
    let out = &common.out;
    match cli.command {
        Command::Render { text, context } => {
            let spec = context_spec(&exp, context)?;
            let img = render_text(&exp, &text)?;
            let slices = slice(&img, spec)?;
            std::fs::create_dir_all(out)?;
            img.write_pgm(&out.join("image.pgm"))?;
            slices.write_pgms(out)?;
            println!(
                "wrote image.pgm ({}x{}) and {} slices to {}",
                img.height(),
                img.width(),
                slices.len(),
                out.display()
            );
        }
        Command::Slice { text, context } => {
            let spec = context_spec(&exp, context)?;
            let slices = slice(&render_text(&exp, &text)?, spec)?;
            std::fs::create_dir_all(out)?;
            slices.write_pgms(out)?;
            println!("wrote {} slices to {}", slices.len(), out.display());
        }
        Command::Train {
            manifest,
            resume,
            fine_tune,
            steps,
        } => {
            let mut exp = exp;
            if let Some(s) = steps {
                exp.train.max_steps = s;
            }
            let t = fit(&exp, &manifest, out, resume.as_deref(), fine_tune.as_deref())?;
            println!(
                "trained to step {}; checkpoints and loss.tsv in {}",
                t.step,
                out.display()
            );
        }
        Command::Synth { checkpoint, text, wav } => {
            let t = load_checkpoint(&checkpoint)?;
            let decorations = parse_decorations(&text.decorations).context("invalid --decorations")?;
            let chars: Vec<char> = text.text.chars().collect();
            let input = t.model.prepare(&chars, &decorations, text.variant.unwrap_or(0))?;
            let (mel, pred) = t.model.infer(&input)?;
            std::fs::create_dir_all(out)?;
            write_mat(&out.join("mel.vtts"), &mel.frames)?;
            println!(
                "mel: {} frames x {} mels; durations {:?}",
                mel.num_frames(),
                mel.frames.cols(),
                pred.durations
            );
            if wav {
                let analyzer = MelAnalyzer::new(mel.frames.cols());
                let mut samples = analyzer.griffin_lim(&mel.frames, GRIFFIN_LIM_ITERATIONS);
                peak_normalize(&mut samples, 0.95);
                write_wav(&out.join("synth.wav"), &samples, SAMPLE_RATE)?;
                println!("waveform: {} samples at {SAMPLE_RATE} Hz", samples.len());
            }
        }
        Command::EvalEmphasis {
            checkpoint,
            manifest,
            kind,
        } => {
            let t = load_checkpoint(&checkpoint)?;
            let records = load_manifest(&manifest)?;
            let r = eval_emphasis(&t.model, &records, kind)?;
            println!("utterances\t{}", r.utterance_ids.len());
            println!("decorated_fraction\t{:.4}", r.fraction);
            println!("control_fraction\t{:.4}", r.control_fraction);
            println!("exceeds_control\t{:.4}", r.exceeds_control);
            println!("(pitch-contrast surrogate for listener word identification)");
        }
        Command::EvalOov {
            visual,
            baseline,
            train_manifest,
            manifest,
        } => {
            let v = load_checkpoint(&visual)?;
            let b = load_checkpoint(&baseline)?;
            if v.model.config.front_end != FrontEndKind::Visual || b.model.config.front_end != FrontEndKind::Baseline {
                bail!("--visual must be a visual checkpoint and --baseline a baseline checkpoint");
            }
            let train = load_manifest(&train_manifest)?;
            let stats = CorpusStats::from_texts(train.iter().map(|r| r.text.as_str()));
            let records = load_manifest(&manifest)?;
            let mut candidates: Vec<char> = train.iter().chain(&records).flat_map(|r| r.text.chars()).collect();
            candidates.sort_unstable();
            candidates.dedup();
            let r = eval_oov(&v.model, &b.model, &stats, &records, &candidates)?;
            println!("split\tutterances\tvisual_cer\tbaseline_cer");
            for (label, s) in &r.visual {
                let bc = r.baseline.get(label).map_or(f64::NAN, |x| x.mean_cer);
                println!("{label}\t{}\t{:.4}\t{:.4}", s.utterances, s.mean_cer, bc);
            }
            if let (Some((a, c)), Some(vd), Some(bd)) = (r.probe_pair, r.visual_distance, r.baseline_distance) {
                println!(
                    "oov pair U+{:04X} U+{:04X}: visual distance {vd:.6}, baseline distance {bd:.6}",
                    a as u32, c as u32
                );
            }
        }
        Command::EvalEmotion {
            checkpoint,
            manifest,
            high_variant,
            low_variant,
        } => {
            let t = load_checkpoint(&checkpoint)?;
            let records = load_manifest(&manifest)?;
            let r = eval_emotion(&t.model, &records, high_variant, low_variant)?;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            println!("utterances\t{}", r.high_pitch.len());
            println!("mean_pitch_variant_{high_variant}\t{:.4}", mean(&r.high_pitch));
            println!("mean_pitch_variant_{low_variant}\t{:.4}", mean(&r.low_pitch));
            println!("correct_fraction\t{:.4}", r.correct_fraction);
        }
        Command::Cer { reference, hypothesis } => {
            println!("{:.6}", cer(&reference, &hypothesis)?);
        }
        Command::MakeCorpus {
            size,
            alphabet,
            emphasis,
            emphasis_kind,
            variant_map,
            min_len,
            max_len,
        } => {
            let spec = CorpusSpec {
                seed: exp.train.seed,
                size,
                alphabet: alphabet.chars().collect(),
                emphasis_mode: if emphasis {
                    EmphasisMode::PitchShift
                } else {
                    EmphasisMode::Off
                },
                emphasis_kind,
                variant_map: parse_variant_map(&variant_map)?,
                min_len,
                max_len,
                n_mels: exp.model.acoustic.n_mels,
                ..CorpusSpec::default()
            };
            let mut corpus = make_synthetic_corpus(&spec)?;
            let manifest = write_corpus(out, &mut corpus)?;
            println!("wrote {} utterances to {}", corpus.len(), manifest.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
