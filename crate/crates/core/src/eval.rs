//! Evaluation protocols run against a trained or fresh model: emphasis and
//! typeface pitch contrasts, template-argmax intelligibility per vocabulary
//! split, OOV feature distinctness and the compositionality probe.

use std::collections::BTreeMap;

use crate::acoustic::{AcousticModel, FrontEnd, FrontEndKind, FrontInput};
use crate::data::{cer, classify_sentence, template, CorpusStats, SplitLabel, UtteranceRecord, RARE_THRESHOLD};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::scalar::Scalar;
use crate::textimg::{Decoration, DecorationKind};

/// Decodes a mel spectrogram by averaging each duration segment and picking
/// the candidate whose unit-norm template has the largest dot product.
/// Zero-length segments emit nothing.
pub fn template_decode<T: Scalar>(mel: &Mat<T>, durations: &[usize], candidates: &[char]) -> String {
    let n_mels = mel.cols();
    let templates: Vec<(char, Vec<f64>)> = candidates
        .iter()
        .map(|&c| {
            let t = template(c, n_mels);
            let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            (c, t.into_iter().map(|v| v / norm).collect())
        })
        .collect();
    let mut out = String::new();
    let mut start = 0;
    for &d in durations {
        let end = (start + d).min(mel.rows());
        if end > start {
            let mut avg = vec![0.0; n_mels];
            for r in start..end {
                for (a, v) in avg.iter_mut().zip(mel.row(r)) {
                    *a += v.as_f64();
                }
            }
            let best = templates
                .iter()
                .map(|(c, t)| (*c, t.iter().zip(&avg).map(|(x, y)| x * y).sum::<f64>()))
                .fold(None, |b: Option<(char, f64)>, (c, s)| match b {
                    Some((_, bs)) if bs >= s => b,
                    _ => Some((c, s)),
                });
            if let Some((c, _)) = best {
                out.push(c);
            }
        }
        start = end;
    }
    out
}

/// Inference for one record's text with the given decorations and variant.
fn infer_pitch<T: Scalar>(
    model: &AcousticModel<T>,
    text: &[char],
    decorations: &[Decoration],
    variant: u32,
) -> Result<Vec<f64>> {
    let input = model.prepare(text, decorations, variant)?;
    let (_, pred) = model.infer(&input)?;
    Ok(pred.pitch)
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Mean pitch inside the emphasized span minus the mean over the rest.
pub fn span_contrast(pitch: &[f64], span: &[bool]) -> f64 {
    let inside = mean(pitch.iter().zip(span).filter(|(_, &s)| s).map(|(p, _)| *p));
    let outside = mean(pitch.iter().zip(span).filter(|(_, &s)| !s).map(|(p, _)| *p));
    inside - outside
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmphasisEvalReport {
    pub utterance_ids: Vec<String>,
    /// Span contrast with the decorated text as input.
    pub decorated_contrast: Vec<f64>,
    /// Span contrast for the same span with undecorated input.
    pub control_contrast: Vec<f64>,
    /// Share of utterances whose decorated contrast is positive.
    pub fraction: f64,
    /// Share of utterances whose control contrast is positive.
    pub control_fraction: f64,
    /// Share where the decorated contrast exceeds the control contrast.
    pub exceeds_control: f64,
}

/// Synthesizes every decorated record twice (with and without decorations)
/// and compares predicted pitch over the decorated span against the rest.
/// Records without decorations, or whose decorations cover every character,
/// are skipped. `override_kind` re-labels all decorations (e.g. to test a
/// different emphasis style on the same spans).
pub fn eval_emphasis<T: Scalar>(
    model: &AcousticModel<T>,
    records: &[UtteranceRecord],
    override_kind: Option<DecorationKind>,
) -> Result<EmphasisEvalReport> {
    let mut ids = Vec::new();
    let mut dec = Vec::new();
    let mut ctl = Vec::new();
    for r in records {
        let text = r.chars();
        let decorations: Vec<Decoration> = r
            .decorations
            .iter()
            .filter(|d| d.kind != DecorationKind::None)
            .map(|d| Decoration {
                kind: override_kind.unwrap_or(d.kind),
                ..*d
            })
            .collect();
        let span: Vec<bool> = (0..text.len())
            .map(|i| decorations.iter().any(|d| d.contains(i)))
            .collect();
        if !span.iter().any(|&s| s) || span.iter().all(|&s| s) {
            continue;
        }
        let p_dec = infer_pitch(model, &text, &decorations, r.typeface_variant)?;
        let p_ctl = infer_pitch(model, &text, &[], r.typeface_variant)?;
        ids.push(r.utterance_id.clone());
        dec.push(span_contrast(&p_dec, &span));
        ctl.push(span_contrast(&p_ctl, &span));
    }
    if ids.is_empty() {
        return Err(Error::Input("no records with a partial emphasis span".into()));
    }
    let n = ids.len() as f64;
    let frac = |v: &[f64]| v.iter().filter(|&&c| c > 0.0).count() as f64 / n;
    Ok(EmphasisEvalReport {
        fraction: frac(&dec),
        control_fraction: frac(&ctl),
        exceeds_control: dec.iter().zip(&ctl).filter(|(d, c)| d > c).count() as f64 / n,
        utterance_ids: ids,
        decorated_contrast: dec,
        control_contrast: ctl,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmotionEvalReport {
    pub high_variant: u32,
    pub low_variant: u32,
    /// Mean predicted pitch per utterance under each variant.
    pub high_pitch: Vec<f64>,
    pub low_pitch: Vec<f64>,
    /// Share of utterances where the high variant's mean pitch is larger.
    pub correct_fraction: f64,
}

/// Synthesizes each record's text (undecorated) under both typeface variants
/// and checks that the mean predicted pitch is ordered as the variants'
/// prosody is.
pub fn eval_emotion<T: Scalar>(
    model: &AcousticModel<T>,
    records: &[UtteranceRecord],
    high_variant: u32,
    low_variant: u32,
) -> Result<EmotionEvalReport> {
    if records.is_empty() {
        return Err(Error::Input("no records to evaluate".into()));
    }
    let mut hi = Vec::new();
    let mut lo = Vec::new();
    for r in records {
        let text = r.chars();
        if text.is_empty() {
            continue;
        }
        hi.push(mean(infer_pitch(model, &text, &[], high_variant)?));
        lo.push(mean(infer_pitch(model, &text, &[], low_variant)?));
    }
    let correct = hi.iter().zip(&lo).filter(|(h, l)| h > l).count();
    Ok(EmotionEvalReport {
        high_variant,
        low_variant,
        correct_fraction: correct as f64 / hi.len().max(1) as f64,
        high_pitch: hi,
        low_pitch: lo,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitScore {
    pub utterances: usize,
    pub mean_cer: f64,
}

/// Template-argmax CER per vocabulary split.
pub fn split_cer<T: Scalar>(
    model: &AcousticModel<T>,
    records: &[UtteranceRecord],
    stats: &CorpusStats,
    candidates: &[char],
) -> Result<BTreeMap<SplitLabel, SplitScore>> {
    let mut sums: BTreeMap<SplitLabel, (usize, f64)> = BTreeMap::new();
    for r in records {
        if r.text.is_empty() {
            continue;
        }
        let label = classify_sentence(&r.text, stats, RARE_THRESHOLD);
        let input = model.prepare(&r.chars(), &r.decorations, r.typeface_variant)?;
        let (mel, pred) = model.infer(&input)?;
        let hyp = template_decode(&mel.frames, &pred.durations, candidates);
        let e = sums.entry(label).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += cer(&r.text, &hyp)?;
    }
    Ok(sums
        .into_iter()
        .map(|(k, (n, s))| {
            (
                k,
                SplitScore {
                    utterances: n,
                    mean_cer: s / n as f64,
                },
            )
        })
        .collect())
}

/// Front-end output for a single character rendered alone.
pub fn char_feature<T: Scalar>(model: &AcousticModel<T>, ch: char) -> Result<Mat<T>> {
    let input = model.prepare(&[ch], &[], 0)?;
    model.features(&input)
}

/// L2 distance between the front-end outputs of two characters.
pub fn feature_distance<T: Scalar>(model: &AcousticModel<T>, a: char, b: char) -> Result<f64> {
    Ok(char_feature(model, a)?.l2_distance(&char_feature(model, b)?).as_f64())
}

#[derive(Clone, Debug, PartialEq)]
pub struct OovReport {
    pub visual: BTreeMap<SplitLabel, SplitScore>,
    pub baseline: BTreeMap<SplitLabel, SplitScore>,
    /// Pair of unseen characters used for the distinctness check.
    pub probe_pair: Option<(char, char)>,
    pub visual_distance: Option<f64>,
    pub baseline_distance: Option<f64>,
}

impl OovReport {
    fn degradation(m: &BTreeMap<SplitLabel, SplitScore>) -> Option<f64> {
        Some(m.get(&SplitLabel::Oov)?.mean_cer - m.get(&SplitLabel::InVocab)?.mean_cer)
    }

    /// OOV CER minus in-vocab CER for the visual model.
    pub fn visual_degradation(&self) -> Option<f64> {
        Self::degradation(&self.visual)
    }

    pub fn baseline_degradation(&self) -> Option<f64> {
        Self::degradation(&self.baseline)
    }
}

/// Runs both models over the test records and measures how far apart two
/// distinct unseen characters land in each front-end.
pub fn eval_oov<T: Scalar>(
    visual: &AcousticModel<T>,
    baseline: &AcousticModel<T>,
    stats: &CorpusStats,
    records: &[UtteranceRecord],
    candidates: &[char],
) -> Result<OovReport> {
    if visual.config.front_end != FrontEndKind::Visual || baseline.config.front_end != FrontEndKind::Baseline {
        return Err(Error::Input(
            "eval_oov needs a visual and a baseline model, in that order".into(),
        ));
    }
    let mut unseen: Vec<char> = records
        .iter()
        .flat_map(|r| r.text.chars())
        .filter(|&c| stats.count(c) == 0)
        .collect();
    unseen.sort_unstable();
    unseen.dedup();
    let pair = match unseen[..] {
        [a, b, ..] => Some((a, b)),
        _ => None,
    };
    let (vd, bd) = match pair {
        Some((a, b)) => (
            Some(feature_distance(visual, a, b)?),
            Some(feature_distance(baseline, a, b)?),
        ),
        None => (None, None),
    };
    Ok(OovReport {
        visual: split_cer(visual, records, stats, candidates)?,
        baseline: split_cer(baseline, records, stats, candidates)?,
        probe_pair: pair,
        visual_distance: vd,
        baseline_distance: bd,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    /// Mean distance from probe glyphs to seen glyphs sharing a component.
    pub mean_same_component: f64,
    /// Mean distance from probe glyphs to seen glyphs sharing none.
    pub mean_disjoint: f64,
    /// Mean pairwise distance among the seen glyphs.
    pub mean_seen_pairwise: f64,
}

impl ProbeReport {
    pub fn same_closer(&self) -> bool {
        self.mean_same_component < self.mean_disjoint
    }

    /// Same-component distance relative to the space's typical distance.
    pub fn relative_same_component(&self) -> f64 {
        if self.mean_seen_pairwise > 0.0 {
            self.mean_same_component / self.mean_seen_pairwise
        } else {
            1.0
        }
    }
}

/// Distances between composed probe glyphs and seen glyphs, grouped by
/// whether they share a component. Characters must be composed glyphs.
pub fn compositionality_probe<T: Scalar>(
    model: &AcousticModel<T>,
    probes: &[char],
    seen: &[char],
) -> Result<ProbeReport> {
    use crate::textimg::composed_components;
    let comps =
        |c: char| composed_components(c as u32).ok_or_else(|| Error::Input(format!("{c:?} is not a composed glyph")));
    let feats: BTreeMap<char, Mat<T>> = probes
        .iter()
        .chain(seen)
        .map(|&c| Ok((c, char_feature(model, c)?)))
        .collect::<Result<_>>()?;
    let dist = |a: char, b: char| feats[&a].l2_distance(&feats[&b]).as_f64();
    let (mut same, mut disjoint) = (Vec::new(), Vec::new());
    for &p in probes {
        let (pa, pb) = comps(p)?;
        for &s in seen {
            let (sa, sb) = comps(s)?;
            if sa == pa || sb == pb {
                same.push(dist(p, s));
            } else if sa != pa && sb != pb && sa != pb && sb != pa {
                disjoint.push(dist(p, s));
            }
        }
    }
    let mut pairwise = Vec::new();
    for (i, &a) in seen.iter().enumerate() {
        for &b in &seen[i + 1..] {
            pairwise.push(dist(a, b));
        }
    }
    if same.is_empty() || disjoint.is_empty() {
        return Err(Error::Input(
            "probe set has no same-component or no disjoint pairs".into(),
        ));
    }
    Ok(ProbeReport {
        mean_same_component: mean(same),
        mean_disjoint: mean(disjoint),
        mean_seen_pairwise: mean(pairwise),
    })
}

/// All characters rendered alone and sliced, as one input sequence.
pub fn isolated_glyphs<T: Scalar>(model: &AcousticModel<T>, chars: &[char]) -> Result<FrontInput> {
    let mut merged: Option<crate::slicer::SlicedSequence> = None;
    for &c in chars {
        match (model.prepare(&[c], &[], 0)?, merged.as_mut()) {
            (FrontInput::Slices(s), Some(m)) => m.slices.extend(s.slices),
            (FrontInput::Slices(s), None) => merged = Some(s),
            (FrontInput::Chars(_), _) => return Ok(FrontInput::Chars(chars.to_vec())),
        }
    }
    merged
        .map(FrontInput::Slices)
        .ok_or_else(|| Error::Input("no glyphs given".into()))
}

/// True when the model's front-end is the lookup table.
pub fn is_baseline<T: Scalar>(model: &AcousticModel<T>) -> bool {
    matches!(model.front_end, FrontEnd::Baseline(_))
}
