//! Corpus records, manifests, the synthetic corpus generator, vocabulary
//! statistics with the in-vocab/rare/OOV labelling rule, and CER.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::VarianceTargets;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::tensorfile;
use crate::textimg::{
    composed_components, format_decorations, parse_decorations, validate_decorations, Decoration, DecorationKind,
};

/// One training or test utterance as listed in a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub text: String,
    pub decorations: Vec<Decoration>,
    pub typeface_variant: u32,
    pub mel_path: PathBuf,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

impl UtteranceRecord {
    pub fn chars(&self) -> Vec<char> {
        self.text.chars().collect()
    }

    pub fn targets(&self) -> VarianceTargets {
        VarianceTargets {
            durations: self.durations.clone(),
            pitch: self.pitch.clone(),
            energy: self.energy.clone(),
        }
    }

    /// Checks everything that does not need the mel file.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::Record {
            id: self.utterance_id.clone(),
            reason,
        };
        let n = self.text.chars().count();
        if self.durations.len() != n {
            return Err(fail(format!("{} durations for {n} characters", self.durations.len())));
        }
        if self.pitch.len() != n || self.energy.len() != n {
            return Err(fail(format!(
                "{} pitch / {} energy values for {n} characters",
                self.pitch.len(),
                self.energy.len()
            )));
        }
        if n > 0 && self.durations.iter().all(|&d| d == 0) {
            return Err(fail("all durations are zero".into()));
        }
        if self.pitch.iter().chain(&self.energy).any(|v| !v.is_finite()) {
            return Err(fail("non-finite pitch or energy".into()));
        }
        validate_decorations(&self.decorations, n).map_err(|e| fail(e.to_string()))
    }
}

/// Record plus its mel frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub record: UtteranceRecord,
    pub mel: Mat<f32>,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    utterance_id: String,
    text: String,
    #[serde(default)]
    decorations: String,
    #[serde(default)]
    typeface_variant: u32,
    mel_path: String,
    durations: String,
    pitch: String,
    energy: String,
}

fn join_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> std::result::Result<Vec<T>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| format!("bad {what} value {p:?}")))
        .collect()
}

impl ManifestLine {
    fn into_record(self, base: &Path) -> Result<UtteranceRecord> {
        let id = self.utterance_id.clone();
        let fail = |reason: String| Error::Record { id: id.clone(), reason };
        let mel_path = PathBuf::from(&self.mel_path);
        Ok(UtteranceRecord {
            decorations: parse_decorations(&self.decorations).map_err(|e| fail(e.to_string()))?,
            durations: parse_list(&self.durations, "duration").map_err(&fail)?,
            pitch: parse_list(&self.pitch, "pitch").map_err(&fail)?,
            energy: parse_list(&self.energy, "energy").map_err(&fail)?,
            mel_path: if mel_path.is_absolute() {
                mel_path
            } else {
                base.join(mel_path)
            },
            utterance_id: self.utterance_id,
            text: self.text,
            typeface_variant: self.typeface_variant,
        })
    }

    fn from_record(r: &UtteranceRecord, base: &Path) -> Self {
        let mel = r.mel_path.strip_prefix(base).unwrap_or(&r.mel_path);
        Self {
            utterance_id: r.utterance_id.clone(),
            text: r.text.clone(),
            decorations: format_decorations(&r.decorations),
            typeface_variant: r.typeface_variant,
            mel_path: mel.to_string_lossy().into_owned(),
            durations: join_list(&r.durations),
            pitch: join_list(&r.pitch),
            energy: join_list(&r.energy),
        }
    }
}

/// Reads and fully validates a JSON-lines manifest, including each mel
/// file's frame count. Relative mel paths resolve against the manifest's
/// directory. Blank lines are skipped.
pub fn load_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| Error::Record {
            id: format!("line {}", lineno + 1),
            reason: format!("malformed record: {e}"),
        })?;
        let record = parsed.into_record(&base)?;
        record.validate()?;
        let mel = tensorfile::Tensor::read(&record.mel_path).map_err(|e| Error::Record {
            id: record.utterance_id.clone(),
            reason: format!("mel file {}: {e}", record.mel_path.display()),
        })?;
        let frames = mel.dims.first().copied().unwrap_or(0);
        let total: usize = record.durations.iter().sum();
        if mel.dims.len() != 2 || frames != total {
            return Err(Error::Record {
                id: record.utterance_id.clone(),
                reason: format!("mel dims {:?} but durations sum to {total}", mel.dims),
            });
        }
        out.push(record);
    }
    Ok(out)
}

/// Loads a manifest together with its mel spectrograms.
pub fn load_utterances(path: &Path) -> Result<Vec<Utterance>> {
    load_manifest(path)?
        .into_iter()
        .map(|record| {
            let mel = tensorfile::read_mat(&record.mel_path)?;
            Ok(Utterance { record, mel })
        })
        .collect()
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for r in records {
        let line =
            serde_json::to_string(&ManifestLine::from_record(r, base)).map_err(|e| Error::Input(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes `mels/<id>.vtts` for every utterance and `manifest.jsonl` under
/// `dir`; returns the manifest path. Mel paths in the records are rewritten.
pub fn write_corpus(dir: &Path, utterances: &mut [Utterance]) -> Result<PathBuf> {
    let mel_dir = dir.join("mels");
    std::fs::create_dir_all(&mel_dir)?;
    for u in utterances.iter_mut() {
        let p = mel_dir.join(format!("{}.vtts", u.record.utterance_id));
        tensorfile::write_mat(&p, &u.mel)?;
        u.record.mel_path = p;
    }
    let manifest = dir.join("manifest.jsonl");
    let records: Vec<_> = utterances.iter().map(|u| u.record.clone()).collect();
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

/// Per-character occurrence counts over training texts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub counts: BTreeMap<char, usize>,
}

impl CorpusStats {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts = BTreeMap::new();
        for t in texts {
            for c in t.chars() {
                *counts.entry(c).or_insert(0) += 1;
            }
        }
        Self { counts }
    }

    pub fn count(&self, c: char) -> usize {
        self.counts.get(&c).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SplitLabel {
    InVocab,
    Rare,
    Oov,
}

impl std::fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitLabel::InVocab => "in_vocab",
            SplitLabel::Rare => "rare",
            SplitLabel::Oov => "oov",
        })
    }
}

pub const RARE_THRESHOLD: usize = 3;

/// `Oov` if any character never occurs in training, else `Rare` if any
/// occurs fewer than `threshold` times, else `InVocab`.
pub fn classify_sentence(text: &str, stats: &CorpusStats, threshold: usize) -> SplitLabel {
    let mut label = SplitLabel::InVocab;
    for c in text.chars() {
        match stats.count(c) {
            0 => return SplitLabel::Oov,
            k if k < threshold => label = SplitLabel::Rare,
            _ => {}
        }
    }
    label
}

/// Unit-cost Levenshtein distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate: edit distance over reference length.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(Error::Input("CER needs a non-empty reference".into()));
    }
    let h: Vec<char> = hypothesis.chars().collect();
    Ok(levenshtein(&r, &h) as f64 / r.len() as f64)
}

// ---------------------------------------------------------------------------
// Synthetic corpus

pub const BASE_PITCH: f64 = 0.0;
pub const EMPHASIS_PITCH_SHIFT: f64 = 1.0;
pub const EMPHASIS_GAIN_DB: f64 = 3.0;
pub const TEMPLATE_PEAK: f64 = 1.0;
pub const DEFAULT_FRAMES_PER_CHAR: usize = 4;

/// Mel bins carrying a character's template energy (for 80 mel bins).
///
/// Composed glyphs `(a, b)` light bin `4 + 4a` and bin `44 + 4b`; every
/// other code point lights bin `4 + 2·(cp mod 37)`.
pub fn template_bins(ch: char) -> Vec<usize> {
    match composed_components(ch as u32) {
        Some((a, b)) => vec![4 + 4 * a as usize, 44 + 4 * b as usize],
        None => vec![4 + 2 * (ch as usize % 37)],
    }
}

/// Unit-peak template over `n_mels` bins (out-of-range bins are dropped).
pub fn template(ch: char, n_mels: usize) -> Vec<f64> {
    let mut t = vec![0.0; n_mels];
    for b in template_bins(ch) {
        if b < n_mels {
            t[b] = TEMPLATE_PEAK;
        }
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmphasisMode {
    Off,
    PitchShift,
}

/// Prosody attached to a typeface variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariantProsody {
    pub variant: u32,
    pub pitch_shift: f64,
    pub frames_per_char: usize,
}

impl Default for VariantProsody {
    fn default() -> Self {
        Self {
            variant: 0,
            pitch_shift: 0.0,
            frames_per_char: DEFAULT_FRAMES_PER_CHAR,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub seed: u64,
    pub size: usize,
    pub alphabet: Vec<char>,
    pub emphasis_mode: EmphasisMode,
    pub emphasis_kind: DecorationKind,
    /// Empty means variant 0 with neutral prosody.
    pub variant_map: Vec<VariantProsody>,
    pub min_len: usize,
    pub max_len: usize,
    pub n_mels: usize,
    pub id_prefix: String,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 20,
            alphabet: "abcdefghij".chars().collect(),
            emphasis_mode: EmphasisMode::Off,
            emphasis_kind: DecorationKind::Underline,
            variant_map: Vec::new(),
            min_len: 4,
            max_len: 8,
            n_mels: 80,
            id_prefix: "syn".into(),
        }
    }
}

/// Builds the targets and mel frames of one synthetic utterance.
///
/// Every character lasts `frames_per_char` frames of its template. Emphasized
/// characters (those under a decoration) get `+1.0` pitch and `+3 dB` on
/// their template peaks when `emphasize` is set. Energy is the L2 norm of the
/// character's frames.
pub fn synthesize_utterance(
    id: &str,
    text: &[char],
    decorations: &[Decoration],
    prosody: &VariantProsody,
    emphasize: bool,
    n_mels: usize,
) -> Result<Utterance> {
    validate_decorations(decorations, text.len())?;
    let gain = EMPHASIS_GAIN_DB / 20.0 * std::f64::consts::LN_10;
    let fpc = prosody.frames_per_char;
    let mut mel = Mat::zeros(text.len() * fpc, n_mels);
    let mut pitch = Vec::with_capacity(text.len());
    let mut energy = Vec::with_capacity(text.len());
    for (i, &c) in text.iter().enumerate() {
        let emph = emphasize
            && decorations
                .iter()
                .any(|d| d.kind != DecorationKind::None && d.contains(i));
        let mut t = template(c, n_mels);
        if emph {
            for v in t.iter_mut().filter(|v| **v > 0.0) {
                *v += gain;
            }
        }
        for f in 0..fpc {
            for (o, &v) in mel.row_mut(i * fpc + f).iter_mut().zip(&t) {
                *o = v as f32;
            }
        }
        pitch.push(BASE_PITCH + prosody.pitch_shift + if emph { EMPHASIS_PITCH_SHIFT } else { 0.0 });
        energy.push(t.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    let record = UtteranceRecord {
        utterance_id: id.to_string(),
        text: text.iter().collect(),
        decorations: decorations.to_vec(),
        typeface_variant: prosody.variant,
        mel_path: PathBuf::from(format!("mels/{id}.vtts")),
        durations: vec![fpc; text.len()],
        pitch,
        energy,
    };
    record.validate()?;
    Ok(Utterance { record, mel })
}

/// Deterministic synthetic corpus: random sentences over `alphabet`, with an
/// optional emphasized span (length 1..=3, never the whole sentence) and a
/// typeface variant drawn from `variant_map`.
pub fn make_synthetic_corpus(spec: &CorpusSpec) -> Result<Vec<Utterance>> {
    if spec.alphabet.is_empty() {
        return Err(Error::Input("synthetic corpus alphabet is empty".into()));
    }
    if spec.alphabet.contains(&' ') {
        return Err(Error::Input(
            "synthetic corpus alphabet contains the reserved space".into(),
        ));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Input(
            "sentence length range must satisfy 1 <= min <= max".into(),
        ));
    }
    if spec.emphasis_mode == EmphasisMode::PitchShift && spec.max_len < 2 {
        return Err(Error::Input(
            "emphasis needs sentences of at least two characters".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let neutral = [VariantProsody::default()];
    let variants: &[VariantProsody] = if spec.variant_map.is_empty() {
        &neutral
    } else {
        &spec.variant_map
    };
    (0..spec.size)
        .map(|i| {
            let min = if spec.emphasis_mode == EmphasisMode::PitchShift {
                spec.min_len.max(2)
            } else {
                spec.min_len
            };
            let len = rng.gen_range(min..=spec.max_len);
            let text: Vec<char> = (0..len)
                .map(|_| *spec.alphabet.choose(&mut rng).expect("non-empty"))
                .collect();
            let decorations = match spec.emphasis_mode {
                EmphasisMode::Off => Vec::new(),
                EmphasisMode::PitchShift => {
                    let span = rng.gen_range(1..=3.min(len - 1));
                    let start = rng.gen_range(0..=len - span);
                    vec![Decoration::new(spec.emphasis_kind, start, start + span)]
                }
            };
            let prosody = variants[rng.gen_range(0..variants.len())];
            synthesize_utterance(
                &format!("{}{i:04}", spec.id_prefix),
                &text,
                &decorations,
                &prosody,
                spec.emphasis_mode == EmphasisMode::PitchShift,
                spec.n_mels,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textimg::composed_char;

    fn stats(pairs: &[(char, usize)]) -> CorpusStats {
        CorpusStats {
            counts: pairs.iter().copied().collect(),
        }
    }

    #[test]
    fn split_labels() {
        let s = stats(&[('a', 5), ('b', 3), ('c', 2)]);
        assert_eq!(classify_sentence("ab", &s, 3), SplitLabel::InVocab);
        assert_eq!(classify_sentence("abc", &s, 3), SplitLabel::Rare);
        assert_eq!(classify_sentence("czab", &s, 3), SplitLabel::Oov);
        assert_eq!(classify_sentence("", &s, 3), SplitLabel::InVocab);
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer("abc", "abc").unwrap(), 0.0);
        assert!((cer("abc", "abd").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cer("ab", "axb").unwrap(), 0.5);
        assert!(cer("", "a").is_err());
        assert_eq!(cer("ab", "").unwrap(), 1.0);
    }

    #[test]
    fn template_rule() {
        assert_eq!(template_bins('a'), vec![4 + 2 * (97 % 37)]);
        assert_eq!(template_bins(composed_char(2, 3)), vec![12, 56]);
        // a character whose template bin is 40: 4 + 2*(cp mod 37) = 40 -> cp mod 37 = 18
        let ch = char::from_u32(37 * 2 + 18).unwrap();
        let u = synthesize_utterance("t", &[ch], &[], &VariantProsody::default(), false, 80).unwrap();
        for f in 0..u.mel.rows() {
            let row = u.mel.row(f);
            let arg = (0..80).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            assert_eq!(arg, 40);
        }
    }

    #[test]
    fn corpus_is_deterministic() {
        let spec = CorpusSpec {
            seed: 7,
            size: 20,
            ..Default::default()
        };
        assert_eq!(
            make_synthetic_corpus(&spec).unwrap(),
            make_synthetic_corpus(&spec).unwrap()
        );
        let other = CorpusSpec {
            seed: 8,
            ..spec.clone()
        };
        assert_ne!(
            make_synthetic_corpus(&spec).unwrap(),
            make_synthetic_corpus(&other).unwrap()
        );
    }

    #[test]
    fn emphasis_raises_pitch_by_one() {
        let text: Vec<char> = "abcde".chars().collect();
        let d = [Decoration::new(DecorationKind::Underline, 1, 3)];
        let u = synthesize_utterance("e", &text, &d, &VariantProsody::default(), true, 80).unwrap();
        let p = &u.record.pitch;
        assert_eq!(p[1] - p[0], 1.0);
        assert_eq!(p[2] - p[0], 1.0);
        assert_eq!(p[3], p[0]);
        assert!(u.record.energy[1] > u.record.energy[0]);
    }

    #[test]
    fn emphasis_corpus_spans_leave_a_remainder() {
        let spec = CorpusSpec {
            seed: 3,
            size: 50,
            emphasis_mode: EmphasisMode::PitchShift,
            ..Default::default()
        };
        for u in make_synthetic_corpus(&spec).unwrap() {
            let n = u.record.text.chars().count();
            let d = &u.record.decorations[0];
            assert!(d.end - d.start < n);
        }
    }

    #[test]
    fn reserved_space_rejected() {
        let spec = CorpusSpec {
            alphabet: vec!['a', ' '],
            ..Default::default()
        };
        assert!(make_synthetic_corpus(&spec).is_err());
    }

    #[test]
    fn record_validation_names_the_utterance() {
        let mut u = synthesize_utterance("bad_one", &['a', 'b'], &[], &VariantProsody::default(), false, 80)
            .unwrap()
            .record;
        u.durations.pop();
        let err = u.validate().unwrap_err().to_string();
        assert!(err.contains("bad_one"), "{err}");
    }
}
