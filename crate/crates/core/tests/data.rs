use std::collections::HashMap;

use proptest::prelude::*;

use vtts::data::{
    cer, classify_sentence, levenshtein, load_manifest, load_utterances, make_synthetic_corpus, template_bins,
    write_corpus, CorpusSpec, CorpusStats, EmphasisMode, SplitLabel, VariantProsody, RARE_THRESHOLD,
};
use vtts::textimg::{composed_char, DecorationKind};
use vtts::Error;

/// Memoized recursive edit distance, written independently of the
/// library's row-based version.
fn edit_oracle(a: &[char], b: &[char]) -> usize {
    fn go(a: &[char], b: &[char], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j, memo)
                .min(go(a, b, i, j + 1, memo))
                .min(go(a, b, i + 1, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

fn small_string() -> impl Strategy<Value = String> {
    "[abc]{0,8}"
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn levenshtein_matches_oracle(a in small_string(), b in small_string()) {
        let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        prop_assert_eq!(levenshtein(&a, &b), edit_oracle(&a, &b));
    }

    #[test]
    fn metric_axioms(a in small_string(), b in small_string(), c in small_string()) {
        let (a, b, c): (Vec<char>, Vec<char>, Vec<char>) =
            (a.chars().collect(), b.chars().collect(), c.chars().collect());
        prop_assert_eq!(levenshtein(&a, &a), 0);
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
    }

    #[test]
    fn cer_is_normalized_distance(a in "[abc]{1,8}", b in small_string()) {
        let expected = edit_oracle(&a.chars().collect::<Vec<_>>(), &b.chars().collect::<Vec<_>>()) as f64
            / a.chars().count() as f64;
        prop_assert!((cer(&a, &b).unwrap() - expected).abs() < 1e-12);
    }
}

#[test]
fn cer_empty_reference_is_error() {
    assert!(cer("", "").is_err());
    assert_eq!(cer("abc", "").unwrap(), 1.0);
}

#[test]
fn split_classification() {
    let stats = CorpusStats::from_texts(["aaab", "aab"]);
    assert_eq!(stats.count('a'), 5);
    assert_eq!(stats.count('b'), 2);
    assert!(stats.count('b') < RARE_THRESHOLD);
    assert_eq!(classify_sentence("aa", &stats, RARE_THRESHOLD), SplitLabel::InVocab);
    assert_eq!(classify_sentence("ab", &stats, RARE_THRESHOLD), SplitLabel::Rare);
    assert_eq!(classify_sentence("abz", &stats, RARE_THRESHOLD), SplitLabel::Oov);
}

fn spec() -> CorpusSpec {
    CorpusSpec {
        seed: 3,
        size: 6,
        alphabet: vec!['a', 'b', composed_char(1, 2)],
        emphasis_mode: EmphasisMode::PitchShift,
        emphasis_kind: DecorationKind::Bold,
        variant_map: vec![
            VariantProsody {
                variant: 0,
                pitch_shift: 0.0,
                frames_per_char: 4,
            },
            VariantProsody {
                variant: 1,
                pitch_shift: 0.5,
                frames_per_char: 3,
            },
        ],
        n_mels: 64,
        ..CorpusSpec::default()
    }
}

#[test]
fn corpus_round_trips_through_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut corpus = make_synthetic_corpus(&spec()).unwrap();
    let manifest = write_corpus(dir.path(), &mut corpus).unwrap();
    let back = load_utterances(&manifest).unwrap();
    assert_eq!(back.len(), corpus.len());
    for (a, b) in corpus.iter().zip(&back) {
        assert_eq!(a.record, b.record);
        assert_eq!(a.mel, b.mel);
        assert_eq!(a.mel.rows(), a.record.durations.iter().sum::<usize>());
        assert_eq!(a.mel.cols(), 64);
    }
}

#[test]
fn corpus_is_seeded() {
    let a = make_synthetic_corpus(&spec()).unwrap();
    let b = make_synthetic_corpus(&spec()).unwrap();
    assert_eq!(
        a.iter().map(|u| &u.record).collect::<Vec<_>>(),
        b.iter().map(|u| &u.record).collect::<Vec<_>>()
    );
    let c = make_synthetic_corpus(&CorpusSpec { seed: 4, ..spec() }).unwrap();
    assert_ne!(
        a.iter().map(|u| &u.record.text).collect::<Vec<_>>(),
        c.iter().map(|u| &u.record.text).collect::<Vec<_>>()
    );
}

#[test]
fn emphasized_frames_carry_higher_pitch() {
    for u in make_synthetic_corpus(&spec()).unwrap() {
        let r = &u.record;
        assert_eq!(r.decorations.len(), 1);
        let d = r.decorations[0];
        assert!(d.end - d.start < r.text.chars().count());
        let base: f64 = r.pitch.iter().cloned().fold(f64::INFINITY, f64::min);
        for i in 0..r.pitch.len() {
            if d.contains(i) {
                assert!(r.pitch[i] > base, "{}: char {i}", r.utterance_id);
            }
        }
    }
}

#[test]
fn template_bins_distinguish_composed_components() {
    let a = template_bins(composed_char(1, 2));
    let b = template_bins(composed_char(1, 3));
    let c = template_bins(composed_char(2, 2));
    assert_eq!(a[0], b[0]);
    assert_ne!(a[1], b[1]);
    assert_eq!(a[1], c[1]);
}

fn write_lines(dir: &std::path::Path, lines: &[String]) -> std::path::PathBuf {
    let p = dir.join("manifest.jsonl");
    std::fs::write(&p, lines.join("\n")).unwrap();
    p
}

#[test]
fn empty_manifest_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.jsonl");
    std::fs::write(&p, "").unwrap();
    assert!(load_manifest(&p).unwrap().is_empty());
}

#[test]
fn manifest_errors_name_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let mut corpus = make_synthetic_corpus(&spec()).unwrap();
    let manifest = write_corpus(dir.path(), &mut corpus).unwrap();
    let good: Vec<String> = std::fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    let id = corpus[1].record.utterance_id.clone();

    // durations that no longer sum to the mel length
    let mut lines = good.clone();
    let mut v: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    v["durations"] = serde_json::Value::String("1,1".into());
    lines[1] = v.to_string();
    match load_manifest(&write_lines(dir.path(), &lines)) {
        Err(Error::Record { id: got, .. }) => assert_eq!(got, id),
        other => panic!("expected a record error, got {other:?}"),
    }

    let mut lines = good.clone();
    lines[2] = "{not json".into();
    match load_manifest(&write_lines(dir.path(), &lines)) {
        Err(Error::Record { id, .. }) => assert_eq!(id, "line 3"),
        other => panic!("expected a record error, got {other:?}"),
    }

    let mut lines = good;
    let mut v: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    v["mel_path"] = serde_json::Value::String("mels/missing.vtts".into());
    lines[0] = v.to_string();
    let err = load_manifest(&write_lines(dir.path(), &lines)).unwrap_err();
    assert!(err.to_string().contains(&corpus[0].record.utterance_id), "{err}");
}
