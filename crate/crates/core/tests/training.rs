use vtts::acoustic::FrontEndKind;
use vtts::config::ExperimentConfig;
use vtts::data::{make_synthetic_corpus, CorpusSpec, CorpusStats, EmphasisMode, SplitLabel, Utterance};
use vtts::eval::{eval_emphasis, split_cer};
use vtts::nn::Ctx;
use vtts::textimg::{composed_char, DecorationKind};
use vtts::train::{fit, OptimizerKind};
use vtts::{Error, Trainer32};

const TINY: &str = "
model_dim = 16
ff_hidden = 16
predictor_hidden = 16
extractor_channels = 2
encoder_blocks = 1
decoder_blocks = 1
attention_heads = 2
n_mels = 24
pitch_bins = 32
energy_bins = 32
batch_size = 2
";

fn tiny() -> ExperimentConfig {
    ExperimentConfig::parse(TINY).unwrap()
}

fn corpus(seed: u64, size: usize, alphabet: &str) -> Vec<Utterance> {
    make_synthetic_corpus(&CorpusSpec {
        seed,
        size,
        alphabet: alphabet.chars().collect(),
        n_mels: 24,
        min_len: 3,
        max_len: 5,
        ..CorpusSpec::default()
    })
    .unwrap()
}

fn trainer(exp: &ExperimentConfig, data: &[Utterance]) -> Trainer32 {
    Trainer32::from_experiment(exp, data.iter().map(|u| u.record.text.as_str())).unwrap()
}

fn params_of(t: &Trainer32) -> Vec<f32> {
    t.model
        .params
        .values()
        .iter()
        .flat_map(|m| m.as_slice().to_vec())
        .collect()
}

#[test]
fn same_seed_same_run() {
    let data = corpus(1, 6, "abcd");
    let mut exp = tiny();
    exp.train.max_steps = 4;
    let run = |exp: &ExperimentConfig| {
        let mut t = trainer(exp, &data);
        let ex = t.prepare(&data).unwrap();
        let hist = t.fit(&ex, None).unwrap();
        (params_of(&t), hist)
    };
    let (pa, ha) = run(&exp);
    let (pb, hb) = run(&exp);
    assert_eq!(pa, pb);
    assert_eq!(ha, hb);
    exp.train.seed = 99;
    assert_ne!(run(&exp).0, pa);
}

#[test]
fn resume_continues_where_it_stopped() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(2, 6, "abcd");
    let manifest = vtts::data::write_corpus(&dir.path().join("corpus"), &mut data.clone()).unwrap();

    let mut exp = tiny();
    exp.train.max_steps = 6;
    let full = fit(&exp, &manifest, &dir.path().join("full"), None, None).unwrap();

    exp.train.max_steps = 3;
    exp.train.checkpoint_every = 3;
    let part = dir.path().join("part");
    let first = fit(&exp, &manifest, &part, None, None).unwrap();
    assert_eq!(first.step, 3);

    let mut resumed = Trainer32::load(&part.join("step_000003.ckpt")).unwrap();
    assert_eq!(resumed.step, 3);
    resumed.config.max_steps = 6;
    let ex = resumed.prepare(&data).unwrap();
    let hist = resumed.fit(&ex, Some(&part)).unwrap();
    assert_eq!(hist.first().map(|h| h.0), Some(4));
    assert_eq!(resumed.step, 6);
    assert_eq!(params_of(&resumed), params_of(&full));
    assert_eq!(resumed.model.buffers.values(), full.model.buffers.values());

    let log = std::fs::read_to_string(part.join("loss.tsv")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| l.split('\t').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(steps, (1..=6).collect::<Vec<_>>());
}

#[test]
fn fine_tune_resets_step_and_lowers_rate() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(3, 4, "abc");
    let mut exp = tiny();
    exp.train.max_steps = 2;
    let mut t = trainer(&exp, &data);
    let ex = t.prepare(&data).unwrap();
    t.fit(&ex, None).unwrap();
    let path = dir.path().join("a.ckpt");
    t.save(&path).unwrap();
    let ft = Trainer32::fine_tune_from(&path, 1e-4, 5).unwrap();
    assert_eq!(ft.step, 0);
    assert_eq!(ft.optimizer.t, 0);
    assert_eq!(ft.config.learning_rate, 1e-4);
    assert_eq!(params_of(&ft), params_of(&t));
}

#[test]
fn sgd_update_respects_clip_bound() {
    let data = corpus(4, 4, "abcd");
    let mut exp = tiny();
    exp.train.optimizer = OptimizerKind::Sgd;
    exp.train.learning_rate = 0.05;
    exp.train.grad_clip_norm = 0.01;
    let mut t = trainer(&exp, &data);
    let ex = t.prepare(&data).unwrap();
    let batch: Vec<_> = ex.iter().collect();
    for _ in 0..3 {
        let before = params_of(&t);
        t.train_step(&batch).unwrap();
        let moved: f64 = params_of(&t)
            .iter()
            .zip(&before)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(moved > 0.0);
        assert!(moved <= 0.01 * 0.05 * (1.0 + 1e-3), "moved {moved}");
    }
}

#[test]
fn evaluation_ignores_batch_company() {
    let data = corpus(5, 3, "abcd");
    let mut exp = tiny();
    exp.train.max_steps = 3;
    let mut t = trainer(&exp, &data);
    let ex = t.prepare(&data).unwrap();
    t.fit(&ex, None).unwrap();

    let alone = t.evaluate(&ex[..1]).unwrap();
    let first_in_pair = {
        let both = t.evaluate(&ex[..2]).unwrap();
        let second = t.evaluate(&ex[1..2]).unwrap();
        2.0 * both.mel_l1 - second.mel_l1
    };
    assert!((alone.mel_l1 - first_in_pair).abs() < 1e-9);

    let input = &ex[0].input;
    let (a, _) = t.model.infer(input).unwrap();
    t.model.infer(&ex[2].input).unwrap();
    let (b, _) = t.model.infer(input).unwrap();
    assert_eq!(a.frames, b.frames);
    let (c, _) = t.model.forward(input, None, &mut Ctx::eval()).unwrap();
    assert_eq!(a.frames, c.frames);
}

#[test]
fn f64_model_trains_too() {
    let data = corpus(6, 4, "abc");
    let mut exp = tiny();
    exp.train.max_steps = 2;
    let mut t = vtts::Trainer64::from_experiment(&exp, data.iter().map(|u| u.record.text.as_str())).unwrap();
    let ex = t.prepare(&data).unwrap();
    let hist = t.fit(&ex, None).unwrap();
    assert!(hist.iter().all(|(_, r)| r.is_finite()));
}

#[test]
fn non_finite_loss_is_reported_with_step() {
    let data = corpus(7, 2, "ab");
    let mut t = trainer(&tiny(), &data);
    let ex = t.prepare(&data).unwrap();
    for p in t.model.params.values_mut() {
        p.as_mut_slice().iter_mut().for_each(|v| *v = f32::NAN);
    }
    match t.train_step(&[&ex[0]]) {
        Err(Error::NonFinite { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn untrained_emphasis_is_near_chance() {
    let records: Vec<_> = make_synthetic_corpus(&CorpusSpec {
        seed: 8,
        size: 60,
        alphabet: "abcdefgh".chars().collect(),
        emphasis_mode: EmphasisMode::PitchShift,
        n_mels: 24,
        ..CorpusSpec::default()
    })
    .unwrap()
    .into_iter()
    .map(|u| u.record)
    .collect();
    let t = trainer(&tiny(), &[]);
    let r = eval_emphasis(&t.model, &records, None).unwrap();
    assert!(r.utterance_ids.len() >= 50);
    assert!((0.2..=0.8).contains(&r.fraction), "{}", r.fraction);
}

#[test]
fn baseline_handles_known_characters_better_than_unknown() {
    let train = corpus(9, 24, "abcdef");
    let mut exp = tiny();
    exp.model.front_end = FrontEndKind::Baseline;
    exp.train.max_steps = 250;
    exp.train.batch_size = 4;
    exp.train.learning_rate = 3e-3;
    let mut t = trainer(&exp, &train);
    let ex = t.prepare(&train).unwrap();
    t.fit(&ex, None).unwrap();

    let stats = CorpusStats::from_texts(train.iter().map(|u| u.record.text.as_str()));
    let mut test: Vec<_> = corpus(10, 10, "abcdef").into_iter().map(|u| u.record).collect();
    test.extend(corpus(11, 10, "xy").into_iter().map(|u| u.record));
    let unseen = composed_char(3, 4);
    test.extend(corpus(12, 5, &format!("ab{unseen}")).into_iter().map(|u| u.record));
    let candidates: Vec<char> = format!("abcdefxy{unseen}").chars().collect();
    let scores = split_cer(&t.model, &test, &stats, &candidates).unwrap();
    let known = scores[&SplitLabel::InVocab].mean_cer;
    let oov = scores[&SplitLabel::Oov].mean_cer;
    assert!(known <= oov, "in-vocabulary {known} vs oov {oov}");
}

#[test]
fn single_step_run_leaves_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = corpus(13, 2, "ab");
    let manifest = vtts::data::write_corpus(&dir.path().join("corpus"), &mut data).unwrap();
    let mut exp = tiny();
    exp.train.max_steps = 1;
    let t = fit(&exp, &manifest, &dir.path().join("run"), None, None).unwrap();
    assert_eq!(t.step, 1);
    assert!(dir.path().join("run/step_000001.ckpt").exists());
}

#[test]
fn control_input_gives_identical_contrast() {
    let records: Vec<_> = make_synthetic_corpus(&CorpusSpec {
        seed: 14,
        size: 5,
        alphabet: "abcd".chars().collect(),
        emphasis_mode: EmphasisMode::PitchShift,
        n_mels: 24,
        ..CorpusSpec::default()
    })
    .unwrap()
    .into_iter()
    .map(|u| u.record)
    .collect();
    let t = trainer(&tiny(), &[]);
    let r = eval_emphasis(&t.model, &records, None).unwrap();
    assert!(r.utterance_ids.len() >= 4);
    let same = eval_emphasis(&t.model, &records, Some(DecorationKind::None)).unwrap();
    assert_eq!(same.decorated_contrast, same.control_contrast);
    assert_eq!(same.control_contrast, r.control_contrast);
}
