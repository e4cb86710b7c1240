use proptest::prelude::*;

use vtts::acoustic::{FrontInput, ModelConfig};
use vtts::audio::{MelAnalyzer, HOP_LENGTH};
use vtts::config::ExperimentConfig;
use vtts::slicer::slice;
use vtts::tensorfile::{read_mat, write_mat, Tensor};
use vtts::textimg::{render_chars, Decoration, DecorationKind};
use vtts::{Mat, Model32};

fn tiny_model(seed: u64) -> Model32 {
    let exp = ExperimentConfig::parse(
        "model_dim = 16\nff_hidden = 16\npredictor_hidden = 16\nextractor_channels = 2\n\
         encoder_blocks = 1\ndecoder_blocks = 1\nattention_heads = 2\nn_mels = 20\n",
    )
    .unwrap();
    let config: ModelConfig = exp.model;
    Model32::new(config, None, seed).unwrap()
}

#[test]
fn synthesis_equals_manual_composition() {
    let m = tiny_model(1);
    let text: Vec<char> = "hello".chars().collect();
    let decorations = [Decoration::new(DecorationKind::Underline, 1, 3)];
    let input = m.prepare(&text, &decorations, 1).unwrap();
    let (mel, pred) = m.infer(&input).unwrap();

    let image = render_chars(&text, &m.config.render.with_variant(1), &decorations).unwrap();
    let manual_input = FrontInput::Slices(slice(&image, m.config.slice).unwrap());
    assert_eq!(manual_input, input);
    let features = m.features(&manual_input).unwrap();
    let hidden = m.encode(&features).unwrap();
    let (regulated, manual_pred) = m.variance_adapt(&hidden, None).unwrap();
    let manual_mel = m.decode(&regulated).unwrap();

    assert_eq!(manual_pred, pred);
    assert_eq!(manual_mel.frames, mel.frames);
    assert_eq!(mel.num_frames(), pred.durations.iter().sum::<usize>());
    assert_eq!(mel.frames.cols(), 20);
}

#[test]
fn synthesis_is_repeatable() {
    let m = tiny_model(2);
    let input = m.prepare(&['a', 'b'], &[], 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.vtts"), dir.path().join("b.vtts"));
    write_mat(&a, &m.infer(&input).unwrap().0.frames).unwrap();
    write_mat(&b, &tiny_model(2).infer(&input).unwrap().0.frames).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn waveform_length_follows_frames() {
    let analyzer = MelAnalyzer::new(20);
    for frames in [1usize, 5, 17] {
        let mel = Mat::<f32>::from_fn(frames, 20, |t, k| ((t + k) % 3) as f32);
        let wav = analyzer.griffin_lim(&mel, 3);
        let expected = frames * HOP_LENGTH;
        assert!(
            wav.len().abs_diff(expected) <= HOP_LENGTH,
            "{frames} frames -> {} samples",
            wav.len()
        );
        assert!(wav.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn silence_floor_gives_near_silence() {
    let analyzer = MelAnalyzer::new(80);
    let wav = analyzer.griffin_lim(&Mat::<f64>::zeros(8, 80), 60);
    assert!(wav.iter().all(|v| v.abs() < 1e-3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tensor_round_trip(rows in 0usize..6, cols in 0usize..6, seed in any::<u32>()) {
        let m = Mat::<f32>::from_fn(rows, cols, |r, c| {
            f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add((r * 7 + c) as u32) & 0x7f7f_ffff)
        });
        let bytes = Tensor::from_mat(&m).encode();
        prop_assert_eq!(bytes.len(), 12 + 8 + 4 * rows * cols);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.vtts");
        write_mat(&p, &m).unwrap();
        let back: Mat<f32> = read_mat(&p).unwrap();
        prop_assert_eq!(
            back.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        prop_assert_eq!(back.shape(), (rows, cols));
    }
}
