use proptest::prelude::*;

use vtts::slicer::{slice, SliceSpec};
use vtts::textimg::{composed_char, render, render_chars, Decoration, DecorationKind, RenderSpec};
use vtts::Mat;

/// Independent reference: each window gathers pixel columns one by one,
/// reading zero outside the image.
fn reference_window(pixels: &Mat<f32>, i: usize, w: usize, c: usize) -> Mat<f32> {
    let half = (c as isize - 1) / 2;
    Mat::from_fn(pixels.rows(), c * w, |y, x| {
        let src = (i as isize - half) * w as isize + x as isize;
        if src < 0 || src as usize >= pixels.cols() {
            0.0
        } else {
            pixels[(y, src as usize)]
        }
    })
}

fn text_strategy() -> impl Strategy<Value = Vec<char>> {
    prop::collection::vec(
        prop_oneof![
            Just(' '),
            (0x21u32..0x7f).prop_map(|c| char::from_u32(c).unwrap()),
            (0u32..8, 0u32..8).prop_map(|(a, b)| composed_char(a, b)),
        ],
        0..10,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn slices_match_reference(text in text_strategy(), half in 0usize..4, variant in 0u32..3) {
        let c = 2 * half + 1;
        let spec = RenderSpec::default().with_variant(variant);
        let img = render_chars(&text, &spec, &[]).unwrap();
        let s = slice(&img, SliceSpec::new(c).unwrap()).unwrap();
        prop_assert_eq!(s.len(), text.len());
        for (i, got) in s.slices.iter().enumerate() {
            prop_assert_eq!(got, &reference_window(&img.pixels, i, spec.char_width, c));
        }
    }

    #[test]
    fn image_geometry(text in text_strategy()) {
        let spec = RenderSpec::default();
        let img = render_chars(&text, &spec, &[]).unwrap();
        prop_assert_eq!(img.height(), spec.char_height);
        prop_assert_eq!(img.width(), text.len() * spec.char_width);
        prop_assert!(img.pixels.as_slice().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}

#[test]
fn window_shape() {
    let spec = RenderSpec::default();
    let img = render("hello", &spec, &[]).unwrap();
    for c in [1, 3, 5] {
        let s = slice(&img, SliceSpec::new(c).unwrap()).unwrap();
        for w in &s.slices {
            assert_eq!(w.shape(), (spec.char_height, c * spec.char_width));
        }
    }
}

#[test]
fn even_or_zero_context_rejected() {
    for c in [0, 2, 4] {
        assert!(SliceSpec::new(c).is_err());
    }
}

#[test]
fn empty_text_has_no_slices() {
    let img = render("", &RenderSpec::default(), &[]).unwrap();
    assert_eq!(img.width(), 0);
    assert!(slice(&img, SliceSpec::default()).unwrap().is_empty());
}

#[test]
fn decorations_change_only_their_cells() {
    let spec = RenderSpec::default();
    let plain = render("abcd", &spec, &[]).unwrap();
    for kind in [DecorationKind::Underline, DecorationKind::Bold, DecorationKind::Italic] {
        let deco = render("abcd", &spec, &[Decoration::new(kind, 1, 3)]).unwrap();
        assert_eq!(deco.cell(0), plain.cell(0), "{kind}");
        assert_eq!(deco.cell(3), plain.cell(3), "{kind}");
        assert_ne!(
            (deco.cell(1), deco.cell(2)),
            (plain.cell(1), plain.cell(2)),
            "{kind} left the span unchanged"
        );
    }
}

#[test]
fn rendering_is_deterministic() {
    let spec = RenderSpec::default().with_variant(2);
    let a = render("x\u{E012}y", &spec, &[]).unwrap();
    let b = render("x\u{E012}y", &spec, &[]).unwrap();
    assert_eq!(a.pixels, b.pixels);
}

#[test]
fn out_of_range_decoration_rejected() {
    let spec = RenderSpec::default();
    assert!(render("ab", &spec, &[Decoration::new(DecorationKind::Bold, 1, 3)]).is_err());
    assert!(render("ab", &spec, &[Decoration::new(DecorationKind::Bold, 1, 1)]).is_err());
}
