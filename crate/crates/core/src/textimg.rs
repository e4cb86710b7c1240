//! Fixed-cell rendering of text into grayscale images.
//!
//! Ink is `1.0` on a `0.0` background. Every character occupies exactly one
//! `w × h` cell, so a line of `n` characters is `h × n·w` pixels.
//!
//! The built-in synthetic font draws each code point as a 7×5 bitmap derived
//! from an integer hash (see [`synthetic_glyph_bitmap`]) and upscales it with
//! nearest-neighbour sampling. It needs no font files and is bit-exact on
//! every platform.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mat::Mat;

pub const INK: f32 = 1.0;
pub const BACKGROUND: f32 = 0.0;

pub const GLYPH_ROWS: usize = 7;
pub const GLYPH_COLS: usize = 5;

/// Rows of a composed glyph taken from its first component.
pub const COMPOSED_TOP_ROWS: usize = 3;
/// First code point of the composed synthetic block (private use area).
pub const COMPOSED_BASE: u32 = 0xE000;
/// Components per axis of the composed block; `a, b < COMPOSED_AXIS`.
pub const COMPOSED_AXIS: u32 = 16;
const TOP_COMPONENT_BASE: u32 = 0xE100;
const BOTTOM_COMPONENT_BASE: u32 = 0xE200;

const HASH_SALT: u64 = 0x5654_5453_4749_4c59; // "VTTSGLY" + 'Y'

/// Where glyph shapes come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FontSource {
    /// Procedural 7×5 hash font; the variant acts as a typeface.
    Synthetic { variant: u32 },
    /// TrueType/OpenType file, rasterized per glyph and centered in the cell.
    File { path: PathBuf, typeface: u32 },
}

impl fmt::Display for FontSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FontSource::Synthetic { variant } => write!(f, "synthetic:{variant}"),
            FontSource::File { path, typeface } => write!(f, "file:{}:{typeface}", path.display()),
        }
    }
}

impl FromStr for FontSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("synthetic:") {
            let variant = rest
                .parse()
                .map_err(|_| Error::Config(format!("bad synthetic font variant {rest:?}")))?;
            return Ok(FontSource::Synthetic { variant });
        }
        if let Some(rest) = s.strip_prefix("file:") {
            let (path, typeface) = match rest.rsplit_once(':') {
                Some((p, t)) if t.parse::<u32>().is_ok() => (p, t.parse().unwrap_or(0)),
                _ => (rest, 0),
            };
            return Ok(FontSource::File {
                path: PathBuf::from(path),
                typeface,
            });
        }
        Err(Error::Config(format!(
            "font must be synthetic:<variant> or file:<path>[:<typeface>], got {s:?}"
        )))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderSpec {
    pub char_width: usize,
    pub char_height: usize,
    /// Point size, only used by file fonts.
    pub font_size: usize,
    pub font: FontSource,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            char_width: 30,
            char_height: 30,
            font_size: 20,
            font: FontSource::Synthetic { variant: 0 },
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.char_width == 0 || self.char_height == 0 || self.font_size == 0 {
            return Err(Error::Config(format!(
                "char_width, char_height and font_size must be positive (got {}, {}, {})",
                self.char_width, self.char_height, self.font_size
            )));
        }
        Ok(())
    }

    /// Same spec with the typeface variant replaced.
    pub fn with_variant(&self, variant: u32) -> Self {
        let font = match &self.font {
            FontSource::Synthetic { .. } => FontSource::Synthetic { variant },
            FontSource::File { path, .. } => FontSource::File {
                path: path.clone(),
                typeface: variant,
            },
        };
        Self { font, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecorationKind {
    None,
    Underline,
    Bold,
    Italic,
}

impl fmt::Display for DecorationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecorationKind::None => "none",
            DecorationKind::Underline => "underline",
            DecorationKind::Bold => "bold",
            DecorationKind::Italic => "italic",
        })
    }
}

impl FromStr for DecorationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DecorationKind::None),
            "underline" => Ok(DecorationKind::Underline),
            "bold" => Ok(DecorationKind::Bold),
            "italic" => Ok(DecorationKind::Italic),
            _ => Err(Error::Input(format!("unknown decoration kind {s:?}"))),
        }
    }
}

/// A decoration over the half-open character range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Decoration {
    pub kind: DecorationKind,
    pub start: usize,
    pub end: usize,
}

impl Decoration {
    pub fn new(kind: DecorationKind, start: usize, end: usize) -> Self {
        Self { kind, start, end }
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..self.end).contains(&i)
    }
}

/// Checks span bounds and pairwise disjointness for a text of `n` characters.
pub fn validate_decorations(decorations: &[Decoration], n: usize) -> Result<()> {
    for d in decorations {
        if d.start >= d.end || d.end > n {
            return Err(Error::Input(format!(
                "decoration {}:{}:{} out of range for {n} characters",
                d.kind, d.start, d.end
            )));
        }
    }
    for (i, a) in decorations.iter().enumerate() {
        for b in &decorations[i + 1..] {
            if a.start < b.end && b.start < a.end {
                return Err(Error::Input(format!(
                    "decorations [{}, {}) and [{}, {}) overlap",
                    a.start, a.end, b.start, b.end
                )));
            }
        }
    }
    Ok(())
}

/// Serializes as `kind:start:end;kind:start:end`.
pub fn format_decorations(decorations: &[Decoration]) -> String {
    decorations
        .iter()
        .map(|d| format!("{}:{}:{}", d.kind, d.start, d.end))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn parse_decorations(s: &str) -> Result<Vec<Decoration>> {
    s.split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|part| {
            let fields: Vec<&str> = part.split(':').collect();
            if fields.len() != 3 {
                return Err(Error::Input(format!("decoration {part:?} is not kind:start:end")));
            }
            let parse = |f: &str| {
                f.parse::<usize>()
                    .map_err(|_| Error::Input(format!("bad decoration index {f:?}")))
            };
            Ok(Decoration::new(
                fields[0].parse()?,
                parse(fields[1])?,
                parse(fields[2])?,
            ))
        })
        .collect()
}

/// Rendered line of text.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualTextImage {
    /// `h × n·w`, values in `[0, 1]`.
    pub pixels: Mat<f32>,
    pub char_count: usize,
    pub spec: RenderSpec,
}

impl VisualTextImage {
    pub fn height(&self) -> usize {
        self.pixels.rows()
    }

    pub fn width(&self) -> usize {
        self.pixels.cols()
    }

    /// Copy of character cell `i`.
    pub fn cell(&self, i: usize) -> Mat<f32> {
        self.pixels.cols_range(i * self.spec.char_width, self.spec.char_width)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_pgm(&self.pixels, path)
    }
}

/// A rendered cell plus whether the font lacked the glyph.
#[derive(Clone, Debug, PartialEq)]
pub struct Glyph {
    pub cell: Mat<f32>,
    pub fallback: bool,
}

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Code point of the composed glyph stacking top component `a` over bottom
/// component `b`.
pub fn composed_codepoint(a: u32, b: u32) -> u32 {
    assert!(a < COMPOSED_AXIS && b < COMPOSED_AXIS, "component index out of range");
    COMPOSED_BASE + a * COMPOSED_AXIS + b
}

/// Inverse of [`composed_codepoint`].
pub fn composed_components(codepoint: u32) -> Option<(u32, u32)> {
    let off = codepoint.checked_sub(COMPOSED_BASE)?;
    (off < COMPOSED_AXIS * COMPOSED_AXIS).then_some((off / COMPOSED_AXIS, off % COMPOSED_AXIS))
}

pub fn composed_char(a: u32, b: u32) -> char {
    char::from_u32(composed_codepoint(a, b)).expect("private use code point")
}

/// 7×5 bitmap of the synthetic font.
///
/// * U+0020 is always blank.
/// * Composed code points (see [`composed_codepoint`]) take their top
///   [`COMPOSED_TOP_ROWS`] rows from top component `a` and the remaining rows
///   from bottom component `b`; components are hashed like ordinary code
///   points at `0xE100 + a` and `0xE200 + b`.
/// * Every other code point: bit `r·5 + c` of
///   `mix64(((codepoint << 32) | variant) ^ 0x5654_5453_4749_4c59)` sets
///   pixel `(r, c)`.
pub fn synthetic_glyph_bitmap(codepoint: u32, variant_id: u32) -> [[bool; GLYPH_COLS]; GLYPH_ROWS] {
    if codepoint == 0x20 {
        return [[false; GLYPH_COLS]; GLYPH_ROWS];
    }
    if let Some((a, b)) = composed_components(codepoint) {
        let top = hashed_bitmap(TOP_COMPONENT_BASE + a, variant_id);
        let bottom = hashed_bitmap(BOTTOM_COMPONENT_BASE + b, variant_id);
        let mut out = bottom;
        out[..COMPOSED_TOP_ROWS].copy_from_slice(&top[..COMPOSED_TOP_ROWS]);
        return out;
    }
    hashed_bitmap(codepoint, variant_id)
}

fn hashed_bitmap(codepoint: u32, variant_id: u32) -> [[bool; GLYPH_COLS]; GLYPH_ROWS] {
    let h = mix64((((codepoint as u64) << 32) | variant_id as u64) ^ HASH_SALT);
    let mut out = [[false; GLYPH_COLS]; GLYPH_ROWS];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, px) in row.iter_mut().enumerate() {
            *px = (h >> (r * GLYPH_COLS + c)) & 1 == 1;
        }
    }
    out
}

/// Nearest-neighbour upscale of a synthetic bitmap to an `h × w` cell.
fn synthetic_cell(codepoint: u32, variant: u32, w: usize, h: usize) -> Mat<f32> {
    let bm = synthetic_glyph_bitmap(codepoint, variant);
    Mat::from_fn(h, w, |y, x| {
        if bm[y * GLYPH_ROWS / h][x * GLYPH_COLS / w] {
            INK
        } else {
            BACKGROUND
        }
    })
}

enum LoadedFont {
    Synthetic(u32),
    #[cfg(feature = "font-file")]
    File(fontdue::Font),
}

impl LoadedFont {
    fn load(spec: &RenderSpec) -> Result<Self> {
        match &spec.font {
            FontSource::Synthetic { variant } => Ok(LoadedFont::Synthetic(*variant)),
            #[cfg(feature = "font-file")]
            FontSource::File { path, typeface } => {
                let bytes = std::fs::read(path)?;
                let settings = fontdue::FontSettings {
                    collection_index: *typeface,
                    ..fontdue::FontSettings::default()
                };
                let font =
                    fontdue::Font::from_bytes(bytes, settings).map_err(|e| Error::format(path, e.to_string()))?;
                Ok(LoadedFont::File(font))
            }
            #[cfg(not(feature = "font-file"))]
            FontSource::File { path, .. } => Err(Error::Unsupported(format!(
                "font file {} requires the `font-file` feature",
                path.display()
            ))),
        }
    }

    fn glyph(&self, ch: char, spec: &RenderSpec) -> Glyph {
        let (w, h) = (spec.char_width, spec.char_height);
        match self {
            LoadedFont::Synthetic(variant) => Glyph {
                cell: synthetic_cell(ch as u32, *variant, w, h),
                fallback: false,
            },
            #[cfg(feature = "font-file")]
            LoadedFont::File(font) => rasterize_centered(font, ch, spec),
        }
    }
}

#[cfg(feature = "font-file")]
fn rasterize_centered(font: &fontdue::Font, ch: char, spec: &RenderSpec) -> Glyph {
    let (w, h) = (spec.char_width, spec.char_height);
    let fallback = font.lookup_glyph_index(ch) == 0 && !ch.is_whitespace();
    let (metrics, coverage) = font.rasterize(ch, spec.font_size as f32);
    let mut cell = Mat::filled(h, w, BACKGROUND);
    if ch.is_whitespace() || metrics.width == 0 || metrics.height == 0 {
        return Glyph { cell, fallback };
    }
    // center the bitmap box in the cell; overflow is clipped
    let ox = (w as isize - metrics.width as isize) / 2;
    let oy = (h as isize - metrics.height as isize) / 2;
    for gy in 0..metrics.height {
        for gx in 0..metrics.width {
            let (y, x) = (gy as isize + oy, gx as isize + ox);
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                continue;
            }
            cell[(y as usize, x as usize)] = coverage[gy * metrics.width + gx] as f32 / 255.0;
        }
    }
    Glyph { cell, fallback }
}

/// Renders one character into its `h × w` cell.
pub fn render_glyph(ch: char, spec: &RenderSpec) -> Result<Glyph> {
    spec.validate()?;
    Ok(LoadedFont::load(spec)?.glyph(ch, spec))
}

/// Renders a line of text and applies its decorations.
pub fn render(text: &str, spec: &RenderSpec, decorations: &[Decoration]) -> Result<VisualTextImage> {
    render_chars(&text.chars().collect::<Vec<_>>(), spec, decorations)
}

pub fn render_chars(chars: &[char], spec: &RenderSpec, decorations: &[Decoration]) -> Result<VisualTextImage> {
    spec.validate()?;
    validate_decorations(decorations, chars.len())?;
    let font = LoadedFont::load(spec)?;
    let (w, h) = (spec.char_width, spec.char_height);
    let mut pixels = Mat::filled(h, chars.len() * w, BACKGROUND);
    for (i, &ch) in chars.iter().enumerate() {
        let glyph = font.glyph(ch, spec);
        for y in 0..h {
            pixels.row_mut(y)[i * w..(i + 1) * w].copy_from_slice(glyph.cell.row(y));
        }
    }
    for d in decorations {
        if d.kind == DecorationKind::None {
            continue;
        }
        let run = pixels.cols_range(d.start * w, (d.end - d.start) * w);
        let run = apply_decoration(&run, d.kind, spec);
        for y in 0..h {
            pixels.row_mut(y)[d.start * w..d.end * w].copy_from_slice(run.row(y));
        }
    }
    Ok(VisualTextImage {
        pixels,
        char_count: chars.len(),
        spec: spec.clone(),
    })
}

/// Applies one decoration to a run of `k` consecutive cells (`h × k·w`).
/// Nothing outside the run is read or written.
pub fn apply_decoration(run: &Mat<f32>, kind: DecorationKind, spec: &RenderSpec) -> Mat<f32> {
    let (h, width) = run.shape();
    match kind {
        DecorationKind::None => run.clone(),
        DecorationKind::Underline => {
            let mut out = run.clone();
            for y in h.saturating_sub(2)..h {
                out.row_mut(y).fill(INK);
            }
            out
        }
        DecorationKind::Bold => Mat::from_fn(h, width, |y, x| {
            let mut v = run[(y, x)];
            if y > 0 {
                v = v.max(run[(y - 1, x)]);
            }
            if y + 1 < h {
                v = v.max(run[(y + 1, x)]);
            }
            if x > 0 {
                v = v.max(run[(y, x - 1)]);
            }
            if x + 1 < width {
                v = v.max(run[(y, x + 1)]);
            }
            v
        }),
        DecorationKind::Italic => {
            let total = 0.2 * spec.char_height as f64;
            let mut out = Mat::filled(h, width, BACKGROUND);
            for y in 0..h {
                let shift = italic_shift(y, h, total);
                for x in 0..width {
                    let dst = x + shift;
                    if dst < width {
                        out[(y, dst)] = run[(y, x)];
                    }
                }
            }
            out
        }
    }
}

/// Rightward shift of row `y`: `total` at the top row, 0 at the bottom,
/// linear in between, rounded half up.
fn italic_shift(y: usize, h: usize, total: f64) -> usize {
    if h <= 1 {
        return 0;
    }
    (total * (h - 1 - y) as f64 / (h - 1) as f64 + 0.5).floor() as usize
}

/// Writes a binary 8-bit PGM (P5), pixel = round(255·value).
pub fn write_pgm(pixels: &Mat<f32>, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(pixels.len() + 32);
    write!(out, "P5\n{} {}\n255\n", pixels.cols(), pixels.rows())?;
    out.extend(
        pixels
            .as_slice()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> RenderSpec {
        RenderSpec::default()
    }

    fn ink_count(m: &Mat<f32>) -> usize {
        m.as_slice().iter().filter(|&&v| v == INK).count()
    }

    #[test]
    fn space_is_blank() {
        let g = render_glyph(' ', &spec()).unwrap();
        assert!(g.cell.as_slice().iter().all(|&v| v == BACKGROUND));
        assert_eq!(g.cell.shape(), (30, 30));
        for v in 0..8 {
            assert_eq!(synthetic_glyph_bitmap(32, v), [[false; 5]; 7]);
        }
    }

    #[test]
    fn glyph_is_deterministic() {
        let a = render_glyph('a', &spec()).unwrap();
        let b = render_glyph('a', &spec()).unwrap();
        assert_eq!(a, b);
        assert!(!a.fallback);
    }

    #[test]
    fn glyph_matches_independent_hash_oracle() {
        // recompute splitmix64 by hand for 'a' (0x61), variant 0
        let mut z: u64 = (0x61u64 << 32) ^ 0x5654_5453_4749_4c59;
        z = z.wrapping_add(0x9E3779B97F4A7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^= z >> 31;
        let cell = render_glyph('a', &spec()).unwrap().cell;
        for y in 0..30 {
            for x in 0..30 {
                let (r, c) = (y * 7 / 30, x * 5 / 30);
                let bit = (z >> (r * 5 + c)) & 1 == 1;
                assert_eq!(cell[(y, x)] == INK, bit, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn variants_differ() {
        for cp in (33u32..127).chain([0xE000, 0xE011, 0xE100]) {
            assert_ne!(synthetic_glyph_bitmap(cp, 0), synthetic_glyph_bitmap(cp, 1), "cp {cp}");
        }
    }

    #[test]
    fn composed_glyph_stacks_components() {
        let ab = synthetic_glyph_bitmap(composed_codepoint(2, 5), 0);
        let ac = synthetic_glyph_bitmap(composed_codepoint(2, 7), 0);
        let db = synthetic_glyph_bitmap(composed_codepoint(4, 5), 0);
        assert_eq!(ab[..3], ac[..3]);
        assert_eq!(ab[3..], db[3..]);
        assert_eq!(composed_components(composed_codepoint(3, 9)), Some((3, 9)));
        assert_eq!(composed_components('a' as u32), None);
    }

    #[test]
    fn render_shapes() {
        let img = render("abc", &spec(), &[]).unwrap();
        assert_eq!(img.pixels.shape(), (30, 90));
        assert_eq!(img.char_count, 3);
        let empty = render("", &spec(), &[]).unwrap();
        assert_eq!(empty.pixels.shape(), (30, 0));
        assert_eq!(empty.char_count, 0);
    }

    #[test]
    fn undecorated_cells_equal_glyphs() {
        let img = render("xyz", &spec(), &[]).unwrap();
        for (i, ch) in "xyz".chars().enumerate() {
            assert_eq!(img.cell(i), render_glyph(ch, &spec()).unwrap().cell);
        }
    }

    #[test]
    fn underline_is_local() {
        let plain = render("ab", &spec(), &[]).unwrap();
        let deco = render("ab", &spec(), &[Decoration::new(DecorationKind::Underline, 0, 1)]).unwrap();
        for y in 0..30 {
            for x in 30..60 {
                assert_eq!(plain.pixels[(y, x)], deco.pixels[(y, x)]);
            }
        }
        assert_ne!(plain, deco);
    }

    #[test]
    fn underline_blank_cell_sets_sixty_pixels() {
        let out = apply_decoration(&Mat::zeros(30, 30), DecorationKind::Underline, &spec());
        assert_eq!(ink_count(&out), 60);
    }

    #[test]
    fn bold_dilation() {
        let blank = Mat::zeros(30, 30);
        assert_eq!(apply_decoration(&blank, DecorationKind::Bold, &spec()), blank);
        let mut dot = Mat::zeros(30, 30);
        dot[(15, 15)] = INK;
        let out = apply_decoration(&dot, DecorationKind::Bold, &spec());
        assert_eq!(ink_count(&out), 5);
        for (y, x) in [(15, 15), (14, 15), (16, 15), (15, 14), (15, 16)] {
            assert_eq!(out[(y, x)], INK);
        }
    }

    #[test]
    fn italic_shears_top_rows_and_clips() {
        let mut run = Mat::zeros(30, 30);
        run[(0, 0)] = INK;
        run[(29, 0)] = INK;
        run[(0, 28)] = INK;
        let out = apply_decoration(&run, DecorationKind::Italic, &spec());
        assert_eq!(out[(0, 6)], INK);
        assert_eq!(out[(29, 0)], INK);
        // (0, 28) would move to column 34: clipped
        assert_eq!(ink_count(&out), 2);
    }

    #[test]
    fn invalid_decorations_rejected() {
        let u = DecorationKind::Underline;
        assert!(render("ab", &spec(), &[Decoration::new(u, 1, 3)]).is_err());
        assert!(render("ab", &spec(), &[Decoration::new(u, 1, 1)]).is_err());
        assert!(render("abc", &spec(), &[Decoration::new(u, 0, 2), Decoration::new(u, 1, 3)]).is_err());
    }

    #[test]
    fn decoration_text_round_trip() {
        let ds = vec![
            Decoration::new(DecorationKind::Underline, 0, 2),
            Decoration::new(DecorationKind::Italic, 3, 4),
        ];
        assert_eq!(parse_decorations(&format_decorations(&ds)).unwrap(), ds);
        assert!(parse_decorations("").unwrap().is_empty());
        assert!(parse_decorations("wavy:0:1").is_err());
    }

    #[test]
    fn font_source_parsing() {
        assert_eq!(
            "synthetic:3".parse::<FontSource>().unwrap(),
            FontSource::Synthetic { variant: 3 }
        );
        assert_eq!(
            "file:/x/y.ttf:1".parse::<FontSource>().unwrap(),
            FontSource::File {
                path: "/x/y.ttf".into(),
                typeface: 1
            }
        );
        assert!("bitmap".parse::<FontSource>().is_err());
    }

    #[test]
    fn pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let img = render("a", &spec(), &[]).unwrap();
        img.write_pgm(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n30 30\n255\n"));
        assert_eq!(bytes.len(), 13 + 900);
    }
}
