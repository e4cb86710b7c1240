//! Sliding-window slicing of a rendered line into one window per character.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::scalar::Scalar;
use crate::textimg::{write_pgm, VisualTextImage, BACKGROUND};

/// Window of `c` character cells (odd), moved one cell at a time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SliceSpec {
    pub context_chars: usize,
}

impl Default for SliceSpec {
    fn default() -> Self {
        Self { context_chars: 3 }
    }
}

impl SliceSpec {
    pub fn new(context_chars: usize) -> Result<Self> {
        let spec = Self { context_chars };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_chars == 0 || self.context_chars.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "context must be a positive odd number of characters, got {}",
                self.context_chars
            )));
        }
        Ok(())
    }

    pub fn window_width(&self, char_width: usize) -> usize {
        self.context_chars * char_width
    }

    /// Stride in pixels; always one cell.
    pub fn stride(&self, char_width: usize) -> usize {
        char_width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlicedSequence {
    /// `n` windows, each `h × w·c`.
    pub slices: Vec<Mat<f32>>,
    pub spec: SliceSpec,
    pub char_width: usize,
    pub char_height: usize,
}

impl SlicedSequence {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn window_width(&self) -> usize {
        self.spec.window_width(self.char_width)
    }

    /// One flattened window per row: `n × h·w·c`.
    pub fn to_batch<T: Scalar>(&self) -> Mat<T> {
        let cols = self.char_height * self.window_width();
        let mut out = Mat::zeros(self.slices.len(), cols);
        for (i, s) in self.slices.iter().enumerate() {
            for (o, &v) in out.row_mut(i).iter_mut().zip(s.as_slice()) {
                *o = T::of(v as f64);
            }
        }
        out
    }

    /// Writes `slice_000.pgm`, `slice_001.pgm`, ... into `dir`.
    pub fn write_pgms(&self, dir: &Path) -> Result<()> {
        for (i, s) in self.slices.iter().enumerate() {
            write_pgm(s, &dir.join(format!("slice_{i:03}.pgm")))?;
        }
        Ok(())
    }
}

/// Blank cells added on each side: `((c-1)/2, (c-1)/2)`.
pub fn pad_cells(_n: usize, c: usize) -> (usize, usize) {
    debug_assert!(c % 2 == 1);
    let half = c.saturating_sub(1) / 2;
    (half, half)
}

/// Cuts one window per character; slice `i` covers cells
/// `i-(c-1)/2 ..= i+(c-1)/2`, with cells outside the line left blank.
pub fn slice(image: &VisualTextImage, spec: SliceSpec) -> Result<SlicedSequence> {
    spec.validate()?;
    let w = image.spec.char_width;
    let h = image.height();
    let n = image.char_count;
    if image.width() != n * w {
        return Err(Error::shape("visual text width", n * w, image.width()));
    }
    let (left, _) = pad_cells(n, spec.context_chars);
    let win = spec.window_width(w);
    let slices = (0..n)
        .map(|i| {
            let mut out = Mat::filled(h, win, BACKGROUND);
            for j in 0..spec.context_chars {
                let cell = i as isize + j as isize - left as isize;
                if cell < 0 || cell >= n as isize {
                    continue;
                }
                let src = cell as usize * w;
                for y in 0..h {
                    out.row_mut(y)[j * w..(j + 1) * w].copy_from_slice(&image.pixels.row(y)[src..src + w]);
                }
            }
            out
        })
        .collect();
    Ok(SlicedSequence {
        slices,
        spec,
        char_width: w,
        char_height: h,
    })
}
