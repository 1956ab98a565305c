//! Grid-caption toy task: each image is a `rows × cols` grid of palette
//! symbols rendered as noisy prototype embeddings, captioned as
//! `row 0 : A B row 1 : C D …` in a closed vocabulary.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gaussian;
use crate::error::{Error, Result};
use crate::ndiff::Tensor;

pub const GRAMMAR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTaskSpec {
    pub rows: usize,
    pub cols: usize,
    /// Number of distinct patch prototypes (symbols).
    pub palette: usize,
    /// Patch embedding dimension `D`.
    pub dim: usize,
    /// Standard deviation of the per-patch noise.
    pub noise: f64,
    pub grammar_version: u32,
    pub seed: u64,
}

impl Default for GridTaskSpec {
    fn default() -> Self {
        Self {
            rows: 2,
            cols: 2,
            palette: 16,
            dim: 16,
            noise: 0.1,
            grammar_version: GRAMMAR_VERSION,
            seed: 0,
        }
    }
}

/// Closed caption vocabulary: `row`, `:`, digits `0`–`9`, then symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct TextVocab {
    words: Vec<String>,
}

const ROW: u32 = 0;
const COLON: u32 = 1;
const DIGIT0: u32 = 2;
const FIRST_SYMBOL: u32 = 12;

fn symbol_name(k: usize) -> String {
    if k < 26 {
        char::from(b'A' + k as u8).to_string()
    } else {
        format!("S{k}")
    }
}

impl TextVocab {
    pub fn new(palette: usize) -> Self {
        let mut words = vec!["row".to_string(), ":".to_string()];
        words.extend((0..10).map(|d| d.to_string()));
        words.extend((0..palette).map(symbol_name));
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|p| p as u32)
    }

    pub fn symbol(&self, k: usize) -> u32 {
        FIRST_SYMBOL + k as u32
    }

    pub fn render(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn digits(mut n: usize) -> Vec<u32> {
    let mut out = Vec::new();
    loop {
        out.push(DIGIT0 + (n % 10) as u32);
        n /= 10;
        if n == 0 {
            break;
        }
    }
    out.reverse();
    out
}

/// One sampled grid with its caption.
#[derive(Debug, Clone, PartialEq)]
pub struct GridExample {
    /// Palette index of every cell, row-major.
    pub cells: Vec<u32>,
    /// `P × D` patch embeddings.
    pub embeddings: Tensor<f64>,
    pub caption: Vec<u32>,
}

/// A grid task with its fixed prototypes.
#[derive(Debug, Clone)]
pub struct GridTask {
    spec: GridTaskSpec,
    prototypes: Tensor<f64>,
    vocab: TextVocab,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl GridTask {
    pub fn new(spec: GridTaskSpec) -> Result<Self> {
        if spec.rows == 0 || spec.cols == 0 || spec.palette == 0 || spec.dim == 0 {
            return Err(Error::InvalidArgument(format!("degenerate grid spec {spec:?}")));
        }
        if spec.grammar_version != GRAMMAR_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported caption grammar version {}",
                spec.grammar_version
            )));
        }
        if !(spec.noise >= 0.0) || !spec.noise.is_finite() {
            return Err(Error::InvalidArgument("noise must be finite and >= 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let prototypes = Tensor::randn(&[spec.palette, spec.dim], 1.0, &mut rng);
        let vocab = TextVocab::new(spec.palette);
        Ok(Self {
            spec,
            prototypes,
            vocab,
        })
    }

    pub fn spec(&self) -> &GridTaskSpec {
        &self.spec
    }

    pub fn prototypes(&self) -> &Tensor<f64> {
        &self.prototypes
    }

    pub fn vocab(&self) -> &TextVocab {
        &self.vocab
    }

    pub fn patches(&self) -> usize {
        self.spec.rows * self.spec.cols
    }

    /// Caption length for this grid shape.
    pub fn caption_len(&self) -> usize {
        caption_len(self.spec.rows, self.spec.cols)
    }

    /// Example number `index`; a pure function of `(spec, index)`.
    pub fn example(&self, index: u64) -> GridExample {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(self.spec.seed ^ splitmix(index)));
        let cells: Vec<u32> = (0..self.patches())
            .map(|_| rng.random_range(0..self.spec.palette) as u32)
            .collect();
        self.render(&cells, &mut rng)
    }

    /// Renders a given grid of palette indices.
    pub fn render(&self, cells: &[u32], rng: &mut impl Rng) -> GridExample {
        let d = self.spec.dim;
        let mut data = Vec::with_capacity(cells.len() * d);
        for &c in cells {
            for &p in self.prototypes.row(c as usize) {
                data.push(p + self.spec.noise * gaussian(rng));
            }
        }
        GridExample {
            cells: cells.to_vec(),
            embeddings: Tensor::new(vec![cells.len(), d], data).unwrap(),
            caption: self.caption(cells),
        }
    }

    pub fn caption(&self, cells: &[u32]) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.caption_len());
        for r in 0..self.spec.rows {
            out.push(ROW);
            out.extend(digits(r));
            out.push(COLON);
            for c in 0..self.spec.cols {
                out.push(self.vocab.symbol(cells[r * self.spec.cols + c] as usize));
            }
        }
        out
    }

    /// Inverse of [`GridTask::caption`].
    pub fn parse_caption(&self, tokens: &[u32]) -> Result<Vec<u32>> {
        let bad = |what: &str| Error::BadFormat(format!("caption: {what}"));
        let mut cells = Vec::with_capacity(self.patches());
        let mut pos = 0;
        let next = |pos: &mut usize| -> Result<u32> {
            let t = *tokens.get(*pos).ok_or_else(|| bad("too short"))?;
            *pos += 1;
            Ok(t)
        };
        for r in 0..self.spec.rows {
            if next(&mut pos)? != ROW {
                return Err(bad("expected `row`"));
            }
            for d in digits(r) {
                if next(&mut pos)? != d {
                    return Err(bad("wrong row number"));
                }
            }
            if next(&mut pos)? != COLON {
                return Err(bad("expected `:`"));
            }
            for _ in 0..self.spec.cols {
                let t = next(&mut pos)?;
                if t < FIRST_SYMBOL || (t - FIRST_SYMBOL) as usize >= self.spec.palette {
                    return Err(bad("expected a symbol"));
                }
                cells.push(t - FIRST_SYMBOL);
            }
        }
        if pos != tokens.len() {
            return Err(bad("trailing tokens"));
        }
        Ok(cells)
    }
}

/// `Σ_r (2 + digits(r) + cols)`: `row`, the row number, `:`, one symbol per column.
pub fn caption_len(rows: usize, cols: usize) -> usize {
    (0..rows).map(|r| 2 + digits(r).len() + cols).sum()
}

/// Example 0 of the task described by `spec`.
pub fn gen_grid_task(spec: &GridTaskSpec) -> Result<(Tensor<f64>, Vec<u32>)> {
    let ex = GridTask::new(spec.clone())?.example(0);
    Ok((ex.embeddings, ex.caption))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(rows: usize, cols: usize, palette: usize, noise: f64) -> GridTaskSpec {
        GridTaskSpec {
            rows,
            cols,
            palette,
            dim: 4,
            noise,
            grammar_version: GRAMMAR_VERSION,
            seed: 3,
        }
    }

    #[test]
    fn one_cell_caption_reads_row_zero_a() {
        let task = GridTask::new(spec(1, 1, 1, 0.1)).unwrap();
        let ex = task.example(0);
        assert_eq!(task.vocab().render(&ex.caption), "row 0 : A");
    }

    #[test]
    fn caption_length_formula() {
        for (rows, cols) in [(1, 1), (2, 3), (11, 2), (12, 5)] {
            let task = GridTask::new(spec(rows, cols, 5, 0.0)).unwrap();
            let ex = task.example(7);
            assert_eq!(ex.caption.len(), caption_len(rows, cols));
        }
        // rows 0..=9 use one digit, 10 and 11 use two
        assert_eq!(caption_len(12, 1), 12 * 3 + 10 + 2 * 2);
    }

    #[test]
    fn zero_noise_reproduces_prototypes() {
        let task = GridTask::new(spec(2, 2, 3, 0.0)).unwrap();
        let ex = task.example(1);
        for (i, &c) in ex.cells.iter().enumerate() {
            assert_eq!(ex.embeddings.row(i), task.prototypes().row(c as usize));
        }
    }

    #[test]
    fn examples_are_pure_functions_of_spec_and_index() {
        let a = GridTask::new(spec(2, 2, 8, 0.2)).unwrap();
        let b = GridTask::new(spec(2, 2, 8, 0.2)).unwrap();
        assert_eq!(a.example(42), b.example(42));
        assert_ne!(a.example(42).embeddings, a.example(43).embeddings);
        assert_eq!(gen_grid_task(&spec(2, 2, 8, 0.2)).unwrap().1, a.example(0).caption);
    }

    #[test]
    fn malformed_captions_are_rejected() {
        let task = GridTask::new(spec(1, 2, 3, 0.0)).unwrap();
        let good = task.caption(&[0, 2]);
        assert_eq!(task.parse_caption(&good).unwrap(), vec![0, 2]);
        assert!(task.parse_caption(&good[..3]).is_err());
        let mut extra = good.clone();
        extra.push(ROW);
        assert!(task.parse_caption(&extra).is_err());
        let mut wrong = good;
        wrong[3] = FIRST_SYMBOL + 3;
        assert!(task.parse_caption(&wrong).is_err());
    }
}
