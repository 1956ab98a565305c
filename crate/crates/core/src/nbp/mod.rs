//! Next-block prediction sequences.
//!
//! Every backbone position carries one block: a text block is one token
//! plus `eob`, a visual block is the `N` codes of one patch plus `eob`.
//! Visual spans are bracketed by `vis_start` / `vis_end` and every patch
//! row is preceded by a coordinate marker
//! `pos_start r , c pos_end` (0-based row and first column), all emitted
//! as ordinary text blocks.

mod dump;

pub use dump::{read_packed_dump, write_packed_dump};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::Tensor;
use crate::pq::QuantizedImage;

/// Number of special ids appended after the visual range.
pub const SPECIALS: usize = 17;

/// Id layout: text ids, then visual ids, then specials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    /// `V_text`.
    pub text: usize,
    /// `S`.
    pub visual: usize,
    /// Codes per visual block (`N`).
    pub code_len: usize,
}

impl VocabLayout {
    pub fn new(text: usize, visual: usize, code_len: usize) -> Result<Self> {
        if code_len == 0 {
            return Err(Error::InvalidArgument("visual blocks need at least one code".into()));
        }
        let total = text + visual + SPECIALS;
        if u32::try_from(total).is_err() {
            return Err(Error::InvalidArgument(format!("vocabulary of {total} ids is too large")));
        }
        Ok(Self { text, visual, code_len })
    }

    pub fn visual_offset(&self) -> u32 {
        self.text as u32
    }

    fn special(&self, k: usize) -> u32 {
        (self.text + self.visual + k) as u32
    }

    pub fn eob(&self) -> u32 {
        self.special(0)
    }
    pub fn eos(&self) -> u32 {
        self.special(1)
    }
    pub fn vis_start(&self) -> u32 {
        self.special(2)
    }
    pub fn vis_end(&self) -> u32 {
        self.special(3)
    }
    pub fn pos_start(&self) -> u32 {
        self.special(4)
    }
    pub fn pos_end(&self) -> u32 {
        self.special(5)
    }
    pub fn comma(&self) -> u32 {
        self.special(6)
    }
    pub fn digit(&self, d: u32) -> u32 {
        assert!(d < 10);
        self.special(7 + d as usize)
    }

    pub fn total(&self) -> usize {
        self.text + self.visual + SPECIALS
    }

    pub fn is_text(&self, id: u32) -> bool {
        (id as usize) < self.text
    }

    pub fn is_visual(&self, id: u32) -> bool {
        (self.text..self.text + self.visual).contains(&(id as usize))
    }

    pub fn is_special(&self, id: u32) -> bool {
        (self.text + self.visual..self.total()).contains(&(id as usize))
    }

    /// Block size of each kind: text 2, visual `N + 1`.
    pub fn block_size(&self, kind: BlockKind) -> usize {
        match kind {
            BlockKind::Text => 2,
            BlockKind::Visual => self.code_len + 1,
        }
    }

    fn digits(&self, mut n: usize) -> Vec<u32> {
        let mut out = Vec::new();
        loop {
            out.push(self.digit((n % 10) as u32));
            n /= 10;
            if n == 0 {
                break;
            }
        }
        out.reverse();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Text,
    Visual,
}

/// Token ids of one backbone position, always ending in `eob`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub kind: BlockKind,
    pub tokens: Vec<u32>,
}

impl Block {
    /// `{t, eob}`. `t` may be a text or special id, never a visual id or `eob`.
    pub fn text(t: u32, layout: &VocabLayout) -> Result<Self> {
        if layout.is_visual(t) || t == layout.eob() || t as usize >= layout.total() {
            return Err(Error::InvalidArgument(format!("id {t} cannot head a text block")));
        }
        Ok(Self {
            kind: BlockKind::Text,
            tokens: vec![t, layout.eob()],
        })
    }

    /// `{t¹..tᴺ, eob}` from global visual codes in `[0, S)`.
    pub fn visual(codes: &[usize], layout: &VocabLayout) -> Result<Self> {
        if codes.len() != layout.code_len {
            return Err(Error::Shape(format!(
                "visual block needs {} codes, got {}",
                layout.code_len,
                codes.len()
            )));
        }
        let mut tokens = Vec::with_capacity(codes.len() + 1);
        for &c in codes {
            if c >= layout.visual {
                return Err(Error::OutOfRange {
                    index: c,
                    bound: layout.visual,
                });
            }
            tokens.push(layout.visual_offset() + c as u32);
        }
        tokens.push(layout.eob());
        Ok(Self {
            kind: BlockKind::Visual,
            tokens,
        })
    }

    /// Block size `M`, `eob` included.
    pub fn m(&self) -> usize {
        self.tokens.len()
    }

    /// Tokens before `eob`.
    pub fn payload(&self) -> &[u32] {
        &self.tokens[..self.tokens.len().saturating_sub(1)]
    }

    pub fn validate(&self, layout: &VocabLayout) -> Result<()> {
        let bad = |why: &str| Err(Error::BadFormat(format!("{:?} block {:?}: {why}", self.kind, self.tokens)));
        if self.m() != layout.block_size(self.kind) {
            return bad("wrong size");
        }
        if self.tokens.last() != Some(&layout.eob()) {
            return bad("does not end in eob");
        }
        let ok = match self.kind {
            BlockKind::Text => {
                let t = self.tokens[0];
                !layout.is_visual(t) && t != layout.eob() && (t as usize) < layout.total()
            }
            BlockKind::Visual => self.payload().iter().all(|&t| layout.is_visual(t)),
        };
        if !ok {
            return bad("payload ids out of range for its kind");
        }
        Ok(())
    }
}

/// One text block per token, order preserved.
pub fn make_text_blocks(ids: &[u32], layout: &VocabLayout) -> Result<Vec<Block>> {
    ids.iter().map(|&t| Block::text(t, layout)).collect()
}

/// Coordinate marker `pos_start r , c pos_end` as text blocks.
pub fn marker_blocks(row: usize, col: usize, layout: &VocabLayout) -> Vec<Block> {
    let mut ids = vec![layout.pos_start()];
    ids.extend(layout.digits(row));
    ids.push(layout.comma());
    ids.extend(layout.digits(col));
    ids.push(layout.pos_end());
    make_text_blocks(&ids, layout).expect("marker ids are specials")
}

/// Bracketed visual span for a grid of global codes, row-major.
pub fn make_visual_blocks_from_codes(
    grid: (usize, usize),
    codes: &[Vec<usize>],
    layout: &VocabLayout,
) -> Result<Vec<Block>> {
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 || rows * cols != codes.len() {
        return Err(Error::Shape(format!("grid {grid:?} does not hold {} patches", codes.len())));
    }
    let mut out = vec![Block::text(layout.vis_start(), layout)?];
    for r in 0..rows {
        out.extend(marker_blocks(r, 0, layout));
        for c in 0..cols {
            out.push(Block::visual(&codes[r * cols + c], layout)?);
        }
    }
    out.push(Block::text(layout.vis_end(), layout)?);
    Ok(out)
}

pub fn make_visual_blocks(q: &QuantizedImage, layout: &VocabLayout) -> Result<Vec<Block>> {
    make_visual_blocks_from_codes(q.grid, &q.all_global_codes(), layout)
}

/// Blocks that [`make_visual_blocks_from_codes`] adds around the patches.
pub fn visual_overhead(rows: usize) -> usize {
    let digits = |n: usize| n.to_string().len();
    2 + (0..rows).map(|r| 3 + digits(r) + digits(0)).sum::<usize>()
}

/// `E = Σ_{j<M} e_j`: the sum of the payload rows of `table`, `eob` excluded.
pub fn block_encode(b: &Block, table: &Tensor<f64>) -> Result<Vec<f64>> {
    let mut e = vec![0.0; table.cols()];
    for &t in b.payload() {
        if t as usize >= table.rows() {
            return Err(Error::OutOfRange {
                index: t as usize,
                bound: table.rows(),
            });
        }
        e.iter_mut().zip(table.row(t as usize)).for_each(|(a, &x)| *a += x);
    }
    Ok(e)
}

/// Concatenated block tokens.
pub fn pack(blocks: &[Block]) -> Vec<u32> {
    blocks.iter().flat_map(|b| b.tokens.iter().copied()).collect()
}

/// Splits a flat stream at every `eob`; the kind follows the first id.
pub fn unpack(tokens: &[u32], layout: &VocabLayout) -> Result<Vec<Block>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &t) in tokens.iter().enumerate() {
        if t == layout.eob() {
            let body = &tokens[start..=i];
            let kind = if layout.is_visual(body[0]) {
                BlockKind::Visual
            } else {
                BlockKind::Text
            };
            let b = Block {
                kind,
                tokens: body.to_vec(),
            };
            b.validate(layout)?;
            out.push(b);
            start = i + 1;
        }
    }
    if start != tokens.len() {
        return Err(Error::BadFormat("token stream ends inside a block".into()));
    }
    Ok(out)
}

/// Linear scan: `vis_start` / `vis_end` alternate without nesting, visual
/// blocks sit only inside a span, and every span closes.
pub fn check_brackets(blocks: &[Block], layout: &VocabLayout) -> Result<()> {
    let mut open = false;
    for (i, b) in blocks.iter().enumerate() {
        let head = b.tokens[0];
        let err = |why: &str| Err(Error::BadFormat(format!("block {i}: {why}")));
        match b.kind {
            BlockKind::Visual if !open => return err("visual block outside a span"),
            BlockKind::Text if head == layout.vis_start() => {
                if open {
                    return err("nested vis_start");
                }
                open = true;
            }
            BlockKind::Text if head == layout.vis_end() => {
                if !open {
                    return err("vis_end without vis_start");
                }
                open = false;
            }
            _ => {}
        }
    }
    if open {
        return Err(Error::BadFormat("unclosed visual span".into()));
    }
    Ok(())
}

/// A visual span within a packed sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualSpan {
    /// Index of the `vis_start` block.
    pub start: usize,
    /// Index of the `vis_end` block.
    pub end: usize,
    pub grid: (usize, usize),
}

/// Blocks in backbone order with a loss mask over them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub blocks: Vec<Block>,
    /// Whether block `j` is a prediction target (from position `j - 1`).
    pub supervised: Vec<bool>,
    pub spans: Vec<VisualSpan>,
}

impl PackedSequence {
    /// Fully supervised sequence; spans are recovered by scanning.
    pub fn new(blocks: Vec<Block>, layout: &VocabLayout) -> Result<Self> {
        for b in &blocks {
            b.validate(layout)?;
        }
        check_brackets(&blocks, layout)?;
        let spans = find_spans(&blocks, layout);
        let supervised = vec![true; blocks.len()];
        Ok(Self {
            blocks,
            supervised,
            spans,
        })
    }

    /// Supervises only blocks at index `from` and later.
    pub fn completion_only(mut self, from: usize) -> Self {
        for (j, s) in self.supervised.iter_mut().enumerate() {
            *s = j >= from;
        }
        self
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Backbone inputs, `len × d_model`.
    pub fn encode(&self, table: &Tensor<f64>) -> Result<Tensor<f64>> {
        let rows = self.blocks.iter().map(|b| block_encode(b, table)).collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }

    /// Number of flat tokens.
    pub fn raw_tokens(&self) -> usize {
        self.blocks.iter().map(Block::m).sum()
    }
}

fn find_spans(blocks: &[Block], layout: &VocabLayout) -> Vec<VisualSpan> {
    let mut spans = Vec::new();
    let mut start = None;
    let (mut rows, mut patches) = (0, 0);
    for (i, b) in blocks.iter().enumerate() {
        let head = b.tokens[0];
        if b.kind == BlockKind::Visual {
            patches += 1;
        } else if head == layout.vis_start() {
            start = Some(i);
            rows = 0;
            patches = 0;
        } else if head == layout.pos_start() && start.is_some() {
            rows += 1;
        } else if head == layout.vis_end() {
            if let Some(s) = start.take() {
                let cols = if rows == 0 { patches } else { patches / rows };
                spans.push(VisualSpan {
                    start: s,
                    end: i,
                    grid: (rows.max(1), cols),
                });
            }
        }
    }
    spans
}

/// Sequence compression on a purely visual payload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Compression {
    pub patches: usize,
    /// Blocks the backbone sees, brackets and markers included.
    pub blocks: usize,
    /// `P · (N + 1)` flat visual tokens.
    pub raw_tokens: usize,
}

impl Compression {
    pub fn ratio(&self) -> f64 {
        self.raw_tokens as f64 / self.blocks as f64
    }
}

pub fn compression(grid: (usize, usize), layout: &VocabLayout) -> Result<Compression> {
    let p = grid.0 * grid.1;
    let codes = vec![vec![0; layout.code_len]; p];
    let blocks = make_visual_blocks_from_codes(grid, &codes, layout)?;
    Ok(Compression {
        patches: p,
        blocks: blocks.len(),
        raw_tokens: p * layout.block_size(BlockKind::Visual),
    })
}

/// Per-step next-token distributions of a block decoder.
pub trait BlockPredictor {
    fn vocab_size(&self) -> usize;
    /// Log-probabilities of the next token given `h` and the tokens of the
    /// block decoded so far.
    fn step_log_probs(&self, h: &[f64], prefix: &[u32]) -> Result<Vec<f64>>;
}

/// `−Σ_{j=1..M} log P(t^j | h, t^{<j})` with teacher forcing; `eob` is the
/// last supervised token.
pub fn nbp_loss(h: &[f64], target: &Block, decoder: &dyn BlockPredictor) -> Result<f64> {
    if target.tokens.is_empty() {
        return Err(Error::InvalidArgument("empty target block".into()));
    }
    let mut loss = 0.0;
    for j in 0..target.tokens.len() {
        let lp = decoder.step_log_probs(h, &target.tokens[..j])?;
        let t = target.tokens[j] as usize;
        if t >= lp.len() {
            return Err(Error::OutOfRange {
                index: t,
                bound: lp.len(),
            });
        }
        loss -= lp[t];
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> VocabLayout {
        VocabLayout::new(20, 64, 8).unwrap()
    }

    #[test]
    fn id_ranges_are_disjoint() {
        let l = layout();
        assert_eq!(l.total(), 20 + 64 + SPECIALS);
        let specials: Vec<u32> = [l.eob(), l.eos(), l.vis_start(), l.vis_end(), l.pos_start(), l.pos_end(), l.comma()]
            .into_iter()
            .chain((0..10).map(|d| l.digit(d)))
            .collect();
        let mut sorted = specials.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), SPECIALS);
        assert!(specials.iter().all(|&s| l.is_special(s) && !l.is_text(s) && !l.is_visual(s)));
        assert!(l.is_visual(20) && l.is_visual(83) && !l.is_visual(84));
    }

    #[test]
    fn text_blocks() {
        let l = layout();
        assert!(make_text_blocks(&[], &l).unwrap().is_empty());
        let b = make_text_blocks(&[3, 4], &l).unwrap();
        assert_eq!(b[0].tokens, vec![3, l.eob()]);
        assert_eq!(b[1].tokens, vec![4, l.eob()]);
        assert!(b.iter().all(|b| b.m() == 2));
        assert!(make_text_blocks(&[25], &l).is_err());
    }

    #[test]
    fn visual_blocks_for_small_grids() {
        let l = layout();
        let one = make_visual_blocks_from_codes((1, 1), &[vec![1; 8]], &l).unwrap();
        let visual: Vec<_> = one.iter().filter(|b| b.kind == BlockKind::Visual).collect();
        assert_eq!(visual.len(), 1);
        assert_eq!(visual[0].m(), 9);
        assert_eq!(one.len(), 1 + visual_overhead(1));

        let four = make_visual_blocks_from_codes((2, 2), &vec![vec![0; 8]; 4], &l).unwrap();
        assert_eq!(four.iter().filter(|b| b.kind == BlockKind::Visual).count(), 4);
        assert_eq!(four.iter().filter(|b| b.tokens[0] == l.pos_start()).count(), 2);
        check_brackets(&four, &l).unwrap();
        let seq = PackedSequence::new(four, &l).unwrap();
        assert_eq!(seq.spans, vec![VisualSpan { start: 0, end: seq.len() - 1, grid: (2, 2) }]);

        assert!(make_visual_blocks_from_codes((1, 1), &[vec![64; 8]], &l).is_err());
        assert!(make_visual_blocks_from_codes((2, 1), &[vec![0; 8]], &l).is_err());
    }

    #[test]
    fn marker_surface_form() {
        let l = layout();
        let ids: Vec<u32> = marker_blocks(3, 4, &l).iter().map(|b| b.tokens[0]).collect();
        assert_eq!(ids, vec![l.pos_start(), l.digit(3), l.comma(), l.digit(4), l.pos_end()]);
        assert_eq!(marker_blocks(12, 0, &l).len(), 6);
    }

    #[test]
    fn encode_excludes_eob() {
        let l = VocabLayout::new(2, 4, 3).unwrap();
        let mut table = Tensor::zeros(&[l.total(), 2]);
        for r in 0..l.total() {
            table.row_mut(r).copy_from_slice(&[r as f64, 1.0]);
        }
        let t = Block::text(1, &l).unwrap();
        assert_eq!(block_encode(&t, &table).unwrap(), table.row(1).to_vec());
        let v = Block::visual(&[3, 3, 3], &l).unwrap();
        assert_eq!(block_encode(&v, &table).unwrap(), vec![15.0, 3.0]);
        let bad = Block {
            kind: BlockKind::Text,
            tokens: vec![99, l.eob()],
        };
        assert!(block_encode(&bad, &table).is_err());
    }

    #[test]
    fn bracket_violations() {
        let l = layout();
        let vs = Block::text(l.vis_start(), &l).unwrap();
        let ve = Block::text(l.vis_end(), &l).unwrap();
        let v = Block::visual(&[0; 8], &l).unwrap();
        assert!(check_brackets(&[v.clone()], &l).is_err());
        assert!(check_brackets(&[vs.clone(), vs.clone()], &l).is_err());
        assert!(check_brackets(&[ve.clone()], &l).is_err());
        assert!(check_brackets(&[vs.clone(), v.clone()], &l).is_err());
        assert!(check_brackets(&[vs, v, ve], &l).is_ok());
    }

    #[test]
    fn unpack_rejects_truncated_and_malformed_streams() {
        let l = layout();
        let blocks = make_visual_blocks_from_codes((1, 2), &[vec![5; 8], vec![63; 8]], &l).unwrap();
        let flat = pack(&blocks);
        assert_eq!(unpack(&flat, &l).unwrap(), blocks);
        assert!(unpack(&flat[..flat.len() - 1], &l).is_err());
        // a visual block one code short
        let mut short = vec![l.visual_offset(); 7];
        short.push(l.eob());
        assert!(unpack(&short, &l).is_err());
    }

    struct Uniform(usize);
    impl BlockPredictor for Uniform {
        fn vocab_size(&self) -> usize {
            self.0
        }
        fn step_log_probs(&self, _h: &[f64], _p: &[u32]) -> Result<Vec<f64>> {
            Ok(vec![-(self.0 as f64).ln(); self.0])
        }
    }

    struct Oracle(Vec<u32>);
    impl BlockPredictor for Oracle {
        fn vocab_size(&self) -> usize {
            120
        }
        fn step_log_probs(&self, _h: &[f64], p: &[u32]) -> Result<Vec<f64>> {
            let mut lp = vec![f64::NEG_INFINITY; 120];
            lp[self.0[p.len()] as usize] = 0.0;
            Ok(lp)
        }
    }

    #[test]
    fn loss_base_cases() {
        let l = layout();
        let b = Block::visual(&[1, 2, 3, 4, 5, 6, 7, 8], &l).unwrap();
        let v = l.total();
        let loss = nbp_loss(&[0.0], &b, &Uniform(v)).unwrap();
        assert!((loss - 9.0 * (v as f64).ln()).abs() < 1e-12);
        assert_eq!(nbp_loss(&[0.0], &b, &Oracle(b.tokens.clone())).unwrap(), 0.0);
        let empty = Block {
            kind: BlockKind::Text,
            tokens: vec![],
        };
        assert!(nbp_loss(&[0.0], &empty, &Uniform(v)).is_err());
    }

    #[test]
    fn compression_at_nine_token_blocks() {
        let l = layout();
        let c = compression((1, 64), &l).unwrap();
        assert_eq!((c.patches, c.blocks, c.raw_tokens), (64, 64 + visual_overhead(1), 576));
        let c = compression((8, 8), &l).unwrap();
        assert_eq!(c.blocks, 64 + visual_overhead(8));
    }
}
