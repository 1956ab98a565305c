//! Desk-scale unified model.
//!
//! A pre-LN causal transformer runs over block embeddings, one position per
//! block. The hidden state at position `i` conditions a small block decoder
//! that emits block `i + 1` token by token, with the projected hidden state
//! prepended as decoder position 0. Every target block of a sequence is
//! decoded in one batched pass under a block-causal mask.
//!
//! Visual blocks either come from the product quantizer on the tape (fused
//! straight-through vector times the up-projector chain, with the VQ loss
//! added to the objective) or from a plain learnable visual table.

mod checkpoint;
pub mod task;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use train::{AdamState, Stage, StepStats, TrainState};

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::nbp::{Block, BlockKind, BlockPredictor, PackedSequence, VocabLayout};
use crate::ndiff::{AttnMask, Bindings, DiffArray, ParamSet, Precision, Real, Tape, Tensor, Var};
use crate::pq::tape::{insert_params, quantize_on, w_name};
use crate::pq::{PQConfig, SubspaceProjector};

pub const QUANT_PREFIX: &str = "quant";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub max_blocks: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDecoderConfig {
    pub layers: usize,
    pub max_m: usize,
}

/// What turns a hidden state into the next block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// Autoregressive block decoder.
    #[default]
    Block,
    /// `N + 1` independent linear heads into the LM head; text keeps head 0,
    /// visual blocks keep heads `1..=N`.
    NineHead,
}

/// Where visual block embeddings come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualInput {
    /// Quantizer on the tape; requires patch embeddings and a codebook.
    #[default]
    Quantizer,
    /// Learnable randomly initialized visual rows over fixed codes.
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables it.
    #[serde(default)]
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder: BlockDecoderConfig,
    #[serde(default)]
    pub head: OutputHead,
    #[serde(default)]
    pub visual: VisualInput,
    pub layout: VocabLayout,
    /// Quantizer settings; required with [`VisualInput::Quantizer`].
    pub pq: Option<PQConfig>,
    #[serde(default)]
    pub optim: AdamWConfig,
    #[serde(default)]
    pub precision: Precision,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bb = &self.backbone;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if bb.layers == 0 || bb.heads == 0 || bb.d_model == 0 || bb.max_blocks == 0 {
            return bad(format!("degenerate backbone {bb:?}"));
        }
        if bb.d_model % bb.heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", bb.d_model, bb.heads));
        }
        if !(1..=2).contains(&self.decoder.layers) {
            return bad(format!("block decoder needs 1 or 2 layers, got {}", self.decoder.layers));
        }
        if self.decoder.max_m < self.layout.code_len + 1 {
            return bad(format!(
                "decoder max_M {} is below the visual block size {}",
                self.decoder.max_m,
                self.layout.code_len + 1
            ));
        }
        if let Some(pq) = &self.pq {
            pq.validate()?;
            if pq.size != self.layout.visual || pq.n_sub != self.layout.code_len {
                return bad(format!(
                    "quantizer S={} N={} disagrees with vocabulary S={} N={}",
                    pq.size, pq.n_sub, self.layout.visual, self.layout.code_len
                ));
            }
        } else if self.visual == VisualInput::Quantizer {
            return bad("quantizer input needs a PQ config".into());
        }
        if !(self.optim.lr > 0.0) {
            return bad(format!("learning rate must be > 0, got {}", self.optim.lr));
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.backbone.d_model
    }

    /// Heads of the nine-head baseline: one per visual code plus one.
    pub fn n_heads_out(&self) -> usize {
        self.layout.code_len + 1
    }
}

/// A training or prompt sequence. In quantizer mode, visual span `s` takes
/// its codes from quantizing `patches[s]` (`P × D`) on the fly; spans
/// beyond `patches` (or all spans in table mode) use the codes in `seq`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub seq: PackedSequence,
    pub patches: Vec<Tensor<f64>>,
}

/// Loss values of one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    /// Mean NLL per supervised block (the training objective's NBP part).
    pub nbp: f64,
    /// Mean VQ loss over the visual spans; 0 without a quantizer.
    pub vq: f64,
    /// `nbp + vq`.
    pub total: f64,
    /// Mean NLL per supervised block over the payload tokens that both
    /// output heads predict (`eob` and the nine-head kind signal excluded).
    pub payload: f64,
    /// Supervised blocks.
    pub targets: usize,
}

pub(crate) struct ForwardVars {
    pub total: Var,
    pub values: LossValues,
}

/// The model: configuration, parameters and the frozen codebook.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    cfg: ModelConfig,
    params: ParamSet<T>,
    codebook: Option<Codebook>,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::randn(shape, std, rng)
}

impl<T: Real> Model<T> {
    /// Seeded initialization. `proj` defaults to orthonormal projections.
    pub fn new(cfg: ModelConfig, codebook: Option<Codebook>, proj: Option<SubspaceProjector>) -> Result<Self> {
        cfg.validate()?;
        let dm = cfg.d_model();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.backbone.seed);
        let mut ps: ParamSet<f64> = ParamSet::new(cfg.backbone.seed);
        let lin = 1.0 / (dm as f64).sqrt();
        let emb = 1.0;
        ps.insert("embed.text", randn(&mut rng, &[cfg.layout.text, dm], emb))?;
        ps.insert("embed.special", randn(&mut rng, &[crate::nbp::SPECIALS, dm], emb))?;
        ps.insert("backbone.pos", randn(&mut rng, &[cfg.backbone.max_blocks, dm], 0.1))?;
        let depth = (2 * cfg.backbone.layers) as f64;
        for l in 0..cfg.backbone.layers {
            insert_layer(&mut ps, &mut rng, &format!("backbone.{l}"), dm, depth)?;
        }
        ps.insert("backbone.ln_f.g", Tensor::full(&[dm], 1.0))?;
        ps.insert("backbone.ln_f.b", Tensor::zeros(&[dm]))?;
        ps.insert("lm_head", randn(&mut rng, &[cfg.layout.total(), dm], lin))?;
        match cfg.head {
            OutputHead::Block => {
                ps.insert("decoder.h_proj", randn(&mut rng, &[dm, dm], lin))?;
                ps.insert("decoder.pos", randn(&mut rng, &[cfg.decoder.max_m, dm], 0.1))?;
                let ddepth = (2 * cfg.decoder.layers) as f64;
                for l in 0..cfg.decoder.layers {
                    insert_layer(&mut ps, &mut rng, &format!("decoder.{l}"), dm, ddepth)?;
                }
                ps.insert("decoder.ln_f.g", Tensor::full(&[dm], 1.0))?;
                ps.insert("decoder.ln_f.b", Tensor::zeros(&[dm]))?;
            }
            OutputHead::NineHead => {
                for k in 0..cfg.n_heads_out() {
                    ps.insert(format!("nine_head.w{k}"), randn(&mut rng, &[dm, dm], lin))?;
                }
            }
        }
        match cfg.visual {
            VisualInput::Table => {
                ps.insert("embed.visual", randn(&mut rng, &[cfg.layout.visual, dm], emb))?;
            }
            VisualInput::Quantizer => {
                let pq = cfg.pq.as_ref().expect("validated");
                let cb = codebook
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("quantizer input needs a codebook".into()))?;
                let proj = proj.unwrap_or_else(|| SubspaceProjector::orthonormal(pq));
                insert_params(&mut ps, QUANT_PREFIX, pq, &proj, cb)?;
                // scale so that fused tokens land near unit norm per coordinate
                let scale = entry_scale(cb, pq);
                ps.insert("up.0", randn(&mut rng, &[pq.sub_dim, dm], scale / (pq.sub_dim as f64).sqrt()))?;
                ps.insert("up.1", randn(&mut rng, &[dm, dm], lin))?;
            }
        }
        let mut params = ParamSet::new(cfg.backbone.seed);
        for (name, p) in ps.iter() {
            params.insert_array(name.clone(), DiffArray::new(p.values().cast(), p.requires_grad()))?;
        }
        Ok(Self {
            cfg,
            params,
            codebook,
        })
    }

    pub(crate) fn from_parts(cfg: ModelConfig, params: ParamSet<T>, codebook: Option<Codebook>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            params,
            codebook,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// The same model in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut params = ParamSet::new(self.params.seed());
        for (name, p) in self.params.iter() {
            params
                .insert_array(name.clone(), DiffArray::new(p.values().cast(), p.requires_grad()))
                .expect("unique names");
        }
        let mut cfg = self.cfg.clone();
        cfg.precision = U::PRECISION;
        Model {
            cfg,
            params,
            codebook: self.codebook.clone(),
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn layout(&self) -> &VocabLayout {
        &self.cfg.layout
    }

    /// The codebook with its `W` maps synced from the parameters.
    pub fn codebook(&self) -> Result<Option<Codebook>> {
        let Some(cb) = &self.codebook else {
            return Ok(None);
        };
        let mut cb = cb.clone();
        if self.cfg.visual == VisualInput::Quantizer {
            for j in 0..cb.n() {
                cb.set_w(j, self.params.values(&w_name(QUANT_PREFIX, j))?.cast())?;
            }
        }
        Ok(Some(cb))
    }

    pub(crate) fn raw_codebook(&self) -> Option<&Codebook> {
        self.codebook.as_ref()
    }

    fn ctx<'a>(&'a self, tape: &'a Tape<T>, binds: &'a Bindings) -> Ctx<'a, T> {
        Ctx {
            tape,
            b: binds,
            cfg: &self.cfg,
            cb: self.codebook.as_ref(),
        }
    }

    /// Records the full forward pass and loss of `ex` on `tape`.
    pub(crate) fn forward(&self, tape: &Tape<T>, binds: &Bindings, ex: &Example) -> Result<ForwardVars> {
        let ctx = self.ctx(tape, binds);
        let enc = ctx.encode(ex)?;
        ctx.loss(&enc, &ex.seq.supervised)
    }

    /// Loss values of `ex` without gradients.
    pub fn evaluate(&self, ex: &Example) -> Result<LossValues> {
        let tape = Tape::new();
        let binds = tape.bind(&self.params);
        let f = self.forward(&tape, &binds, ex)?;
        tape.check_finite()?;
        Ok(f.values)
    }

    /// Scalar training objective of `ex` on a tape, for gradient checks.
    pub fn objective(&self, tape: &Tape<T>, binds: &Bindings, ex: &Example) -> Result<Var> {
        Ok(self.forward(tape, binds, ex)?.total)
    }

    /// Backbone hidden states for the blocks of `ex`, `L × d_model`, and the
    /// blocks as the backbone saw them (quantized codes filled in).
    pub fn hidden_states(&self, ex: &Example) -> Result<(Tensor<f64>, Vec<Block>)> {
        let tape = Tape::new();
        let binds = tape.bind(&self.params);
        let enc = self.ctx(&tape, &binds).encode(ex)?;
        Ok((tape.value(enc.hidden).cast(), enc.blocks))
    }

    /// Backbone hidden states for raw block embeddings `E` (`L × d_model`).
    pub fn backbone_forward(&self, e: &Tensor<f64>) -> Result<Tensor<f64>> {
        let tape = Tape::new();
        let binds = tape.bind(&self.params);
        let ctx = self.ctx(&tape, &binds);
        let x = tape.constant(e.cast());
        Ok(tape.value(ctx.backbone(x)?).cast())
    }

    /// Per-step log-probabilities of the block decoder for `h` followed by
    /// `prefix`; row `j` is the distribution of token `j` of the block.
    pub fn decoder_log_probs(&self, h: &[f64], prefix: &[u32]) -> Result<Tensor<f64>> {
        let tape = Tape::new();
        let binds = tape.bind(&self.params);
        let ctx = self.ctx(&tape, &binds);
        let table = ctx.table()?;
        let logits = ctx.decoder_logits(table, h, prefix)?;
        Ok(log_softmax_rows(&tape.value(logits).cast()))
    }

    /// Log-probabilities of every output head of the nine-head baseline.
    pub fn nine_head_log_probs(&self, h: &[f64]) -> Result<Tensor<f64>> {
        if self.cfg.head != OutputHead::NineHead {
            return Err(Error::InvalidArgument("model has no nine-head output".into()));
        }
        let tape = Tape::new();
        let binds = tape.bind(&self.params);
        let ctx = self.ctx(&tape, &binds);
        let hv = ctx.h_const(&[h.to_vec()])?;
        let logits = ctx.nine_head_logits(hv)?;
        Ok(log_softmax_rows(&tape.value(logits).cast()))
    }

    /// Greedy output of every nine-head head.
    pub fn nine_head_decode(&self, h: &[f64]) -> Result<Vec<u32>> {
        let lp = self.nine_head_log_probs(h)?;
        Ok((0..lp.rows()).map(|r| argmax(lp.row(r), |_| true) as u32).collect())
    }

    /// Decodes one block from `h` without grammar constraints.
    pub fn decode_block(&self, h: &[f64], mode: DecodeMode<'_>) -> Result<DecodedBlock> {
        self.decode_with(h, mode, None)
    }

    fn decode_with(&self, h: &[f64], mode: DecodeMode<'_>, grammar: Option<Grammar>) -> Result<DecodedBlock> {
        let layout = self.cfg.layout;
        match self.cfg.head {
            OutputHead::Block => self.decode_block_ar(h, mode, grammar),
            OutputHead::NineHead => {
                let lp = self.nine_head_log_probs(h)?;
                let rows: Vec<Vec<f64>> = (0..lp.rows()).map(|r| lp.row(r).to_vec()).collect();
                match mode {
                    DecodeMode::TeacherForced(target) => {
                        let log_probs = (0..target.m()).map(|j| rows[j.min(rows.len() - 1)].clone()).collect();
                        Ok(DecodedBlock {
                            block: target.clone(),
                            log_probs,
                            truncated: false,
                        })
                    }
                    DecodeMode::Sampled { temperature, rng, .. } => {
                        let first_ok = |t: usize| grammar.map_or(true, |g| g.first_allowed(&layout, t as u32));
                        let t0 = pick(&rows[0], temperature, rng, first_ok) as u32;
                        let tokens = if layout.is_visual(t0) {
                            let mut v: Vec<u32> = (1..rows.len())
                                .map(|k| pick(&rows[k], temperature, rng, |t| layout.is_visual(t as u32)) as u32)
                                .collect();
                            v.push(layout.eob());
                            v
                        } else {
                            vec![t0, layout.eob()]
                        };
                        let kind = if layout.is_visual(tokens[0]) {
                            BlockKind::Visual
                        } else {
                            BlockKind::Text
                        };
                        Ok(DecodedBlock {
                            block: Block { kind, tokens },
                            log_probs: rows,
                            truncated: false,
                        })
                    }
                }
            }
        }
    }

    fn decode_block_ar(&self, h: &[f64], mode: DecodeMode<'_>, grammar: Option<Grammar>) -> Result<DecodedBlock> {
        let layout = self.cfg.layout;
        match mode {
            DecodeMode::TeacherForced(target) => {
                if target.tokens.is_empty() {
                    return Err(Error::InvalidArgument("empty target block".into()));
                }
                let lp = self.decoder_log_probs(h, target.payload())?;
                Ok(DecodedBlock {
                    block: target.clone(),
                    log_probs: (0..lp.rows()).map(|r| lp.row(r).to_vec()).collect(),
                    truncated: false,
                })
            }
            DecodeMode::Sampled {
                temperature,
                max_m,
                rng,
            } => {
                let max_m = max_m.clamp(1, self.cfg.decoder.max_m);
                let mut tokens: Vec<u32> = Vec::new();
                let mut log_probs = Vec::new();
                let mut truncated = false;
                loop {
                    let lp = self.decoder_log_probs(h, &tokens)?;
                    let row = lp.row(lp.rows() - 1).to_vec();
                    let t = if tokens.len() + 1 == max_m {
                        truncated = !grammar.is_some_and(|g| g.forces_eob(&layout, &tokens));
                        layout.eob()
                    } else {
                        let allowed = |t: usize| grammar.map_or(true, |g| g.allowed(&layout, &tokens, t as u32));
                        pick(&row, temperature, rng, allowed) as u32
                    };
                    log_probs.push(row);
                    tokens.push(t);
                    if t == layout.eob() {
                        break;
                    }
                }
                let kind = block_kind(&layout, &tokens);
                Ok(DecodedBlock {
                    block: Block { kind, tokens },
                    log_probs,
                    truncated,
                })
            }
        }
    }

    /// Continues `prompt` block by block until an `eos` block or a limit.
    pub fn generate(&self, prompt: &Example, limits: &GenLimits) -> Result<Generation> {
        let layout = self.cfg.layout;
        let mut ex = prompt.clone();
        let mut generated = Vec::new();
        let ends_in_eos = |b: &[Block]| b.last().is_some_and(|b| b.tokens[0] == layout.eos());
        if ends_in_eos(&ex.seq.blocks) {
            return Ok(Generation {
                blocks: generated,
                seq: ex.seq,
                hit_limit: false,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(limits.seed);
        let mut hit_limit = false;
        loop {
            let open = span_open(&layout, &ex.seq.blocks);
            let room = self.cfg.backbone.max_blocks.saturating_sub(ex.seq.blocks.len());
            let budget = limits.max_new_blocks.saturating_sub(generated.len()).min(room);
            if budget == 0 {
                hit_limit = true;
                if open {
                    let close = Block::text(layout.vis_end(), &layout)?;
                    generated.push(close.clone());
                    ex.seq.blocks.push(close);
                    ex.seq.supervised.push(true);
                }
                break;
            }
            let (h, _) = self.hidden_states(&ex)?;
            let last = h.row(h.rows() - 1).to_vec();
            let grammar = Grammar {
                open,
                force_close: open && budget == 1,
            };
            let d = self.decode_with(
                &last,
                DecodeMode::Sampled {
                    temperature: limits.temperature,
                    max_m: self.cfg.decoder.max_m,
                    rng: &mut rng,
                },
                Some(grammar),
            )?;
            d.block.validate(&layout)?;
            let done = d.block.tokens[0] == layout.eos();
            generated.push(d.block.clone());
            ex.seq.blocks.push(d.block);
            ex.seq.supervised.push(true);
            if done {
                break;
            }
        }
        crate::nbp::check_brackets(&ex.seq.blocks, &layout)?;
        let seq = PackedSequence::new(ex.seq.blocks, &layout)?;
        Ok(Generation {
            blocks: generated,
            seq,
            hit_limit,
        })
    }
}

fn entry_scale(cb: &Codebook, pq: &PQConfig) -> f64 {
    let c = cb.centers();
    let ms = c.data().iter().map(|x| x * x).sum::<f64>() / c.len().max(1) as f64;
    let per_token = (ms * pq.n_sub as f64).sqrt();
    if per_token > 1e-12 {
        1.0 / per_token
    } else {
        1.0
    }
}

fn insert_layer(ps: &mut ParamSet<f64>, rng: &mut ChaCha8Rng, pre: &str, dm: usize, depth: f64) -> Result<()> {
    let lin = 1.0 / (dm as f64).sqrt();
    let out = lin / depth.sqrt();
    for n in ["ln1", "ln2"] {
        ps.insert(format!("{pre}.{n}.g"), Tensor::full(&[dm], 1.0))?;
        ps.insert(format!("{pre}.{n}.b"), Tensor::zeros(&[dm]))?;
    }
    for n in ["wq", "wk", "wv"] {
        ps.insert(format!("{pre}.{n}"), randn(rng, &[dm, dm], lin))?;
    }
    ps.insert(format!("{pre}.wo"), randn(rng, &[dm, dm], out))?;
    ps.insert(format!("{pre}.mlp.w1"), randn(rng, &[dm, 4 * dm], lin))?;
    ps.insert(format!("{pre}.mlp.b1"), Tensor::zeros(&[4 * dm]))?;
    ps.insert(format!("{pre}.mlp.w2"), randn(rng, &[4 * dm, dm], out / 2.0))?;
    ps.insert(format!("{pre}.mlp.b2"), Tensor::zeros(&[dm]))?;
    Ok(())
}

fn block_kind(layout: &VocabLayout, tokens: &[u32]) -> BlockKind {
    if tokens.first().is_some_and(|&t| layout.is_visual(t)) {
        BlockKind::Visual
    } else {
        BlockKind::Text
    }
}

fn span_open(layout: &VocabLayout, blocks: &[Block]) -> bool {
    let mut open = false;
    for b in blocks {
        if b.tokens[0] == layout.vis_start() {
            open = true;
        } else if b.tokens[0] == layout.vis_end() {
            open = false;
        }
    }
    open
}

pub(crate) fn log_softmax_rows(x: &Tensor<f64>) -> Tensor<f64> {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = x.row(r);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        out.row_mut(r).iter_mut().zip(row).for_each(|(o, v)| *o = v - lse);
    }
    out
}

fn argmax(row: &[f64], ok: impl Fn(usize) -> bool) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, &v) in row.iter().enumerate() {
        if ok(i) && (best.0 == usize::MAX || v > best.1) {
            best = (i, v);
        }
    }
    assert!(best.0 != usize::MAX, "no allowed token");
    best.0
}

/// Samples from `softmax(log_probs / temperature)` over allowed ids;
/// temperature 0 is argmax with ties to the lowest id.
fn pick(log_probs: &[f64], temperature: f64, rng: &mut ChaCha8Rng, ok: impl Fn(usize) -> bool) -> usize {
    if temperature <= 0.0 {
        return argmax(log_probs, ok);
    }
    let mx = log_probs
        .iter()
        .enumerate()
        .filter(|(i, _)| ok(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_probs
        .iter()
        .enumerate()
        .map(|(i, &v)| if ok(i) { ((v - mx) / temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &x) in w.iter().enumerate() {
        if x > 0.0 {
            last = i;
            if u < x {
                return i;
            }
            u -= x;
        }
    }
    last
}

/// Token constraints that keep generated blocks well formed and visual
/// spans bracketed.
#[derive(Debug, Clone, Copy)]
struct Grammar {
    open: bool,
    force_close: bool,
}

impl Grammar {
    fn first_allowed(&self, l: &VocabLayout, t: u32) -> bool {
        if self.force_close {
            return t == l.vis_end();
        }
        if self.open {
            l.is_visual(t)
                || t == l.vis_end()
                || t == l.pos_start()
                || t == l.pos_end()
                || t == l.comma()
                || (l.digit(0)..=l.digit(9)).contains(&t)
        } else {
            l.is_text(t) || t == l.eos() || t == l.vis_start()
        }
    }

    fn forces_eob(&self, l: &VocabLayout, prefix: &[u32]) -> bool {
        match prefix.first() {
            None => false,
            Some(&f) => !l.is_visual(f) || prefix.len() >= l.code_len,
        }
    }

    fn allowed(&self, l: &VocabLayout, prefix: &[u32], t: u32) -> bool {
        match prefix.first() {
            None => self.first_allowed(l, t),
            Some(&f) if l.is_visual(f) => {
                if prefix.len() < l.code_len {
                    l.is_visual(t)
                } else {
                    t == l.eob()
                }
            }
            Some(_) => t == l.eob(),
        }
    }
}

pub enum DecodeMode<'r> {
    /// Scores the given block; returns one distribution per token.
    TeacherForced(&'r Block),
    /// Samples until `eob` or `max_m` tokens.
    Sampled {
        temperature: f64,
        max_m: usize,
        rng: &'r mut ChaCha8Rng,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedBlock {
    pub block: Block,
    /// Model log-probabilities at every decoded position.
    pub log_probs: Vec<Vec<f64>>,
    /// `max_m` was reached without `eob`; an `eob` was appended.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenLimits {
    pub max_new_blocks: usize,
    /// 0 for greedy decoding.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenLimits {
    fn default() -> Self {
        Self {
            max_new_blocks: 64,
            temperature: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Newly generated blocks.
    pub blocks: Vec<Block>,
    /// Prompt plus continuation.
    pub seq: PackedSequence,
    pub hit_limit: bool,
}

impl<T: Real> BlockPredictor for Model<T> {
    fn vocab_size(&self) -> usize {
        self.cfg.layout.total()
    }

    fn step_log_probs(&self, h: &[f64], prefix: &[u32]) -> Result<Vec<f64>> {
        match self.cfg.head {
            OutputHead::Block => {
                let lp = self.decoder_log_probs(h, prefix)?;
                Ok(lp.row(lp.rows() - 1).to_vec())
            }
            OutputHead::NineHead => {
                let lp = self.nine_head_log_probs(h)?;
                Ok(lp.row(prefix.len().min(lp.rows() - 1)).to_vec())
            }
        }
    }
}

struct Encoded {
    table: Var,
    hidden: Var,
    blocks: Vec<Block>,
    vq: Option<Var>,
}

struct Ctx<'a, T: Real> {
    tape: &'a Tape<T>,
    b: &'a Bindings,
    cfg: &'a ModelConfig,
    cb: Option<&'a Codebook>,
}

impl<T: Real> Ctx<'_, T> {
    fn p(&self, name: &str) -> Result<Var> {
        self.b.get(name)
    }

    fn h_const(&self, rows: &[Vec<f64>]) -> Result<Var> {
        Ok(self.tape.constant(Tensor::from_rows(rows)?.cast()))
    }

    /// Unified table on the tape: text rows, visual rows, special rows.
    fn table(&self) -> Result<Var> {
        let t = self.tape;
        let visual = match self.cfg.visual {
            VisualInput::Table => self.p("embed.visual")?,
            VisualInput::Quantizer => {
                let cb = self.cb.ok_or_else(|| Error::InvalidArgument("missing codebook".into()))?;
                let parts = (0..cb.n())
                    .map(|j| cb.effective_entries_on(t, j, self.p(&w_name(QUANT_PREFIX, j))?))
                    .collect::<Result<Vec<_>>>()?;
                let e = if parts.len() == 1 { parts[0] } else { t.concat_rows(&parts) };
                self.up(e)?
            }
        };
        let mut parts = Vec::with_capacity(3);
        if self.cfg.layout.text > 0 {
            parts.push(self.p("embed.text")?);
        }
        parts.push(visual);
        parts.push(self.p("embed.special")?);
        Ok(t.concat_rows(&parts))
    }

    fn up(&self, x: Var) -> Result<Var> {
        let t = self.tape;
        let a = t.matmul(x, self.p("up.0")?);
        Ok(t.matmul(a, self.p("up.1")?))
    }

    fn layer(&self, pre: &str, x: Var, mask: &Rc<AttnMask>) -> Result<Var> {
        let t = self.tape;
        let p = |n: &str| self.p(&format!("{pre}.{n}"));
        let heads = self.cfg.backbone.heads;
        let dh = self.cfg.d_model() / heads;
        let a = t.layer_norm(x, p("ln1.g")?, p("ln1.b")?);
        let q = t.matmul(a, p("wq")?);
        let k = t.matmul(a, p("wk")?);
        let v = t.matmul(a, p("wv")?);
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (t.slice_cols(q, h * dh, dh), t.slice_cols(k, h * dh, dh), t.slice_cols(v, h * dh, dh))
            };
            let s = t.scale(t.matmul_t(qh, kh), scale);
            let w = t.masked_softmax(s, mask.clone());
            outs.push(t.matmul(w, vh));
        }
        let o = if heads == 1 { outs[0] } else { t.concat_cols(&outs) };
        let x = t.add(x, t.matmul(o, p("wo")?));
        let m = t.layer_norm(x, p("ln2.g")?, p("ln2.b")?);
        let hdn = t.gelu(t.add_row(t.matmul(m, p("mlp.w1")?), p("mlp.b1")?));
        Ok(t.add(x, t.add_row(t.matmul(hdn, p("mlp.w2")?), p("mlp.b2")?)))
    }

    /// Causal backbone over block embeddings `x` (`L × d_model`).
    fn backbone(&self, x: Var) -> Result<Var> {
        let t = self.tape;
        let len = t.shape(x)[0];
        if len == 0 || len > self.cfg.backbone.max_blocks {
            return Err(Error::InvalidArgument(format!(
                "{len} blocks do not fit the backbone (max {})",
                self.cfg.backbone.max_blocks
            )));
        }
        let pos: Vec<usize> = (0..len).collect();
        let mut x = t.add(x, t.gather_rows(self.p("backbone.pos")?, &pos));
        let mask = Rc::new(AttnMask::causal(len));
        for l in 0..self.cfg.backbone.layers {
            x = self.layer(&format!("backbone.{l}"), x, &mask)?;
        }
        Ok(t.layer_norm(x, self.p("backbone.ln_f.g")?, self.p("backbone.ln_f.b")?))
    }

    fn encode(&self, ex: &Example) -> Result<Encoded> {
        let t = self.tape;
        let layout = &self.cfg.layout;
        let seq = &ex.seq;
        let table = self.table()?;
        let v_rows = layout.total();
        let mut blocks = seq.blocks.clone();
        let mut fused_parts = Vec::new();
        let mut vq_parts = Vec::new();
        // block index -> row of the fused-token matrix
        let mut fused_row = vec![None; blocks.len()];
        if self.cfg.visual == VisualInput::Quantizer && !ex.patches.is_empty() {
            let pq = self.cfg.pq.as_ref().expect("validated");
            let cb = self.cb.ok_or_else(|| Error::InvalidArgument("missing codebook".into()))?;
            if ex.patches.len() > seq.spans.len() {
                return Err(Error::Shape(format!(
                    "{} patch sets for {} visual spans",
                    ex.patches.len(),
                    seq.spans.len()
                )));
            }
            let mut offset = 0;
            for (span, patches) in seq.spans.iter().zip(&ex.patches) {
                let vis: Vec<usize> = (span.start..=span.end)
                    .filter(|&i| blocks[i].kind == BlockKind::Visual)
                    .collect();
                if vis.len() != patches.rows() {
                    return Err(Error::Shape(format!(
                        "span with {} visual blocks has {} patches",
                        vis.len(),
                        patches.rows()
                    )));
                }
                let tq = quantize_on(t, self.b, QUANT_PREFIX, t.constant(patches.cast()), pq, cb)?;
                for (p, &bi) in vis.iter().enumerate() {
                    let codes: Vec<usize> = tq.indices[p]
                        .iter()
                        .enumerate()
                        .map(|(i, &ix)| ix + pq.id_base(i))
                        .collect();
                    blocks[bi] = Block::visual(&codes, layout)?;
                    fused_row[bi] = Some(v_rows + offset + p);
                }
                offset += patches.rows();
                fused_parts.push(self.up(tq.fused)?);
                vq_parts.push(tq.vq_loss);
            }
        }
        let src = if fused_parts.is_empty() {
            table
        } else {
            let mut parts = vec![table];
            parts.extend(fused_parts);
            t.concat_rows(&parts)
        };
        let groups: Vec<Vec<usize>> = blocks
            .iter()
            .zip(&fused_row)
            .map(|(b, f)| match f {
                Some(r) => vec![*r],
                None => b.payload().iter().map(|&x| x as usize).collect(),
            })
            .collect();
        let src_rows = t.shape(src)[0];
        if let Some(&bad) = groups.iter().flatten().find(|&&r| r >= src_rows) {
            return Err(Error::OutOfRange {
                index: bad,
                bound: src_rows,
            });
        }
        let x = t.gather_sum(src, groups);
        let hidden = self.backbone(x)?;
        let vq = match vq_parts.len() {
            0 => None,
            n => {
                let mut s = vq_parts[0];
                for &v in &vq_parts[1..] {
                    s = t.add(s, v);
                }
                Some(if n == 1 { s } else { t.scale(s, T::c(1.0 / n as f64)) })
            }
        };
        Ok(Encoded {
            table,
            hidden,
            blocks,
            vq,
        })
    }

    /// Decoder logits for one hidden state followed by `prefix`; one row per
    /// decoder position.
    fn decoder_logits(&self, table: Var, h: &[f64], prefix: &[u32]) -> Result<Var> {
        let t = self.tape;
        let len = prefix.len() + 1;
        if len > self.cfg.decoder.max_m {
            return Err(Error::InvalidArgument(format!("block prefix of {} exceeds max_M", prefix.len())));
        }
        let hv = self.h_const(&[h.to_vec()])?;
        let hp = t.matmul(hv, self.p("decoder.h_proj")?);
        let mut y = if prefix.is_empty() {
            hp
        } else {
            let ids: Vec<usize> = prefix.iter().map(|&x| x as usize).collect();
            if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.layout.total()) {
                return Err(Error::OutOfRange {
                    index: bad,
                    bound: self.cfg.layout.total(),
                });
            }
            let e = t.gather_rows(table, &ids);
            t.concat_rows(&[hp, e])
        };
        let pos: Vec<usize> = (0..len).collect();
        y = t.add(y, t.gather_rows(self.p("decoder.pos")?, &pos));
        let mask = Rc::new(AttnMask::causal(len));
        for l in 0..self.cfg.decoder.layers {
            y = self.layer(&format!("decoder.{l}"), y, &mask)?;
        }
        y = t.layer_norm(y, self.p("decoder.ln_f.g")?, self.p("decoder.ln_f.b")?);
        Ok(t.matmul_t(y, self.p("lm_head")?))
    }

    /// `(N + 1)·T × V` logits, head-major, for hidden rows `hs` (`T × d_model`).
    fn nine_head_logits(&self, hs: Var) -> Result<Var> {
        let t = self.tape;
        let heads = (0..self.cfg.n_heads_out())
            .map(|k| Ok(t.matmul(hs, self.p(&format!("nine_head.w{k}"))?)))
            .collect::<Result<Vec<_>>>()?;
        let stack = t.concat_rows(&heads);
        Ok(t.matmul_t(stack, self.p("lm_head")?))
    }

    fn loss(&self, enc: &Encoded, supervised: &[bool]) -> Result<ForwardVars> {
        let t = self.tape;
        let blocks = &enc.blocks;
        let targets: Vec<usize> = (1..blocks.len()).filter(|&j| supervised.get(j) == Some(&true)).collect();
        let n_t = targets.len();
        let (nbp, payload) = if n_t == 0 {
            (t.constant(Tensor::scalar(T::zero())), 0.0)
        } else {
            let w = 1.0 / n_t as f64;
            let prev: Vec<usize> = targets.iter().map(|j| j - 1).collect();
            let hs = t.gather_rows(enc.hidden, &prev);
            match self.cfg.head {
                OutputHead::Block => {
                    let hp = t.matmul(hs, self.p("decoder.h_proj")?);
                    let mut tok_ids = Vec::new();
                    let mut order = Vec::new();
                    let mut pos = Vec::new();
                    let mut segs = Vec::new();
                    let mut tgt = Vec::new();
                    let mut is_payload = Vec::new();
                    for (n, &j) in targets.iter().enumerate() {
                        let b = &blocks[j];
                        if b.m() > self.cfg.decoder.max_m {
                            return Err(Error::InvalidArgument(format!("block of size {} exceeds max_M", b.m())));
                        }
                        order.push(n);
                        for &x in b.payload() {
                            order.push(n_t + tok_ids.len());
                            tok_ids.push(x as usize);
                        }
                        pos.extend(0..b.m());
                        segs.push(b.m());
                        for (k, &x) in b.tokens.iter().enumerate() {
                            tgt.push(x as usize);
                            is_payload.push(k + 1 < b.m());
                        }
                    }
                    let e = t.gather_rows(enc.table, &tok_ids);
                    let src = t.concat_rows(&[hp, e]);
                    let mut y = t.gather_rows(src, &order);
                    y = t.add(y, t.gather_rows(self.p("decoder.pos")?, &pos));
                    let mask = Rc::new(AttnMask::block_causal(&segs));
                    for l in 0..self.cfg.decoder.layers {
                        y = self.layer(&format!("decoder.{l}"), y, &mask)?;
                    }
                    y = t.layer_norm(y, self.p("decoder.ln_f.g")?, self.p("decoder.ln_f.b")?);
                    let logits = t.matmul_t(y, self.p("lm_head")?);
                    let weights = vec![T::c(w); tgt.len()];
                    let nbp = t.cross_entropy(logits, &tgt, &weights);
                    let payload = t.with_value(logits, |lv| {
                        nll_sum(lv, &tgt, |r| is_payload[r])
                    }) * w;
                    (nbp, payload)
                }
                OutputHead::NineHead => {
                    let logits = self.nine_head_logits(hs)?;
                    let heads = self.cfg.n_heads_out();
                    let mut tgt = vec![0usize; heads * n_t];
                    let mut weights = vec![T::zero(); heads * n_t];
                    let mut kept = vec![false; heads * n_t];
                    for (n, &j) in targets.iter().enumerate() {
                        let b = &blocks[j];
                        match b.kind {
                            BlockKind::Text => {
                                tgt[n] = b.tokens[0] as usize;
                                weights[n] = T::c(w);
                                kept[n] = true;
                            }
                            BlockKind::Visual => {
                                // head 0 carries the first code as the kind signal
                                tgt[n] = b.tokens[0] as usize;
                                weights[n] = T::c(w);
                                for k in 1..heads {
                                    let r = k * n_t + n;
                                    tgt[r] = b.tokens[k - 1] as usize;
                                    weights[r] = T::c(w);
                                    kept[r] = true;
                                }
                            }
                        }
                    }
                    let nbp = t.cross_entropy(logits, &tgt, &weights);
                    let payload = t.with_value(logits, |lv| nll_sum(lv, &tgt, |r| kept[r])) * w;
                    (nbp, payload)
                }
            }
        };
        let total = match enc.vq {
            Some(vq) => t.add(nbp, vq),
            None => nbp,
        };
        let nbp_v = t.scalar(nbp).f64();
        let vq_v = enc.vq.map_or(0.0, |v| t.scalar(v).f64());
        Ok(ForwardVars {
            total,
            values: LossValues {
                nbp: nbp_v,
                vq: vq_v,
                total: t.scalar(total).f64(),
                payload,
                targets: n_t,
            },
        })
    }
}

/// `Σ −log softmax(row_r)[target_r]` over rows where `keep(r)`.
fn nll_sum<T: Real>(logits: &Tensor<T>, targets: &[usize], keep: impl Fn(usize) -> bool) -> f64 {
    let mut s = 0.0;
    for (r, &tg) in targets.iter().enumerate() {
        if !keep(r) {
            continue;
        }
        let row = logits.row(r);
        let mx = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|x| (x.f64() - mx).exp()).sum::<f64>().ln();
        s += lse - row[tg].f64();
    }
    s
}
