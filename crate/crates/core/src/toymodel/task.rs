//! Grid-caption toy task: tokenizer construction, sequence building,
//! training and exact-match evaluation.
//!
//! A training sequence is the bracketed visual span of a grid followed by
//! its caption as text blocks and `eos`. Only the caption and `eos` are
//! supervised.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    AdamWConfig, BackboneConfig, BlockDecoderConfig, Example, GenLimits, Model, ModelConfig, OutputHead, Stage,
    StepStats, TrainState, VisualInput, QUANT_PREFIX,
};
use crate::codebook::{kmeans, partition, Codebook};
use crate::error::{Error, Result};
use crate::nbp::{make_text_blocks, make_visual_blocks_from_codes, Block, PackedSequence, VocabLayout};
use crate::ndiff::{Precision, Real, Tensor};
use crate::pq::tape::extract;
use crate::pq::{project_subspaces, PQConfig, PatchQuantizer, ProductQuantizer, Scheme, SubspaceProjector};
use crate::quantalt::{FSQConfig, FsqQuantizer, RqQuantizer};
use crate::synth::{GridTask, GridTaskSpec};

/// First example index of the held-out split; training draws below it.
pub const HELDOUT_BASE: u64 = 1 << 40;

/// Which blocks of a toy sequence carry loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Caption and `eos` only.
    #[default]
    Caption,
    /// Every block after the first, visual blocks included.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub grid: GridTaskSpec,
    pub scheme: Scheme,
    /// Product quantizer; `dim` must equal the grid embedding dim.
    pub pq: PQConfig,
    /// FSQ levels (scheme `fsq`).
    pub fsq_levels: Vec<usize>,
    /// RQ depth and entries per layer (scheme `rq`).
    pub rq_layers: usize,
    pub rq_k: usize,
    /// Examples whose patches feed the k-means codebook.
    pub kmeans_samples: usize,
    pub kmeans_iters: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub head: OutputHead,
    pub visual: VisualInput,
    #[serde(default)]
    pub supervision: Supervision,
    pub optim: AdamWConfig,
    pub precision: Precision,
    pub model_seed: u64,
    pub data_seed: u64,
    pub steps: usize,
    pub batch: usize,
    /// Held-out examples for loss and exact match.
    pub eval_examples: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let grid = GridTaskSpec::default();
        Self {
            pq: PQConfig::new(grid.dim, 8, 8, 32, 7).expect("valid default"),
            grid,
            scheme: Scheme::Vq,
            fsq_levels: vec![4, 4, 4],
            rq_layers: 4,
            rq_k: 8,
            kmeans_samples: 256,
            kmeans_iters: 50,
            d_model: 64,
            layers: 2,
            heads: 4,
            decoder_layers: 1,
            head: OutputHead::Block,
            visual: VisualInput::Quantizer,
            supervision: Supervision::Caption,
            optim: AdamWConfig::default(),
            precision: Precision::F64,
            model_seed: 1,
            data_seed: 2,
            steps: 2000,
            batch: 16,
            eval_examples: 100,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pq.dim != self.grid.dim {
            return Err(Error::InvalidArgument(format!(
                "quantizer input dim {} differs from grid embedding dim {}",
                self.pq.dim, self.grid.dim
            )));
        }
        if self.scheme != Scheme::Vq && self.visual == VisualInput::Quantizer {
            return Err(Error::InvalidArgument(format!(
                "scheme {} has no trainable quantizer path; use table visual input",
                self.scheme
            )));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be >= 1".into()));
        }
        self.pq.validate()
    }
}

/// A constructed task: grid generator, frozen tokenizer, vocabulary layout.
pub struct ToyTask {
    cfg: ToyConfig,
    grid: GridTask,
    tokenizer: Box<dyn PatchQuantizer>,
    codebook: Option<Codebook>,
    projector: Option<SubspaceProjector>,
    layout: VocabLayout,
}

/// Subspace vectors of the patches of `samples` examples, stacked.
fn sub_vectors(grid: &GridTask, proj: &SubspaceProjector, samples: usize, seed: u64) -> Result<Tensor<f64>> {
    let mut rows = Vec::new();
    for e in 0..samples as u64 {
        let ex = grid.example(seed.wrapping_add(e));
        for p in 0..ex.embeddings.rows() {
            rows.extend(project_subspaces(ex.embeddings.row(p), proj)?);
        }
    }
    Tensor::from_rows(&rows)
}

fn patch_rows(grid: &GridTask, samples: usize, seed: u64) -> Result<Tensor<f64>> {
    let mut rows = Vec::new();
    for e in 0..samples as u64 {
        let ex = grid.example(seed.wrapping_add(e));
        rows.extend((0..ex.embeddings.rows()).map(|p| ex.embeddings.row(p).to_vec()));
    }
    Tensor::from_rows(&rows)
}

impl ToyTask {
    pub fn new(cfg: ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = GridTask::new(cfg.grid.clone())?;
        // tokenizer fitting draws from the training range only
        let fit_seed = cfg.data_seed.wrapping_mul(0x9E37_79B9) % (HELDOUT_BASE / 2);
        let (tokenizer, codebook, projector): (Box<dyn PatchQuantizer>, _, _) = match cfg.scheme {
            Scheme::Vq => {
                let proj = SubspaceProjector::orthonormal(&cfg.pq);
                let pts = sub_vectors(&grid, &proj, cfg.kmeans_samples, fit_seed)?;
                if pts.rows() < cfg.pq.size {
                    return Err(Error::InvalidArgument(format!(
                        "{} sub-vectors cannot seed {} centers",
                        pts.rows(),
                        cfg.pq.size
                    )));
                }
                let km = kmeans(&pts, cfg.pq.size, cfg.kmeans_iters, cfg.pq.seed)?;
                let cb = partition(km.centers, cfg.pq.codebook_parts(), cfg.pq.seed)?;
                let q = ProductQuantizer::new(&cfg.pq, proj.clone(), &cb)?;
                (Box::new(q), Some(cb), Some(proj))
            }
            Scheme::Fsq => {
                let pts = patch_rows(&grid, cfg.kmeans_samples, fit_seed)?;
                let f = FSQConfig::new(cfg.fsq_levels.clone())?;
                (Box::new(FsqQuantizer::normalized(cfg.grid.dim, f, &pts, cfg.pq.seed)?), None, None)
            }
            Scheme::Rq => {
                let pts = patch_rows(&grid, cfg.kmeans_samples, fit_seed)?;
                let q = RqQuantizer::fit(
                    &pts,
                    cfg.pq.sub_dim,
                    cfg.rq_layers,
                    cfg.rq_k,
                    cfg.kmeans_iters,
                    true,
                    cfg.pq.seed,
                )?;
                (Box::new(q), None, None)
            }
        };
        let layout = VocabLayout::new(grid.vocab().len(), tokenizer.vocab_size(), tokenizer.code_len())?;
        Ok(Self {
            cfg,
            grid,
            tokenizer,
            codebook,
            projector,
            layout,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &GridTask {
        &self.grid
    }

    pub fn layout(&self) -> &VocabLayout {
        &self.layout
    }

    pub fn tokenizer(&self) -> &dyn PatchQuantizer {
        self.tokenizer.as_ref()
    }

    /// The k-means codebook (scheme `vq` only).
    pub fn codebook(&self) -> Option<&Codebook> {
        self.codebook.as_ref()
    }

    pub fn model_config(&self) -> ModelConfig {
        let c = &self.cfg;
        let blocks = self.span_len() + self.grid.caption_len() + 1;
        ModelConfig {
            backbone: BackboneConfig {
                layers: c.layers,
                heads: c.heads,
                d_model: c.d_model,
                max_blocks: blocks + 8,
                seed: c.model_seed,
            },
            decoder: BlockDecoderConfig {
                layers: c.decoder_layers,
                max_m: self.layout.code_len + 1,
            },
            head: c.head,
            visual: c.visual,
            layout: self.layout,
            pq: (c.scheme == Scheme::Vq).then(|| c.pq.clone()),
            optim: c.optim.clone(),
            precision: c.precision,
        }
    }

    pub fn init_model<T: Real>(&self) -> Result<Model<T>> {
        Model::new(self.model_config(), self.codebook.clone(), self.projector.clone())
    }

    /// Blocks in the visual span of one grid.
    pub fn span_len(&self) -> usize {
        let s = &self.cfg.grid;
        crate::nbp::visual_overhead(s.rows) + s.rows * s.cols
    }

    /// Global codes of every patch; in quantizer mode they come from the
    /// model's current quantizer, otherwise from the frozen tokenizer.
    fn codes<T: Real>(&self, model: &Model<T>, emb: &Tensor<f64>) -> Result<Vec<Vec<usize>>> {
        let live;
        let q: &dyn PatchQuantizer = match (model.config().visual, model.raw_codebook()) {
            (VisualInput::Quantizer, Some(cb)) => {
                let pq = model.config().pq.as_ref().expect("validated");
                let (proj, cb) = extract(model.params(), QUANT_PREFIX, pq, cb)?;
                live = ProductQuantizer::new(pq, proj, &cb)?;
                &live
            }
            _ => self.tokenizer.as_ref(),
        };
        (0..emb.rows()).map(|p| Ok(q.encode(emb.row(p))?.0)).collect()
    }

    /// Full supervised sequence for example `index`.
    pub fn example<T: Real>(&self, model: &Model<T>, index: u64) -> Result<Example> {
        let g = self.grid.example(index);
        let s = &self.cfg.grid;
        let codes = self.codes(model, &g.embeddings)?;
        let mut blocks = make_visual_blocks_from_codes((s.rows, s.cols), &codes, &self.layout)?;
        let from = blocks.len();
        blocks.extend(make_text_blocks(&g.caption, &self.layout)?);
        blocks.push(Block::text(self.layout.eos(), &self.layout)?);
        let seq = PackedSequence::new(blocks, &self.layout)?;
        let seq = match self.cfg.supervision {
            Supervision::Caption => seq.completion_only(from),
            Supervision::Full => seq.completion_only(1),
        };
        let patches = match model.config().visual {
            VisualInput::Quantizer => vec![g.embeddings],
            VisualInput::Table => Vec::new(),
        };
        Ok(Example { seq, patches })
    }

    /// The visual span of example `index` as a generation prompt, plus the
    /// expected continuation (caption blocks and `eos`).
    pub fn prompt<T: Real>(&self, model: &Model<T>, index: u64) -> Result<(Example, Vec<Block>)> {
        let full = self.example(model, index)?;
        let n = self.span_len();
        let mut seq = full.seq.clone();
        let expected = seq.blocks.split_off(n);
        seq.supervised.truncate(n);
        let seq = PackedSequence::new(seq.blocks, &self.layout)?;
        Ok((
            Example {
                seq,
                patches: full.patches,
            },
            expected,
        ))
    }

    pub fn heldout_index(i: usize) -> u64 {
        HELDOUT_BASE + i as u64
    }

    /// Random training batch drawn with the state's data RNG.
    pub fn batch<T: Real>(&self, state: &mut TrainState<T>) -> Result<Vec<Example>> {
        let idx: Vec<u64> = (0..self.cfg.batch).map(|_| state.rng.random_range(0..HELDOUT_BASE)).collect();
        idx.into_iter().map(|i| self.example(&state.model, i)).collect()
    }

    /// Mean held-out `L_nbp` and payload NLL.
    pub fn heldout_loss<T: Real>(&self, model: &Model<T>) -> Result<(f64, f64)> {
        use rayon::prelude::*;
        let n = self.cfg.eval_examples.max(1);
        let vals: Vec<(f64, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let lv = model.evaluate(&self.example(model, Self::heldout_index(i))?)?;
                Ok((lv.nbp, lv.payload))
            })
            .collect::<Result<_>>()?;
        let k = n as f64;
        Ok((
            vals.iter().map(|v| v.0).sum::<f64>() / k,
            vals.iter().map(|v| v.1).sum::<f64>() / k,
        ))
    }

    /// Fraction of held-out grids whose greedy continuation is exactly the
    /// caption followed by `eos`.
    pub fn exact_match<T: Real>(&self, model: &Model<T>) -> Result<f64> {
        use rayon::prelude::*;
        let n = self.cfg.eval_examples.max(1);
        let limits = GenLimits {
            max_new_blocks: self.grid.caption_len() + 4,
            temperature: 0.0,
            seed: 0,
        };
        let hits: Vec<bool> = (0..n)
            .into_par_iter()
            .map(|i| {
                let (prompt, expected) = self.prompt(model, Self::heldout_index(i))?;
                let gen = model.generate(&prompt, &limits)?;
                Ok(gen.blocks == expected)
            })
            .collect::<Result<_>>()?;
        Ok(hits.iter().filter(|&&h| h).count() as f64 / n as f64)
    }

    /// Runs `steps` optimizer steps, calling `log` after each.
    pub fn train<T: Real>(
        &self,
        state: &mut TrainState<T>,
        steps: usize,
        stage: Stage,
        mut log: impl FnMut(&StepStats),
    ) -> Result<()> {
        for _ in 0..steps {
            let batch = self.batch(state)?;
            let s = state.train_step(&batch, stage)?;
            log(&s);
        }
        Ok(())
    }
}

/// Summary of a seeded end-to-end toy run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub steps: usize,
    /// Held-out `L_nbp` before the first update.
    pub initial_nbp: f64,
    pub final_nbp: f64,
    pub final_payload_nll: f64,
    /// Mean training `L_nbp` over the last 5% of steps.
    pub final_train_nbp: f64,
    pub exact_match: f64,
    pub seconds: f64,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub nbp: f64,
    pub vq: f64,
    pub total: f64,
    pub grad_norm: f64,
}

impl ToyReport {
    pub fn nbp_ratio(&self) -> f64 {
        self.final_nbp / self.initial_nbp
    }
}

/// Builds the task, trains from scratch and evaluates.
pub fn run_toy<T: Real>(cfg: &ToyConfig, with_exact_match: bool) -> Result<(ToyReport, TrainState<T>)> {
    let start = Instant::now();
    let task = ToyTask::new(cfg.clone())?;
    let model = task.init_model::<T>()?;
    let (initial_nbp, _) = task.heldout_loss(&model)?;
    let mut state = TrainState::new(model, cfg.data_seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    task.train(&mut state, cfg.steps, Stage::Joint, |s| {
        curve.push(CurvePoint {
            step: s.step,
            nbp: s.loss.nbp,
            vq: s.loss.vq,
            total: s.loss.total,
            grad_norm: s.grad_norm,
        })
    })?;
    let (final_nbp, final_payload_nll) = task.heldout_loss(&state.model)?;
    let tail = (curve.len() / 20).max(1).min(curve.len().max(1));
    let final_train_nbp = if curve.is_empty() {
        initial_nbp
    } else {
        curve[curve.len() - tail..].iter().map(|c| c.nbp).sum::<f64>() / tail as f64
    };
    let exact_match = if with_exact_match {
        task.exact_match(&state.model)?
    } else {
        f64::NAN
    };
    Ok((
        ToyReport {
            steps: cfg.steps,
            initial_nbp,
            final_nbp,
            final_payload_nll,
            final_train_nbp,
            exact_match,
            seconds: start.elapsed().as_secs_f64(),
            curve,
        },
        state,
    ))
}

