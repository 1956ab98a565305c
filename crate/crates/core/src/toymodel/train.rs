//! AdamW training over batches of sequences.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Example, LossValues, Model};
use crate::error::{Error, Result};
use crate::ndiff::{Real, Tape, Tensor};

/// Which parameters a step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Everything that requires grad.
    #[default]
    Joint,
    /// Block decoder, output heads and up-projectors only.
    Align,
}

impl Stage {
    pub fn trains(&self, name: &str) -> bool {
        match self {
            Stage::Joint => true,
            Stage::Align => ["decoder.", "up.", "nine_head."].iter().any(|p| name.starts_with(p)) || name == "lm_head",
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor<f64>>,
    pub v: BTreeMap<String, Tensor<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub step: u64,
    /// Batch means.
    pub loss: LossValues,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// No sequence in the batch had a supervised block.
    pub skipped: bool,
}

/// Model plus optimizer state and the data-order RNG.
#[derive(Debug, Clone)]
pub struct TrainState<T: Real> {
    pub model: Model<T>,
    pub adam: AdamState,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

type SeqGrads<T> = (LossValues, BTreeMap<String, Tensor<T>>);

impl<T: Real> TrainState<T> {
    pub fn new(model: Model<T>, data_seed: u64) -> Self {
        Self {
            model,
            adam: AdamState::default(),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(data_seed),
        }
    }

    fn seq_grads(&self, ex: &Example, stage: Stage) -> Result<SeqGrads<T>> {
        let params = self.model.params();
        let tape = Tape::new();
        let binds = tape.bind(params);
        let f = self.model.forward(&tape, &binds, ex)?;
        tape.check_finite()?;
        let mut grads = tape.backward(f.total)?;
        let mut out = BTreeMap::new();
        for (name, var) in binds.iter() {
            let p = params.get(name).expect("bound parameter");
            if p.requires_grad() && stage.trains(name) {
                if let Some(g) = grads.take(*var) {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok((f.values, out))
    }

    /// Mean losses and gradients of a batch, reduced in batch order.
    pub fn batch_grads(&self, batch: &[Example], stage: Stage) -> Result<(LossValues, BTreeMap<String, Tensor<f64>>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let per: Vec<SeqGrads<T>> = batch
            .par_iter()
            .map(|ex| self.seq_grads(ex, stage))
            .collect::<Result<_>>()?;
        let inv = 1.0 / batch.len() as f64;
        let mut mean = LossValues::default();
        let mut acc: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
        for (lv, g) in per {
            mean.nbp += lv.nbp * inv;
            mean.vq += lv.vq * inv;
            mean.total += lv.total * inv;
            mean.payload += lv.payload * inv;
            mean.targets += lv.targets;
            for (name, t) in g {
                let e = acc.entry(name).or_insert_with(|| Tensor::zeros(t.shape()));
                for (a, b) in e.data_mut().iter_mut().zip(t.data()) {
                    *a += b.f64() * inv;
                }
            }
        }
        Ok((mean, acc))
    }

    /// One AdamW step on the batch mean of `L_nbp + L_VQ`.
    pub fn train_step(&mut self, batch: &[Example], stage: Stage) -> Result<StepStats> {
        let (loss, mut grads) = self.batch_grads(batch, stage)?;
        if loss.targets == 0 {
            return Ok(StepStats {
                step: self.step,
                loss,
                grad_norm: 0.0,
                skipped: true,
            });
        }
        let sq: f64 = grads.values().flat_map(|g| g.data()).map(|x| x * x).sum();
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient".into() });
        }
        let o = self.model.config().optim.clone();
        if o.grad_clip > 0.0 && grad_norm > o.grad_clip {
            let s = o.grad_clip / grad_norm;
            grads.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - o.beta1.powi(t);
        let bc2 = 1.0 - o.beta2.powi(t);
        for (name, g) in grads {
            let p = self.model.params_mut().get_mut(&name).expect("gradient of a known parameter");
            let decay = if p.shape().len() >= 2 { o.weight_decay } else { 0.0 };
            let m = self.adam.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.adam.v.entry(name).or_insert_with(|| Tensor::zeros(g.shape()));
            let vals = p.values_mut().data_mut();
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = o.beta1 * m.data()[i] + (1.0 - o.beta1) * gi;
                let vi = o.beta2 * v.data()[i] + (1.0 - o.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let x = vals[i].f64();
                let upd = (mi / bc1) / ((vi / bc2).sqrt() + o.eps) + decay * x;
                vals[i] = T::c(x - o.lr * upd);
            }
        }
        Ok(StepStats {
            step: self.step,
            loss,
            grad_norm,
            skipped: false,
        })
    }
}
