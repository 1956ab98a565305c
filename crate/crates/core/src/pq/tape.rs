//! Tape-recorded quantization for training.
//!
//! Learnable state lives in a [`ParamSet`] under `{prefix}.proj.{i}` (the
//! `D × d` projections) and `{prefix}.w.{j}` (the `d × d` codebook maps).
//! Codebook centers enter as constants and never receive gradient.

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::ndiff::{Bindings, ParamSet, Real, Tape, Tensor, Var};

use super::{Fusion, PQConfig, SubspaceProjector};

pub fn proj_name(prefix: &str, i: usize) -> String {
    format!("{prefix}.proj.{i}")
}

pub fn w_name(prefix: &str, j: usize) -> String {
    format!("{prefix}.w.{j}")
}

/// Registers the projections and codebook maps as trainable parameters.
pub fn insert_params<T: Real>(
    params: &mut ParamSet<T>,
    prefix: &str,
    cfg: &PQConfig,
    proj: &SubspaceProjector,
    cb: &Codebook,
) -> Result<()> {
    cfg.check_codebook(cb)?;
    if proj.n() != cfg.n_sub || proj.input_dim() != cfg.dim || proj.sub_dim() != cfg.sub_dim {
        return Err(Error::Shape("projector does not match config".into()));
    }
    for (i, m) in proj.mats().iter().enumerate() {
        params.insert(proj_name(prefix, i), m.cast())?;
    }
    for (j, w) in cb.ws().iter().enumerate() {
        params.insert(w_name(prefix, j), w.cast())?;
    }
    Ok(())
}

/// Reads trained projections and codebook maps back out of `params`.
pub fn extract<T: Real>(
    params: &ParamSet<T>,
    prefix: &str,
    cfg: &PQConfig,
    cb: &Codebook,
) -> Result<(SubspaceProjector, Codebook)> {
    let mats = (0..cfg.n_sub)
        .map(|i| params.values(&proj_name(prefix, i)).map(|t| t.cast()))
        .collect::<Result<Vec<_>>>()?;
    let mut cb = cb.clone();
    for j in 0..cb.n() {
        cb.set_w(j, params.values(&w_name(prefix, j))?.cast())?;
    }
    Ok((SubspaceProjector::new(mats)?, cb))
}

/// Per-subspace pieces of the VQ objective on a tape.
#[derive(Debug, Clone)]
pub struct VqTerms {
    /// Straight-through rows, `P × d`.
    pub ste: Var,
    /// `Σ_p ‖sg[z_sub] − z_q‖²`
    pub codebook_term: Var,
    /// `Σ_p ‖z_sub − sg[z_q]‖²`
    pub commitment_term: Var,
    pub indices: Vec<usize>,
}

/// Quantizes the rows of `z_sub` (`P × d`) against `entries` (`K × d`).
///
/// With `into_entries` the straight-through value is `z_q + z_sub − sg[z_sub]`,
/// which lets downstream gradient reach the entries as well as `z_sub`;
/// otherwise it is `z_sub + sg[z_q − z_sub]`.
pub fn vq_terms_on<T: Real>(tape: &Tape<T>, z_sub: Var, entries: Var, into_entries: bool) -> VqTerms {
    let indices = tape.with_value(entries, |e| {
        tape.with_value(z_sub, |z| {
            (0..z.rows())
                .map(|r| {
                    let q = z.row(r);
                    let mut best = (0, f64::INFINITY);
                    for k in 0..e.rows() {
                        let d: f64 = q.iter().zip(e.row(k)).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum();
                        if d < best.1 {
                            best = (k, d);
                        }
                    }
                    best.0
                })
                .collect::<Vec<_>>()
        })
    });
    let z_q = tape.gather_rows(entries, &indices);
    let ste = if into_entries {
        let sg_z = tape.stop_gradient(z_sub);
        let diff = tape.sub(z_sub, sg_z);
        tape.add(z_q, diff)
    } else {
        let diff = tape.sub(z_q, z_sub);
        let sg = tape.stop_gradient(diff);
        tape.add(z_sub, sg)
    };
    let sg_z = tape.stop_gradient(z_sub);
    let cb_diff = tape.sub(sg_z, z_q);
    let codebook_term = tape.sum_sq(cb_diff);
    let sg_q = tape.stop_gradient(z_q);
    let cm_diff = tape.sub(z_sub, sg_q);
    let commitment_term = tape.sum_sq(cm_diff);
    VqTerms {
        ste,
        codebook_term,
        commitment_term,
        indices,
    }
}

/// Quantization of a `P × D` batch on a tape.
#[derive(Debug, Clone)]
pub struct TapeQuant {
    /// Fused tokens, `P × d`.
    pub fused: Var,
    /// Mean over patches of the per-patch VQ loss.
    pub vq_loss: Var,
    /// Local index per subspace, per patch.
    pub indices: Vec<Vec<usize>>,
}

pub fn quantize_on<T: Real>(
    tape: &Tape<T>,
    binds: &Bindings,
    prefix: &str,
    z: Var,
    cfg: &PQConfig,
    cb: &Codebook,
) -> Result<TapeQuant> {
    cfg.check_codebook(cb)?;
    let shape = tape.shape(z);
    if shape.len() != 2 || shape[1] != cfg.dim {
        return Err(Error::Shape(format!("patch batch has shape {shape:?}, D = {}", cfg.dim)));
    }
    let p = shape[0];
    let entries = (0..cb.n())
        .map(|j| cb.effective_entries_on(tape, j, binds.get(&w_name(prefix, j))?))
        .collect::<Result<Vec<_>>>()?;
    let mut fused: Option<Var> = None;
    let mut loss: Option<Var> = None;
    let mut indices = vec![Vec::with_capacity(cfg.n_sub); p];
    for i in 0..cfg.n_sub {
        let z_sub = tape.matmul(z, binds.get(&proj_name(prefix, i))?);
        let t = vq_terms_on(tape, z_sub, entries[cfg.part_of(i)], cfg.ntp_into_codebook);
        for (row, &ix) in indices.iter_mut().zip(&t.indices) {
            row.push(ix);
        }
        let commit = tape.scale(t.commitment_term, T::c(cfg.beta));
        let li = tape.add(t.codebook_term, commit);
        fused = Some(fused.map_or(t.ste, |f| tape.add(f, t.ste)));
        loss = Some(loss.map_or(li, |l| tape.add(l, li)));
    }
    let mut fused = fused.expect("N >= 1");
    if cfg.fusion == Fusion::Mean {
        fused = tape.scale(fused, T::c(1.0 / cfg.n_sub as f64));
    }
    let vq_loss = tape.scale(loss.expect("N >= 1"), T::c(1.0 / (cfg.n_sub * p) as f64));
    Ok(TapeQuant {
        fused,
        vq_loss,
        indices,
    })
}

/// Convenience: a fresh parameter set holding only the quantizer.
pub fn param_set(prefix: &str, cfg: &PQConfig, proj: &SubspaceProjector, cb: &Codebook) -> Result<ParamSet<f64>> {
    let mut ps = ParamSet::new(cfg.seed);
    insert_params(&mut ps, prefix, cfg, proj, cb)?;
    Ok(ps)
}

/// Patch batch as a constant.
pub fn patches_const<T: Real>(tape: &Tape<T>, z: &Tensor<f64>) -> Var {
    tape.constant(z.cast())
}
