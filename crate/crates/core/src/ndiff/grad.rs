use std::collections::BTreeMap;

use super::{Bindings, ParamSet, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradient per parameter name.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

fn eval<T: Real, F>(params: &ParamSet<T>, tape: &Tape<T>, f: &F) -> Result<Var>
where
    F: Fn(&Tape<T>, &Bindings) -> Result<Var>,
{
    let binds = tape.bind(params);
    let out = f(tape, &binds)?;
    let shape = tape.shape(out);
    if shape.iter().product::<usize>() != 1 {
        return Err(Error::NonScalar(shape));
    }
    tape.check_finite()?;
    Ok(out)
}

/// Evaluates the scalar expression built by `f` and differentiates it with
/// respect to every parameter. Parameters that do not require grad receive
/// all-zero gradients.
pub fn value_and_grad<T: Real, F>(params: &ParamSet<T>, f: F) -> Result<(T, Gradients<T>)>
where
    F: Fn(&Tape<T>, &Bindings) -> Result<Var>,
{
    let tape = Tape::new();
    let binds = tape.bind(params);
    let out = f(&tape, &binds)?;
    let shape = tape.shape(out);
    if shape.iter().product::<usize>() != 1 {
        return Err(Error::NonScalar(shape));
    }
    tape.check_finite()?;
    let mut grads = tape.backward(out)?;
    let mut result = BTreeMap::new();
    for (name, var) in binds.iter() {
        let p = params.get(name).expect("bound parameter");
        let g = if p.requires_grad() {
            grads.take(*var).unwrap_or_else(|| Tensor::zeros(p.shape()))
        } else {
            Tensor::zeros(p.shape())
        };
        result.insert(name.clone(), g);
    }
    Ok((tape.scalar(out), result))
}

fn step<T: Real>(x: T, eps: f64) -> T {
    T::c(eps) * T::one().max(x.abs())
}

/// Central-difference gradient of one coordinate. Stop-gradient outputs are
/// held at their values from the unperturbed evaluation, so the result is
/// comparable with the analytic gradient.
fn central<T: Real, F>(
    params: &mut ParamSet<T>,
    name: &str,
    idx: usize,
    eps: f64,
    sg: &[Tensor<T>],
    f: &F,
) -> Result<T>
where
    F: Fn(&Tape<T>, &Bindings) -> Result<Var>,
{
    let x0 = params.values(name)?.data()[idx];
    let h = step(x0, eps);
    let run = |x: T, params: &mut ParamSet<T>| -> Result<T> {
        params.get_mut(name).unwrap().values_mut().data_mut()[idx] = x;
        let tape = Tape::with_sg_replay(sg.to_vec());
        let out = eval(params, &tape, f)?;
        Ok(tape.scalar(out))
    };
    let (xp, xm) = (x0 + h, x0 - h);
    let fp = run(xp, params)?;
    let fm = run(xm, params)?;
    params.get_mut(name).unwrap().values_mut().data_mut()[idx] = x0;
    Ok((fp - fm) / (xp - xm))
}

fn base_sg<T: Real, F>(params: &ParamSet<T>, f: &F) -> Result<Vec<Tensor<T>>>
where
    F: Fn(&Tape<T>, &Bindings) -> Result<Var>,
{
    let tape = Tape::new();
    eval(params, &tape, f)?;
    Ok(tape.sg_values())
}

/// Central finite differences over every coordinate of every parameter that
/// requires grad, with step `eps · max(1, |x|)`.
pub fn finite_diff_grad<T: Real, F>(params: &ParamSet<T>, eps: f64, f: F) -> Result<Gradients<T>>
where
    F: Fn(&Tape<T>, &Bindings) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let sg = base_sg(params, &f)?;
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let p = params.get(&name).unwrap();
        let mut g = Tensor::zeros(p.shape());
        if p.requires_grad() {
            for i in 0..p.values().len() {
                g.data_mut()[i] = central(&mut work, &name, i, eps, &sg, &f)?;
            }
        }
        out.insert(name, g);
    }
    Ok(out)
}

/// Finite differences at selected `(parameter, flat index)` coordinates only.
pub fn finite_diff_grad_at<T: Real, F>(
    params: &ParamSet<T>,
    eps: f64,
    coords: &[(String, usize)],
    f: F,
) -> Result<Vec<T>>
where
    F: Fn(&Tape<T>, &Bindings) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let sg = base_sg(params, &f)?;
    let mut work = params.clone();
    coords
        .iter()
        .map(|(name, idx)| {
            let len = work.values(name)?.len();
            if *idx >= len {
                return Err(Error::OutOfRange { index: *idx, bound: len });
            }
            central(&mut work, name, *idx, eps, &sg, &f)
        })
        .collect()
}

/// `max|a−b| / max(max|a|, max|b|)`; zero when both are identically zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
