use std::rc::Rc;

use kelixpq::ndiff::{
    finite_diff_grad, relative_error, value_and_grad, AttnMask, Bindings, ParamSet, Tape, Tensor,
    Var,
};
use kelixpq::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn params(shapes: &[(&str, &[usize])], seed: u64, scale: f64) -> ParamSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new(seed);
    for (name, shape) in shapes {
        p.insert(*name, Tensor::randn(shape, scale, &mut rng)).unwrap();
    }
    p
}

fn check<F>(p: &ParamSet<f64>, f: F)
where
    F: Fn(&Tape<f64>, &Bindings) -> Result<Var>,
{
    let (_, analytic) = value_and_grad(p, &f).unwrap();
    let numeric = finite_diff_grad(p, 1e-4, &f).unwrap();
    for (name, a) in &analytic {
        let n = &numeric[name];
        let err = relative_error(a.data(), n.data());
        assert!(err < TOL, "{name}: relative error {err:e}\n{a:?}\n{n:?}");
    }
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let p = params(&[("a", &[3, 4]), ("b", &[3, 4]), ("r", &[4])], 1, 1.0);
    check(&p, |t, b| {
        let (a, c, r) = (b.get("a")?, b.get("b")?, b.get("r")?);
        let x = t.add(t.mul(a, c), t.sub(a, t.scale(c, 0.3)));
        let x = t.add_row(x, r);
        let x = t.tanh(t.gelu(x));
        Ok(t.sum_sq(x))
    });
}

#[test]
fn matmul_variants_match_finite_differences() {
    let p = params(&[("a", &[3, 5]), ("b", &[5, 2]), ("c", &[4, 5])], 2, 1.0);
    check(&p, |t, b| {
        let (a, w, c) = (b.get("a")?, b.get("b")?, b.get("c")?);
        let x = t.matmul(a, w);
        let y = t.matmul_t(a, c);
        let z = t.matmul(t.transpose(y), x);
        Ok(t.add(t.sum_sq(z), t.mean(x)))
    });
}

#[test]
fn gather_slice_concat_reshape_match_finite_differences() {
    let p = params(&[("table", &[6, 4]), ("m", &[2, 3])], 3, 1.0);
    check(&p, |t, b| {
        let table = b.get("table")?;
        let g = t.gather_sum(table, vec![vec![0, 2, 2], vec![5], vec![]]);
        let rows = t.gather_rows(table, &[1, 3]);
        let left = t.slice_cols(rows, 1, 2);
        let right = t.slice_cols(g, 0, 3);
        let cat = t.concat_cols(&[left, t.slice_cols(rows, 0, 1)]);
        let stacked = t.concat_rows(&[cat, t.reshape(b.get("m")?, &[2, 3])]);
        let prod = t.matmul(stacked, t.transpose(right));
        Ok(t.sum_sq(prod))
    });
}

#[test]
fn layer_norm_matches_finite_differences() {
    let p = params(&[("x", &[4, 6]), ("g", &[6]), ("b", &[6]), ("w", &[6, 6])], 4, 1.5);
    check(&p, |t, b| {
        let y = t.layer_norm(b.get("x")?, b.get("g")?, b.get("b")?);
        Ok(t.sum_sq(t.matmul(y, b.get("w")?)))
    });
}

#[test]
fn masked_softmax_and_cross_entropy_match_finite_differences() {
    let p = params(&[("s", &[5, 5]), ("v", &[5, 3]), ("h", &[7, 3])], 5, 1.0);
    let mask = Rc::new(AttnMask::block_causal(&[2, 3]));
    check(&p, move |t, b| {
        let att = t.masked_softmax(b.get("s")?, mask.clone());
        let out = t.matmul(att, b.get("v")?);
        let logits = t.matmul_t(out, b.get("h")?);
        Ok(t.cross_entropy(logits, &[0, 6, 2, 3, 1], &[1.0, 0.5, 0.0, 2.0, 1.0]))
    });
}

#[test]
fn two_layer_perceptron_matches_finite_differences() {
    let p = params(
        &[("w1", &[4, 8]), ("b1", &[8]), ("w2", &[8, 3]), ("b2", &[3]), ("x", &[6, 4])],
        6,
        0.8,
    );
    check(&p, |t, b| {
        let h = t.gelu(t.add_row(t.matmul(b.get("x")?, b.get("w1")?), b.get("b1")?));
        let logits = t.add_row(t.matmul(h, b.get("w2")?), b.get("b2")?);
        Ok(t.cross_entropy(logits, &[0, 1, 2, 0, 1, 2], &[1.0; 6]))
    });
}

#[test]
fn fully_masked_rows_are_zero() {
    let t = Tape::<f64>::new();
    let x = t.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
    let y = t.masked_softmax(x, Rc::new(AttnMask::causal(2)));
    let v = t.value(y);
    assert_eq!(v.row(0), &[1.0, 0.0]);
    assert!((v.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

#[test]
fn identical_inputs_give_bit_identical_results() {
    let p = params(&[("w", &[5, 5]), ("x", &[3, 5])], 9, 1.0);
    let f = |t: &Tape<f64>, b: &Bindings| {
        let y = t.gelu(t.matmul(b.get("x")?, b.get("w")?));
        Ok(t.sum_sq(y))
    };
    let (v1, g1) = value_and_grad(&p, f).unwrap();
    let (v2, g2) = value_and_grad(&p, f).unwrap();
    assert_eq!(v1.to_bits(), v2.to_bits());
    for (k, a) in &g1 {
        let b = &g2[k];
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn f32_mode_tracks_f64_gradients() {
    let p64 = params(&[("w", &[4, 4]), ("x", &[2, 4])], 10, 1.0);
    let mut p32 = ParamSet::<f32>::new(10);
    for (name, arr) in p64.iter() {
        p32.insert(name.clone(), arr.values().cast()).unwrap();
    }
    let (_, g64) = value_and_grad(&p64, |t, b| Ok(t.sum_sq(t.tanh(t.matmul(b.get("x")?, b.get("w")?)))))
        .unwrap();
    let (_, g32) = value_and_grad(&p32, |t, b| Ok(t.sum_sq(t.tanh(t.matmul(b.get("x")?, b.get("w")?)))))
        .unwrap();
    for (k, a) in &g64 {
        let b: Vec<f64> = g32[k].data().iter().map(|&v| v as f64).collect();
        assert!(relative_error(a.data(), &b) < 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Adding `0 · sum(sg(y))` to an expression leaves its gradients unchanged.
    #[test]
    fn zero_weighted_stop_gradient_term_is_inert(seed in 0u64..1000) {
        let p = params(&[("w", &[3, 3]), ("x", &[2, 3])], seed, 2.0);
        let base = |t: &Tape<f64>, b: &Bindings| {
            Ok(t.sum_sq(t.tanh(t.matmul(b.get("x")?, b.get("w")?))))
        };
        let extra = |t: &Tape<f64>, b: &Bindings| {
            let e = base(t, b)?;
            let y = t.stop_gradient(t.matmul(b.get("x")?, b.get("w")?));
            Ok(t.add(e, t.scale(t.sum(y), 0.0)))
        };
        let (_, g1) = value_and_grad(&p, base).unwrap();
        let (_, g2) = value_and_grad(&p, extra).unwrap();
        for (k, a) in &g1 {
            prop_assert_eq!(a.data(), g2[k].data());
        }
    }

    /// Random-magnitude (≤ 10) inputs keep analytic and numeric gradients together.
    #[test]
    fn perceptron_gradients_hold_for_random_inputs(seed in 0u64..1000) {
        let p = params(&[("w", &[3, 4]), ("x", &[2, 3]), ("h", &[5, 4])], seed, 3.0);
        let f = |t: &Tape<f64>, b: &Bindings| {
            let logits = t.matmul_t(t.tanh(t.matmul(b.get("x")?, b.get("w")?)), b.get("h")?);
            Ok(t.cross_entropy(logits, &[1, 4], &[1.0, 1.0]))
        };
        let (_, a) = value_and_grad(&p, f).unwrap();
        let n = finite_diff_grad(&p, 1e-4, f).unwrap();
        for (k, av) in &a {
            prop_assert!(relative_error(av.data(), n[k].data()) < TOL);
        }
    }
}
