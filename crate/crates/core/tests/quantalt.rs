use kelixpq::ndiff::Tensor;
use kelixpq::pq::{PatchQuantizer, Scheme};
use kelixpq::quantalt::{fsq_quantize, random_rq, rq_quantize, FSQConfig, FsqQuantizer, RQConfig, RqQuantizer};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn fsq_index_space_matches_the_cited_size() {
    let cfg = FSQConfig::new(vec![16, 16, 16, 16]).unwrap();
    assert_eq!(cfg.cardinality(), 65_536);
    for z in [[-5.0, -1.0, 0.0, 7.0], [0.3, 0.3, -0.3, 0.99]] {
        let (ix, q) = fsq_quantize(&z, &cfg).unwrap();
        assert!(ix < 65_536);
        assert_eq!(cfg.level_vector(&cfg.decode(ix).unwrap()), q);
    }
    assert!(fsq_quantize(&[0.0; 3], &cfg).is_err());
}

#[test]
fn rq_layer_containing_the_query_leaves_nothing() {
    let z = vec![0.25, -1.5, 2.0];
    let layer = Tensor::from_rows(&[vec![1.0, 1.0, 1.0], z.clone(), vec![0.0; 3]]).unwrap();
    let code = rq_quantize(&z, &RQConfig::new(vec![layer]).unwrap()).unwrap();
    assert_eq!(code.indices, vec![1]);
    assert_eq!(code.residual_norms[1], 0.0);
    assert_eq!(code.z_q, z);
}

#[test]
fn rq_matches_exhaustive_greedy_choices() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = random_rq(2, 5, 2, 3).unwrap();
    for _ in 0..200 {
        let z = Tensor::<f64>::randn(&[1, 2], 2.0, &mut rng).into_data();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let l0 = &cfg.layers()[0];
        let first = (0..5).min_by(|&a, &b| dist(&z, l0.row(a)).total_cmp(&dist(&z, l0.row(b)))).unwrap();
        let r: Vec<f64> = z.iter().zip(l0.row(first)).map(|(a, b)| a - b).collect();
        let l1 = &cfg.layers()[1];
        let second = (0..5).min_by(|&a, &b| dist(&r, l1.row(a)).total_cmp(&dist(&r, l1.row(b)))).unwrap();
        assert_eq!(rq_quantize(&z, &cfg).unwrap().indices, vec![first, second]);
    }
}

#[test]
fn desk_stand_in_for_three_layer_rq_builds() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts = Tensor::randn(&[500, 8], 1.0, &mut rng);
    let cfg = RQConfig::fit(&pts, 3, 64, 10, false, 0).unwrap();
    assert_eq!(cfg.layers().len(), 3);
    assert!(cfg.layers().iter().all(|l| l.shape() == [64, 8]));
    assert!(RQConfig::new(vec![]).is_err());
    assert!(RQConfig::new(vec![Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 4])]).is_err());
}

#[test]
fn alternative_quantizers_share_the_patch_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fsq = FsqQuantizer::new(6, FSQConfig::new(vec![4, 4, 4]).unwrap(), 1).unwrap();
    let rq = RqQuantizer::new(6, random_rq(3, 8, 4, 2).unwrap(), 1).unwrap();
    let qs: [&dyn PatchQuantizer; 2] = [&fsq, &rq];
    for q in qs {
        let z = Tensor::<f64>::randn(&[1, 6], 1.0, &mut rng).into_data();
        let (ids, _) = q.encode(&z).unwrap();
        assert_eq!(ids.len(), q.code_len());
        for (j, id) in ids.iter().enumerate() {
            assert!(q.position_range(j).contains(id));
        }
        assert!(q.encode(&[0.0; 5]).is_err());
    }
    assert_eq!(fsq.scheme(), Scheme::Fsq);
    assert_eq!(rq.scheme(), Scheme::Rq);
    assert_eq!(fsq.vocab_size(), 64);
    assert_eq!(rq.vocab_size(), 24);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fsq_mixed_radix_is_a_bijection(levels in prop::collection::vec(2usize..6, 1..4)) {
        let cfg = FSQConfig::new(levels.clone()).unwrap();
        prop_assert_eq!(cfg.cardinality(), levels.iter().product::<usize>());
        for ix in 0..cfg.cardinality() {
            let digits = cfg.decode(ix).unwrap();
            prop_assert_eq!(cfg.encode(&digits).unwrap(), ix);
        }
        prop_assert!(cfg.decode(cfg.cardinality()).is_err());
    }

    #[test]
    fn fsq_output_is_a_level_vector(levels in prop::collection::vec(2usize..9, 1..5), seed in any::<u64>()) {
        let cfg = FSQConfig::new(levels.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::<f64>::randn(&[1, levels.len()], 2.0, &mut rng).into_data();
        let (ix, q) = fsq_quantize(&z, &cfg).unwrap();
        prop_assert_eq!(&cfg.level_vector(&cfg.decode(ix).unwrap()), &q);
        prop_assert!(q.iter().all(|x| x.abs() <= cfg.bound));
    }

    #[test]
    fn rq_residuals_shrink_with_zero_entries(layers in 1usize..5, k in 2usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = Tensor::randn(&[60, 3], 1.0, &mut rng);
        let cfg = RQConfig::fit(&pts, layers, k, 10, true, seed).unwrap();
        prop_assert!(cfg.layers().iter().all(|l| l.row(0).iter().all(|&x| x == 0.0)));
        let z = Tensor::<f64>::randn(&[1, 3], 3.0, &mut rng).into_data();
        let code = rq_quantize(&z, &cfg).unwrap();
        prop_assert_eq!(code.residual_norms.len(), layers + 1);
        prop_assert!(code.residual_norms.windows(2).all(|w| w[1] <= w[0]));
    }
}
