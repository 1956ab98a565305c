use kelixpq::codebook::kmeans;
use kelixpq::ndiff::Tensor;
use kelixpq::synth::{
    adjusted_rand_index, brute_quantize, gen_grid_task, gen_mixture, gen_mixture_at, EmbeddingDump,
    GridTask, GridTaskSpec, MixtureSpec,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn two_blobs_are_recovered() {
    let means = Tensor::from_rows(&[vec![0.0, 0.0], vec![10.0, 10.0]]).unwrap();
    let m = gen_mixture_at(&means, 0.1, 200, 4).unwrap();
    let r = kmeans(&m.points, 2, 50, 1).unwrap();
    let truth: Vec<usize> = m.labels.iter().map(|&l| l as usize).collect();
    assert!(adjusted_rand_index(&truth, &r.assignments) >= 0.99);
    for c in 0..2 {
        let near = (0..2)
            .map(|j| {
                r.centers.row(c).iter().zip(means.row(j)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .fold(f64::INFINITY, f64::min);
        assert!(near < 0.1, "center {c} is {near} from its blob");
    }
}

#[test]
fn tiny_sigma_collapses_onto_means() {
    let spec = MixtureSpec {
        components: 3,
        dim: 2,
        means_scale: 5.0,
        sigma: 1e-300,
        per_component: 4,
        seed: 1,
    };
    let m = gen_mixture(&spec).unwrap();
    for (i, &l) in m.labels.iter().enumerate() {
        assert_eq!(m.points.row(i), m.means.row(l as usize));
    }
    assert!(gen_mixture(&MixtureSpec { sigma: 0.0, ..spec }).is_err());
}

#[test]
fn mixture_dumps_are_byte_identical_per_seed() {
    let spec = MixtureSpec {
        components: 4,
        dim: 3,
        means_scale: 10.0,
        sigma: 1.0,
        per_component: 5,
        seed: 9,
    };
    let dump = |s: &MixtureSpec| {
        let m = gen_mixture(s).unwrap();
        EmbeddingDump::from_tensor(&m.points, Some(m.labels)).unwrap().to_bytes()
    };
    assert_eq!(dump(&spec), dump(&spec));
    assert_ne!(dump(&spec), dump(&MixtureSpec { seed: 10, ..spec.clone() }));
    let back = EmbeddingDump::from_bytes(&dump(&spec)).unwrap();
    assert_eq!(back.count(), 20);
    assert_eq!(back.labels().unwrap().len(), 20);
}

#[test]
fn brute_force_examples() {
    let one = Tensor::from_rows(&[vec![3.0, -1.0]]).unwrap();
    assert_eq!(brute_quantize(&[100.0, 5.0], &one).unwrap(), 0);
    let pair = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
    assert_eq!(brute_quantize(&[0.0, 0.0], &pair).unwrap(), 0);
    let tie = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
    assert_eq!(brute_quantize(&[0.0, 0.0], &tie).unwrap(), 0);
}

#[test]
fn grid_base_case_and_noise_free_render() {
    let spec = GridTaskSpec {
        rows: 1,
        cols: 1,
        palette: 1,
        noise: 0.0,
        ..GridTaskSpec::default()
    };
    let (emb, caption) = gen_grid_task(&spec).unwrap();
    let task = GridTask::new(spec).unwrap();
    assert_eq!(task.vocab().render(&caption), "row 0 : A");
    assert_eq!(emb.row(0), task.prototypes().row(0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn captions_invert_to_the_grid(rows in 1usize..13, cols in 1usize..6, palette in 1usize..20, seed in any::<u64>(), index in any::<u64>()) {
        let task = GridTask::new(GridTaskSpec { rows, cols, palette, seed, ..GridTaskSpec::default() }).unwrap();
        let ex = task.example(index);
        prop_assert_eq!(ex.caption.len(), (0..rows).map(|r| 2 + r.to_string().len() + cols).sum::<usize>());
        prop_assert_eq!(task.parse_caption(&ex.caption).unwrap(), ex.cells.clone());
        prop_assert_eq!(ex.embeddings.shape(), &[rows * cols, task.spec().dim]);
        prop_assert_eq!(task.example(index), ex);
    }

    #[test]
    fn generators_are_pure(seed in any::<u64>()) {
        let spec = MixtureSpec { components: 3, dim: 2, means_scale: 4.0, sigma: 0.5, per_component: 6, seed };
        let a = gen_mixture(&spec).unwrap();
        let b = gen_mixture(&spec).unwrap();
        prop_assert_eq!(a.points, b.points);
        prop_assert_eq!(a.labels, b.labels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = Tensor::randn(&[2, 3], 5.0, &mut rng);
        prop_assert_eq!(gen_mixture_at(&means, 1.0, 3, seed).unwrap().points, gen_mixture_at(&means, 1.0, 3, seed).unwrap().points);
    }
}
