use kelixpq::codebook::partition;
use kelixpq::nbp::{
    block_encode, check_brackets, compression, make_text_blocks, make_visual_blocks, make_visual_blocks_from_codes,
    nbp_loss, pack, read_packed_dump, unpack, visual_overhead, write_packed_dump, Block, BlockKind, BlockPredictor,
    PackedSequence, VocabLayout,
};
use kelixpq::ndiff::Tensor;
use kelixpq::pq::{quantize_image, PQConfig, SubspaceProjector};
use kelixpq::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn layout() -> VocabLayout {
    VocabLayout::new(20, 8 * 4, 8).unwrap()
}

struct Fixed(Vec<Vec<f64>>);

impl BlockPredictor for Fixed {
    fn vocab_size(&self) -> usize {
        self.0[0].len()
    }

    fn step_log_probs(&self, _h: &[f64], prefix: &[u32]) -> Result<Vec<f64>> {
        Ok(self.0[prefix.len()].clone())
    }
}

#[test]
fn text_blocks() {
    let l = layout();
    assert!(make_text_blocks(&[], &l).unwrap().is_empty());
    let b = make_text_blocks(&[3, 7], &l).unwrap();
    assert_eq!(b, vec![Block::text(3, &l).unwrap(), Block::text(7, &l).unwrap()]);
    assert!(b.iter().all(|b| b.m() == 2 && b.tokens[1] == l.eob()));
    assert!(make_text_blocks(&[l.visual_offset()], &l).is_err());
    assert!(make_text_blocks(&[l.eob()], &l).is_err());
}

#[test]
fn vocab_ranges_are_disjoint() {
    let l = layout();
    for id in 0..l.total() as u32 {
        let kinds = [l.is_text(id), l.is_visual(id), l.is_special(id)];
        assert_eq!(kinds.iter().filter(|&&k| k).count(), 1, "id {id}");
    }
    assert!(!l.is_special(l.total() as u32) && !l.is_text(l.total() as u32));
}

#[test]
fn visual_blocks_from_a_quantized_image() {
    let l = layout();
    let cfg = PQConfig::new(6, 2, 8, 32, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cb = partition(Tensor::randn(&[32, 2], 1.0, &mut rng), 8, 0).unwrap();
    let proj = SubspaceProjector::orthonormal(&cfg);

    let one = quantize_image(&Tensor::randn(&[1, 6], 1.0, &mut rng), (1, 1), &cfg, &proj, &cb).unwrap();
    let blocks = make_visual_blocks(&one, &l).unwrap();
    let vis: Vec<&Block> = blocks.iter().filter(|b| b.kind == BlockKind::Visual).collect();
    assert_eq!(vis.len(), 1);
    assert_eq!(vis[0].m(), 9);
    for (i, (&t, &ix)) in vis[0].payload().iter().zip(&one.patches[0].indices).enumerate() {
        assert_eq!(t as usize, l.visual_offset() as usize + cfg.id_base(i) + ix);
    }
    assert_eq!(blocks.len(), 1 + visual_overhead(1));

    let four = quantize_image(&Tensor::randn(&[4, 6], 1.0, &mut rng), (2, 2), &cfg, &proj, &cb).unwrap();
    let blocks = make_visual_blocks(&four, &l).unwrap();
    assert_eq!(blocks.iter().filter(|b| b.kind == BlockKind::Visual).count(), 4);
    assert_eq!(blocks.iter().filter(|b| b.tokens[0] == l.pos_start()).count(), 2);
    assert_eq!(blocks[0].tokens[0], l.vis_start());
    assert_eq!(blocks.last().unwrap().tokens[0], l.vis_end());
    check_brackets(&blocks, &l).unwrap();

    assert!(make_visual_blocks_from_codes((1, 1), &[vec![32; 8]], &l).is_err());
    assert!(make_visual_blocks_from_codes((2, 2), &[vec![0; 8]], &l).is_err());
}

#[test]
fn block_encode_sums_the_payload() {
    let l = layout();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let table = Tensor::randn(&[l.total(), 5], 1.0, &mut rng);
    let t = Block::text(4, &l).unwrap();
    assert_eq!(block_encode(&t, &table).unwrap(), table.row(4));
    let v = Block::visual(&[3; 8], &l).unwrap();
    let e = table.row(l.visual_offset() as usize + 3);
    let want: Vec<f64> = e.iter().map(|x| 8.0 * x).collect();
    for (a, b) in block_encode(&v, &table).unwrap().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(block_encode(&v, &Tensor::zeros(&[3, 5])).is_err());
}

#[test]
fn block_loss_examples() {
    let l = VocabLayout::new(2, 2, 1).unwrap();
    let v = l.total();
    let target = Block::visual(&[1], &l).unwrap();
    let uniform = Fixed(vec![vec![-(v as f64).ln(); v]; 2]);
    let loss = nbp_loss(&[0.0], &target, &uniform).unwrap();
    assert!((loss - 2.0 * (v as f64).ln()).abs() < 1e-12);

    let mut sure = vec![vec![f64::NEG_INFINITY; v]; 2];
    sure[0][target.tokens[0] as usize] = 0.0;
    sure[1][target.tokens[1] as usize] = 0.0;
    assert_eq!(nbp_loss(&[0.0], &target, &Fixed(sure)).unwrap(), 0.0);

    // five-token vocabulary, per-step distributions enumerated by hand
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let steps: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let w: Vec<f64> = (0..5).map(|_| rng.random::<f64>() + 0.1).collect();
            let s: f64 = w.iter().sum();
            w.iter().map(|x| (x / s).ln()).collect()
        })
        .collect();
    let tokens = vec![2u32, 0, 4];
    let b = Block {
        kind: BlockKind::Text,
        tokens: tokens.clone(),
    };
    let p: f64 = tokens.iter().enumerate().map(|(j, &t)| steps[j][t as usize].exp()).product();
    let loss = nbp_loss(&[0.0], &b, &Fixed(steps)).unwrap();
    assert!((loss + p.ln()).abs() < 1e-10);

    let empty = Block {
        kind: BlockKind::Text,
        tokens: vec![],
    };
    assert!(nbp_loss(&[0.0], &empty, &uniform).is_err());
}

#[test]
fn packed_dump_round_trip() {
    let l = layout();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.jsonl");
    let mut blocks = make_text_blocks(&[1, 2], &l).unwrap();
    blocks.extend(make_visual_blocks_from_codes((1, 2), &[vec![0; 8], vec![31; 8]], &l).unwrap());
    let seqs = vec![PackedSequence::new(blocks, &l).unwrap()];
    write_packed_dump(&path, &seqs).unwrap();
    let back = read_packed_dump(&path, &l).unwrap();
    assert_eq!(back.len(), 1);
    assert_eq!(back[0].blocks, seqs[0].blocks);
    assert_eq!(back[0].spans, seqs[0].spans);
}

fn arb_blocks(l: VocabLayout, seed: u64) -> Vec<Block> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = make_text_blocks(&[rng.random_range(0..l.text as u32)], &l).unwrap();
    for _ in 0..rng.random_range(0..4) {
        if rng.random_bool(0.5) {
            let ids: Vec<u32> = (0..rng.random_range(0..5)).map(|_| rng.random_range(0..l.text as u32)).collect();
            out.extend(make_text_blocks(&ids, &l).unwrap());
        } else {
            let grid = (rng.random_range(1..4), rng.random_range(1..4));
            let codes: Vec<Vec<usize>> = (0..grid.0 * grid.1)
                .map(|_| (0..l.code_len).map(|_| rng.random_range(0..l.visual)).collect())
                .collect();
            out.extend(make_visual_blocks_from_codes(grid, &codes, &l).unwrap());
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pack_unpack_is_identity(n in 1usize..9, seed in any::<u64>()) {
        let l = VocabLayout::new(12, n * 3, n).unwrap();
        let blocks = arb_blocks(l, seed);
        let flat = pack(&blocks);
        prop_assert_eq!(flat.len(), blocks.iter().map(Block::m).sum::<usize>());
        prop_assert_eq!(unpack(&flat, &l).unwrap(), blocks.clone());
        let seq = PackedSequence::new(blocks, &l).unwrap();
        check_brackets(&seq.blocks, &l).unwrap();
        for b in &seq.blocks {
            prop_assert_eq!(b.m(), l.block_size(b.kind));
            prop_assert_eq!(*b.tokens.last().unwrap(), l.eob());
        }
    }

    #[test]
    fn text_block_count_identity(k in 0usize..50) {
        let l = layout();
        let ids: Vec<u32> = (0..k as u32).map(|i| i % 20).collect();
        let b = make_text_blocks(&ids, &l).unwrap();
        prop_assert_eq!(b.len(), k);
        prop_assert_eq!(pack(&b).len(), 2 * k);
    }

    #[test]
    fn backbone_sees_patches_plus_overhead(rows in 1usize..12, cols in 1usize..12, n in 1usize..9) {
        let l = VocabLayout::new(4, n * 2, n).unwrap();
        let c = compression((rows, cols), &l).unwrap();
        prop_assert_eq!(c.blocks, rows * cols + visual_overhead(rows));
        prop_assert_eq!(c.raw_tokens, rows * cols * (n + 1));
    }

    #[test]
    fn block_encode_is_scaled_mean(n in 1usize..9, dm in 1usize..8, seed in any::<u64>()) {
        let l = VocabLayout::new(3, n * 4, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = Tensor::randn(&[l.total(), dm], 1.0, &mut rng);
        let codes: Vec<usize> = (0..n).map(|_| rng.random_range(0..l.visual)).collect();
        let b = Block::visual(&codes, &l).unwrap();
        let e = block_encode(&b, &table).unwrap();
        for (c, x) in e.iter().enumerate() {
            let mean = b.payload().iter().map(|&t| table.row(t as usize)[c]).sum::<f64>() / n as f64;
            prop_assert!((x - n as f64 * mean).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}
