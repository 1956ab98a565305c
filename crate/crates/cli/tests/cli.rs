use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kelixpq::ablate::RunConfig;
use kelixpq::codebook::partition;
use kelixpq::ndiff::Tensor;
use kelixpq::pq::read_token_dump;
use kelixpq::synth::{gen_mixture, EmbeddingDump, MixtureSpec};
use kelixpq::toymodel::task::{ToyConfig, ToyTask};
use kelixpq::toymodel::{load_checkpoint, Checkpoint, Stage, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn kelixpq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kelixpq"))
        .args(args)
        .env("KELIXPQ_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn mixture_dump(dir: &Path) -> (PathBuf, f64) {
    let spec = MixtureSpec {
        components: 8,
        dim: 4,
        means_scale: 10.0,
        sigma: 1.0,
        per_component: 60,
        seed: 3,
    };
    let m = gen_mixture(&spec).unwrap();
    let path = dir.join("blobs.emb");
    EmbeddingDump::from_tensor(&m.points, Some(m.labels.clone())).unwrap().save(&path).unwrap();
    (path, m.true_label_cost())
}

#[test]
fn kmeans_build_recovers_blobs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (emb, true_cost) = mixture_dump(dir.path());
    let a = dir.path().join("a.cbk");
    let b = dir.path().join("b.cbk");
    let args = |out: &Path| {
        vec![
            "kmeans-build".to_string(),
            "--emb".into(),
            p(&emb).into(),
            "--clusters".into(),
            "8".into(),
            "--out".into(),
            p(out).into(),
            "--seed".into(),
            "5".into(),
        ]
    };
    let o = kelixpq(&args(&a).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let costs: Vec<f64> = out
        .lines()
        .filter(|l| l.starts_with("iter "))
        .map(|l| l.rsplit(' ').next().unwrap().parse().unwrap())
        .collect();
    assert!(!costs.is_empty());
    assert!(costs.windows(2).all(|w| w[1] <= w[0]), "{costs:?}");
    let final_cost = *costs.last().unwrap();
    assert!((final_cost - true_cost).abs() <= 0.01 * true_cost, "{final_cost} vs {true_cost}");

    let o = kelixpq(&args(&b).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let o = kelixpq(&["kmeans-build", "--emb", p(&emb), "--clusters", "10000", "--out", p(&b)]);
    assert_eq!(code(&o), 1);
    let o = kelixpq(&["kmeans-build", "--emb", p(&emb), "--clusters", "9", "--subspaces", "2", "--out", p(&b)]);
    assert_eq!(code(&o), 1);
    let o = kelixpq(&["kmeans-build", "--emb", p(&dir.path().join("missing.emb")), "--clusters", "2", "--out", p(&b)]);
    assert_eq!(code(&o), 2);
    let junk = dir.path().join("junk.emb");
    std::fs::write(&junk, b"not an embedding dump").unwrap();
    let o = kelixpq(&["kmeans-build", "--emb", p(&junk), "--clusters", "2", "--out", p(&b)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn tokenize_reports_capacity_and_utilization() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let centers = Tensor::randn(&[65_536, 2], 1.0, &mut rng);
    let cb = partition(centers, 8, 4).unwrap();
    let cbp = dir.path().join("big.cbk");
    cb.save(&cbp).unwrap();

    let mut rows = Tensor::randn(&[6, 16], 1.0, &mut rng);
    let first = rows.row(0).to_vec();
    rows.row_mut(3).copy_from_slice(&first);
    let emb = dir.path().join("x.emb");
    EmbeddingDump::from_tensor(&rows, None).unwrap().save(&emb).unwrap();
    let out = dir.path().join("tokens.jsonl");
    let o = kelixpq(&["tokenize", "--emb", p(&emb), "--codebook", p(&cbp), "--scheme", "vq", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.contains("capacity_bits 104"), "{s}");
    assert!(s.contains("single_token_capacity_bits 16"), "{s}");
    let utils: Vec<f64> = s
        .lines()
        .filter(|l| l.starts_with("utilization["))
        .map(|l| l.rsplit(' ').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(utils.len(), 8);
    assert!(utils.iter().all(|u| (0.0..=1.0).contains(u)));
    let recs = read_token_dump(&out).unwrap();
    assert_eq!(recs.len(), 6);
    assert_eq!(recs[0].indices, recs[3].indices);
    for (i, &ix) in recs[0].indices[0].iter().enumerate() {
        assert!((i * 8192..(i + 1) * 8192).contains(&ix));
    }

    let grid_out = dir.path().join("grid.jsonl");
    let o = kelixpq(&[
        "tokenize", "--emb", p(&emb), "--codebook", p(&cbp), "--out", p(&grid_out), "--grid", "1x3",
    ]);
    assert_eq!(code(&o), 0);
    let recs = read_token_dump(&grid_out).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0].grid, [1, 3]);

    let narrow = dir.path().join("narrow.emb");
    EmbeddingDump::from_tensor(&Tensor::randn(&[2, 4], 1.0, &mut rng), None).unwrap().save(&narrow).unwrap();
    let o = kelixpq(&["tokenize", "--emb", p(&narrow), "--codebook", p(&cbp), "--out", p(&out)]);
    assert_eq!(code(&o), 2);

    for scheme in ["fsq", "rq"] {
        let o = kelixpq(&["tokenize", "--emb", p(&emb), "--scheme", scheme, "--out", p(&out), "--rq-k", "4"]);
        assert_eq!(code(&o), 0, "{scheme}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(read_token_dump(&out).unwrap().iter().all(|r| r.scheme().to_string() == scheme));
    }
    let o = kelixpq(&["tokenize", "--emb", p(&emb), "--scheme", "lfq", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
}

fn small_config(dir: &Path, steps: usize) -> PathBuf {
    let mut toy = ToyConfig {
        d_model: 16,
        layers: 1,
        heads: 2,
        kmeans_samples: 32,
        kmeans_iters: 10,
        batch: 2,
        eval_examples: 4,
        steps,
        ..ToyConfig::default()
    };
    toy.grid.palette = 6;
    let rc = RunConfig::new("small", toy);
    let path = dir.join("small.json");
    std::fs::write(&path, rc.to_json().unwrap()).unwrap();
    path
}

#[test]
fn train_writes_artifacts_and_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 3);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = kelixpq(&["train", "--task", "grid", "--config", p(&cfg), "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["checkpoint.klx", "loss.csv", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    // the run configs differ only in the recorded output directory
    {
        let mut ra = RunConfig::load(&a.join("run_config.json")).unwrap();
        let mut rb = RunConfig::load(&b.join("run_config.json")).unwrap();
        assert_eq!(ra.out_dir.as_deref(), Some(a.as_path()));
        ra.out_dir = None;
        rb.out_dir = None;
        assert_eq!(ra.to_json().unwrap(), rb.to_json().unwrap());
    }
    let csv = std::fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let rc = RunConfig::load(&a.join("run_config.json")).unwrap();
    assert_eq!(rc.toy.steps, 3);

    let o = kelixpq(&["generate", "--checkpoint", p(&a.join("checkpoint.klx")), "--prompt", "1", "--max-blocks", "12"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.starts_with("{\"blocks\":"));
    assert!(s.contains("caption:") && s.contains("expected:"));
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0);
    let out = dir.path().join("z");
    let o = kelixpq(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rc = RunConfig::load(&cfg).unwrap();
    let task = ToyTask::new(rc.toy.clone()).unwrap();
    let init = TrainState::new(task.init_model::<f64>().unwrap(), rc.toy.data_seed);
    assert_eq!(std::fs::read(out.join("checkpoint.klx")).unwrap(), Checkpoint::to_bytes(&init).unwrap());
}

#[test]
fn align_stage_leaves_backbone_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0);
    let z = dir.path().join("z");
    assert_eq!(code(&kelixpq(&["train", "--config", p(&cfg), "--out", p(&z)])), 0);
    let al = dir.path().join("al");
    let ck0 = z.join("checkpoint.klx");
    let o = kelixpq(&[
        "train", "--config", p(&cfg), "--steps", "4", "--stage", "align", "--init", p(&ck0), "--out", p(&al),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s0: TrainState<f64> = load_checkpoint(&ck0).unwrap();
    let s1: TrainState<f64> = load_checkpoint(&al.join("checkpoint.klx")).unwrap();
    assert_eq!(s1.step, 4);
    let mut moved = 0;
    for (name, p0) in s0.model.params().iter() {
        let v1 = s1.model.params().values(name).unwrap();
        if name.starts_with("backbone.") || name.starts_with("embed.") || name.starts_with("quant.") {
            assert_eq!(p0.values(), v1, "{name}");
        }
        if Stage::Align.trains(name) && p0.values() != v1 {
            moved += 1;
        }
    }
    assert!(moved > 0);
}

#[test]
fn numeric_blowup_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 4);
    let mut rc = RunConfig::load(&cfg).unwrap();
    rc.toy.optim.lr = 1e300;
    rc.toy.optim.grad_clip = 0.0;
    std::fs::write(&cfg, rc.to_json().unwrap()).unwrap();
    let o = kelixpq(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("x"))]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn ablate_writes_configs_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let out = dir.path().join("fusion");
    let o = kelixpq(&["ablate", "--axis", "fusion", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);
    assert!(out.join("run_config.json").exists());
    let sum = RunConfig::load(&out.join("fusion_sum/run_config.json")).unwrap();
    let mean = RunConfig::load(&out.join("fusion_mean/run_config.json")).unwrap();
    let mut patched = sum.toy.clone();
    patched.pq.fusion = mean.toy.pq.fusion;
    assert_eq!(patched, mean.toy);
    assert_ne!(sum.toy, mean.toy);

    let o = kelixpq(&["ablate", "--axis", "width", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    let o = kelixpq(&["frobnicate"]);
    assert_eq!(code(&o), 1);
}
