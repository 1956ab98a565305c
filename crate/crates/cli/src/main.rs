//! `kelixpq` command-line tool.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numeric failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use kelixpq::ablate::{report_csv, run_sweep, sweep_base, sweep_cells, Axis, RunConfig};
use kelixpq::codebook::{kmeans, partition, Codebook};
use kelixpq::nbp::{write_packed_dump, BlockKind};
use kelixpq::ndiff::{Precision, Real, Tensor};
use kelixpq::pq::{
    capacity_bits, project_subspaces, utilization, write_token_dump, PQConfig, PatchQuantizer, ProductQuantizer,
    Scheme, SubspaceProjector, TokenRecord,
};
use kelixpq::quantalt::{FSQConfig, FsqQuantizer, RqQuantizer};
use kelixpq::synth::EmbeddingDump;
use kelixpq::toymodel::task::{ToyConfig, ToyTask};
use kelixpq::toymodel::{load_checkpoint, save_checkpoint, GenLimits, Stage, TrainState};

#[derive(Parser)]
#[command(name = "kelixpq", version, about = "Product-quantized visual tokens and next-block prediction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Align,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Grid,
}

#[derive(Subcommand)]
enum Cmd {
    /// Cluster patch embeddings into a CBK1 codebook.
    KmeansBuild {
        #[arg(long)]
        emb: PathBuf,
        /// Total entries S.
        #[arg(long)]
        clusters: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        /// Sub-codebooks N; S must be divisible by N.
        #[arg(long, default_value_t = 1)]
        subspaces: usize,
        /// Subspace dim d; defaults to D / N.
        #[arg(long)]
        sub_dim: Option<usize>,
    },
    /// Quantize an EMB1 dump into a token dump.
    Tokenize {
        #[arg(long)]
        emb: PathBuf,
        /// CBK1 codebook (scheme vq).
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long, default_value = "vq")]
        scheme: Scheme,
        #[arg(long)]
        out: PathBuf,
        /// Patch grid of one image, `ROWSxCOLS`; consecutive rows form an image.
        #[arg(long, default_value = "1x1")]
        grid: String,
        /// Subspaces N for a shared (single-pool) codebook.
        #[arg(long)]
        subspaces: Option<usize>,
        /// FSQ levels per dimension.
        #[arg(long, value_delimiter = ',', default_value = "8,8,8")]
        levels: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        rq_layers: usize,
        #[arg(long, default_value_t = 16)]
        rq_k: usize,
        #[arg(long, default_value_t = 8)]
        rq_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the toy model.
    Train {
        #[arg(long, value_enum, default_value = "grid")]
        task: TaskArg,
        /// RunConfig JSON; defaults to the standard grid run.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum, default_value = "full")]
        stage: StageArg,
        /// Continue from a KLX1 checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also report held-out exact match.
        #[arg(long)]
        eval: bool,
    },
    /// Continue a held-out grid prompt with a trained checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// RunConfig JSON; defaults to run_config.json next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Held-out example number.
        #[arg(long, default_value_t = 0)]
        prompt: usize,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        max_blocks: usize,
        /// Packed-sequence JSONL output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one seeded ablation sweep.
    Ablate {
        #[arg(long)]
        axis: Axis,
        /// Output directory for the report and per-cell configs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Base RunConfig JSON; defaults to the sweep base.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| kelixpq::Error::InvalidArgument(format!("grid `{s}` is not ROWSxCOLS")))?;
    let r: usize = r.trim().parse().map_err(|_| kelixpq::Error::InvalidArgument(format!("bad grid rows `{r}`")))?;
    let c: usize = c.trim().parse().map_err(|_| kelixpq::Error::InvalidArgument(format!("bad grid cols `{c}`")))?;
    if r == 0 || c == 0 {
        bail!(kelixpq::Error::InvalidArgument("grid dims must be >= 1".into()));
    }
    Ok((r, c))
}

/// Identity for a single full-width subspace, seeded orthonormal otherwise.
fn projector(cfg: &PQConfig) -> SubspaceProjector {
    if cfg.n_sub == 1 && cfg.sub_dim == cfg.dim {
        SubspaceProjector::identity(cfg.dim, 1)
    } else {
        SubspaceProjector::orthonormal(cfg)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| kelixpq::Error::io(dir, e))?;
    Ok(())
}

fn kmeans_build(
    emb: &Path,
    clusters: usize,
    out: &Path,
    seed: u64,
    iters: usize,
    n: usize,
    sub_dim: Option<usize>,
) -> Result<()> {
    let dump = EmbeddingDump::load(emb)?;
    let dim = dump.dim();
    if n == 0 || clusters % n != 0 {
        bail!(kelixpq::Error::InvalidArgument(format!("{n} sub-codebooks do not divide S = {clusters}")));
    }
    let d = match sub_dim {
        Some(d) => d,
        None if dim % n == 0 => dim / n,
        None => bail!(kelixpq::Error::InvalidArgument(format!("D = {dim} is not divisible by N = {n}; pass --sub-dim"))),
    };
    let cfg = PQConfig::new(dim, d, n, clusters, seed)?;
    let proj = projector(&cfg);
    let points = dump.to_tensor();
    let pts = if n == 1 && d == dim {
        points
    } else {
        let mut rows = Vec::with_capacity(points.rows() * n);
        for r in 0..points.rows() {
            rows.extend(project_subspaces(points.row(r), &proj)?);
        }
        Tensor::from_rows(&rows)?
    };
    if clusters > pts.rows() {
        bail!(kelixpq::Error::InvalidArgument(format!(
            "--clusters {clusters} exceeds the {} points available",
            pts.rows()
        )));
    }
    let km = kmeans(&pts, clusters, iters, seed)?;
    let mut stdout = std::io::stdout().lock();
    for (i, c) in km.costs.iter().enumerate() {
        writeln!(stdout, "iter {i} cost {c:.9e}")?;
    }
    writeln!(stdout, "converged {} final_cost {:.9e}", km.converged, km.final_cost())?;
    let cb = partition(km.centers, n, seed)?;
    cb.save(out)?;
    writeln!(stdout, "wrote {} (S={} N={} d={})", out.display(), cb.s(), cb.n(), cb.d())?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn tokenize(
    emb: &Path,
    codebook: Option<&Path>,
    scheme: Scheme,
    out: &Path,
    grid: &str,
    subspaces: Option<usize>,
    levels: Vec<usize>,
    rq: (usize, usize, usize),
    seed: u64,
) -> Result<()> {
    let dump = EmbeddingDump::load(emb)?;
    let (rows, cols) = parse_grid(grid)?;
    let p = rows * cols;
    if dump.count() % p != 0 {
        bail!(kelixpq::Error::Shape(format!("{} rows do not split into {rows}x{cols} images", dump.count())));
    }
    let points = dump.to_tensor();
    let mut single = None;
    let q: Box<dyn PatchQuantizer> = match scheme {
        Scheme::Vq => {
            let path = codebook.ok_or_else(|| kelixpq::Error::InvalidArgument("scheme vq needs --codebook".into()))?;
            let cb = Codebook::load(path)?;
            let n = subspaces.unwrap_or(cb.n());
            if dump.dim() < cb.d() {
                bail!(kelixpq::Error::Shape(format!(
                    "embedding dim {} is smaller than codebook dim {}",
                    dump.dim(),
                    cb.d()
                )));
            }
            let mut cfg = PQConfig::new(dump.dim(), cb.d(), n, cb.s(), cb.seed())?;
            cfg.shared = cb.n() == 1 && n > 1;
            if cfg.codebook_parts() != cb.n() {
                bail!(kelixpq::Error::Shape(format!(
                    "codebook has {} sub-codebooks, config expects {}",
                    cb.n(),
                    cfg.codebook_parts()
                )));
            }
            if (dump.dim() != cb.d() || n != 1) && n * cb.d() > dump.dim() {
                bail!(kelixpq::Error::Shape(format!(
                    "{n} orthonormal subspaces of dim {} do not fit in D = {}",
                    cb.d(),
                    dump.dim()
                )));
            }
            single = Some(capacity_bits(1, cb.s()));
            Box::new(ProductQuantizer::new(&cfg, projector(&cfg), &cb)?)
        }
        Scheme::Fsq => Box::new(FsqQuantizer::normalized(dump.dim(), FSQConfig::new(levels)?, &points, seed)?),
        Scheme::Rq => {
            let (layers, k, d) = rq;
            Box::new(RqQuantizer::fit(&points, d, layers, k, 50, true, seed)?)
        }
    };
    let mut records = Vec::with_capacity(dump.count() / p);
    let mut all = Vec::with_capacity(dump.count());
    for img in 0..dump.count() / p {
        let mut idx = Vec::with_capacity(p);
        for r in img * p..(img + 1) * p {
            let (ids, _) = q.encode(points.row(r))?;
            // token dumps store sub-codebook-local indices plus subspace offsets
            idx.push(ids.clone());
            all.push(ids);
        }
        records.push(TokenRecord::new((rows, cols), idx, scheme));
    }
    write_token_dump(out, &records)?;
    let util = utilization(q.as_ref(), &all);
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "scheme {scheme} images {} patches {}", records.len(), all.len())?;
    for (j, u) in util.iter().enumerate() {
        writeln!(stdout, "utilization[{j}] {u:.4}")?;
    }
    writeln!(stdout, "capacity_bits {}", q.capacity_bits())?;
    if let Some(b) = single {
        writeln!(stdout, "single_token_capacity_bits {b}")?;
    }
    Ok(())
}

fn load_run_config(path: Option<&Path>, fallback: impl FnOnce() -> RunConfig) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(fallback()),
    }
}

fn train_at<T: Real>(rc: &RunConfig, init: Option<&Path>, stage: Stage, out: &Path, eval: bool) -> Result<()> {
    let task = ToyTask::new(rc.toy.clone())?;
    let mut state: TrainState<T> = match init {
        Some(p) => {
            let s: TrainState<T> = load_checkpoint(p)?;
            if s.model.config() != &task.model_config() {
                bail!(kelixpq::Error::InvalidArgument(format!(
                    "checkpoint {} was trained with a different model configuration",
                    p.display()
                )));
            }
            s
        }
        None => TrainState::new(task.init_model()?, rc.toy.data_seed),
    };
    let (initial_nbp, _) = task.heldout_loss(&state.model)?;
    let log_path = out.join("loss.csv");
    let mut log = fs::File::create(&log_path).map_err(|e| kelixpq::Error::io(&log_path, e))?;
    writeln!(log, "step,nbp,vq,total,payload_nll,grad_norm,skipped")?;
    let mut io_err = None;
    task.train(&mut state, rc.toy.steps, stage, |s| {
        let r = writeln!(
            log,
            "{},{:.9},{:.9},{:.9},{:.9},{:.6},{}",
            s.step, s.loss.nbp, s.loss.vq, s.loss.total, s.loss.payload, s.grad_norm, s.skipped
        );
        if let Err(e) = r {
            io_err.get_or_insert(e);
        }
        if s.step % 100 == 0 {
            eprintln!("step {} nbp {:.5} vq {:.5}", s.step, s.loss.nbp, s.loss.vq);
        }
    })?;
    if let Some(e) = io_err {
        return Err(kelixpq::Error::io(&log_path, e).into());
    }
    let ck = out.join("checkpoint.klx");
    save_checkpoint(&ck, &state)?;
    let (final_nbp, payload) = task.heldout_loss(&state.model)?;
    let mut summary = serde_json::json!({
        "steps": state.step,
        "initial_heldout_nbp": initial_nbp,
        "final_heldout_nbp": final_nbp,
        "final_heldout_payload_nll": payload,
        "nbp_ratio": final_nbp / initial_nbp,
    });
    if eval {
        summary["exact_match"] = task.exact_match(&state.model)?.into();
    }
    let sp = out.join("summary.json");
    fs::write(&sp, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| kelixpq::Error::io(&sp, e))?;
    println!("{}", serde_json::to_string(&summary)?);
    println!("wrote {}", ck.display());
    Ok(())
}

fn generate_at<T: Real>(rc: &RunConfig, ck: &Path, prompt: usize, limits: GenLimits, out: Option<&Path>) -> Result<()> {
    let task = ToyTask::new(rc.toy.clone())?;
    let state: TrainState<T> = load_checkpoint(ck)?;
    let model = &state.model;
    let (p, expected) = task.prompt(model, ToyTask::heldout_index(prompt))?;
    let gen = model.generate(&p, &limits)?;
    let text: Vec<u32> = gen
        .blocks
        .iter()
        .filter(|b| b.kind == BlockKind::Text && task.layout().is_text(b.tokens[0]))
        .map(|b| b.tokens[0])
        .collect();
    let truth: Vec<u32> = expected
        .iter()
        .filter(|b| task.layout().is_text(b.tokens[0]))
        .map(|b| b.tokens[0])
        .collect();
    if let Some(path) = out {
        write_packed_dump(path, std::slice::from_ref(&gen.seq))?;
    }
    let blocks = serde_json::json!({ "blocks": gen.seq.blocks });
    println!("{}", serde_json::to_string(&blocks)?);
    println!("caption: {}", task.grid().vocab().render(&text));
    println!("expected: {}", task.grid().vocab().render(&truth));
    println!("exact_match: {}", gen.blocks == expected);
    if gen.hit_limit {
        eprintln!("generation stopped at the block limit");
    }
    Ok(())
}

fn cell_dir_name(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn ablate(axis: Axis, out: &Path, steps: Option<usize>, config: Option<&Path>) -> Result<()> {
    let mut base = match config {
        Some(p) => RunConfig::load(p)?.toy,
        None => sweep_base(),
    };
    if let Some(s) = steps {
        base.steps = s;
    }
    ensure_dir(out)?;
    RunConfig::new(format!("ablate-{axis}"), base.clone()).save_into(out)?;
    for (_, rc) in sweep_cells(axis, &base)? {
        let dir = out.join(cell_dir_name(&rc.name));
        ensure_dir(&dir)?;
        rc.save_into(&dir)?;
    }
    let results = run_sweep(axis, &base)?;
    let csv = report_csv(&results);
    let path = out.join("report.csv");
    fs::write(&path, &csv).map_err(|e| kelixpq::Error::io(&path, e))?;
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::KmeansBuild {
            emb,
            clusters,
            out,
            seed,
            iters,
            subspaces,
            sub_dim,
        } => kmeans_build(&emb, clusters, &out, seed, iters, subspaces, sub_dim),
        Cmd::Tokenize {
            emb,
            codebook,
            scheme,
            out,
            grid,
            subspaces,
            levels,
            rq_layers,
            rq_k,
            rq_dim,
            seed,
        } => tokenize(
            &emb,
            codebook.as_deref(),
            scheme,
            &out,
            &grid,
            subspaces,
            levels,
            (rq_layers, rq_k, rq_dim),
            seed,
        ),
        Cmd::Train {
            task: TaskArg::Grid,
            config,
            steps,
            stage,
            init,
            out,
            eval,
        } => {
            let mut rc = load_run_config(config.as_deref(), || RunConfig::new("grid", ToyConfig::default()))?;
            if let Some(s) = steps {
                rc.toy.steps = s;
            }
            rc.out_dir = Some(out.clone());
            rc.validate()?;
            ensure_dir(&out)?;
            rc.save_into(&out)?;
            let stage = match stage {
                StageArg::Align => Stage::Align,
                StageArg::Full => Stage::Joint,
            };
            match rc.toy.precision {
                Precision::F64 => train_at::<f64>(&rc, init.as_deref(), stage, &out, eval),
                Precision::F32 => train_at::<f32>(&rc, init.as_deref(), stage, &out, eval),
            }
        }
        Cmd::Generate {
            checkpoint,
            config,
            prompt,
            temperature,
            seed,
            max_blocks,
            out,
        } => {
            let cfg_path = config.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .unwrap_or_else(|| Path::new("."))
                    .join("run_config.json")
            });
            let rc = RunConfig::load(&cfg_path).with_context(|| format!("loading {}", cfg_path.display()))?;
            let limits = GenLimits {
                max_new_blocks: max_blocks,
                temperature,
                seed,
            };
            match rc.toy.precision {
                Precision::F64 => generate_at::<f64>(&rc, &checkpoint, prompt, limits, out.as_deref()),
                Precision::F32 => generate_at::<f32>(&rc, &checkpoint, prompt, limits, out.as_deref()),
            }
        }
        Cmd::Ablate {
            axis,
            out,
            steps,
            config,
        } => ablate(axis, &out, steps, config.as_deref()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use kelixpq::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidArgument(_) => 1,
                E::NonFinite { .. } => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    2
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("KELIXPQ_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| kelixpq::Error::InvalidArgument(format!("KELIXPQ_THREADS=`{v}` is not a count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads().and_then(|_| run(cli)) {
        eprintln!("error: {e:#}");
        return ExitCode::from(exit_code(&e));
    }
    ExitCode::SUCCESS
}
