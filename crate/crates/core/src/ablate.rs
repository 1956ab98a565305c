//! Run configurations and the seeded ablation sweeps.
//!
//! Every sweep varies one axis of a base toy configuration and trains each
//! cell from scratch on the same step budget. Cells are independent and
//! deterministic, so they run concurrently.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nbp::compression;
use crate::ndiff::{Precision, Real};
use crate::pq::{utilization, Fusion, PQConfig, Scheme};
use crate::toymodel::task::{run_toy, Supervision, ToyConfig, ToyTask};
use crate::toymodel::{AdamWConfig, OutputHead, VisualInput};

/// A named experiment: the toy configuration plus output location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub toy: ToyConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(name: impl Into<String>, toy: ToyConfig) -> Self {
        Self {
            name: name.into(),
            toy,
            out_dir: None,
        }
    }

    pub fn scheme(&self) -> Scheme {
        self.toy.scheme
    }

    pub fn n(&self) -> usize {
        self.toy.pq.n_sub
    }

    pub fn s(&self) -> usize {
        self.toy.pq.size
    }

    pub fn d(&self) -> usize {
        self.toy.pq.sub_dim
    }

    pub fn beta(&self) -> f64 {
        self.toy.pq.beta
    }

    pub fn fusion(&self) -> Fusion {
        self.toy.pq.fusion
    }

    pub fn shared_codebook(&self) -> bool {
        self.toy.pq.shared
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::InvalidArgument("experiment name is empty".into()));
        }
        self.toy.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_str(&s)?;
        c.validate()?;
        Ok(c)
    }

    /// Writes `run_config.json` into `dir`.
    pub fn save_into(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("run_config.json");
        std::fs::write(&path, self.to_json()? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    N,
    D,
    S,
    Fusion,
    Shared,
    Scheme,
    Head9,
}

impl Axis {
    pub const ALL: [Axis; 7] = [
        Axis::N,
        Axis::D,
        Axis::S,
        Axis::Fusion,
        Axis::Shared,
        Axis::Scheme,
        Axis::Head9,
    ];
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Axis::N => "N",
            Axis::D => "d",
            Axis::S => "S",
            Axis::Fusion => "fusion",
            Axis::Shared => "shared",
            Axis::Scheme => "scheme",
            Axis::Head9 => "head9",
        };
        f.write_str(s)
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N" | "n" => Ok(Axis::N),
            "d" | "D" => Ok(Axis::D),
            "S" | "s" => Ok(Axis::S),
            "fusion" => Ok(Axis::Fusion),
            "shared" => Ok(Axis::Shared),
            "scheme" => Ok(Axis::Scheme),
            "head9" => Ok(Axis::Head9),
            _ => Err(Error::InvalidArgument(format!(
                "unknown axis `{s}` (expected N, d, S, fusion, shared, scheme or head9)"
            ))),
        }
    }
}

/// Base configuration for sweeps: the default toy task on a shorter budget.
pub fn sweep_base() -> ToyConfig {
    ToyConfig {
        steps: 400,
        eval_examples: 64,
        optim: AdamWConfig {
            lr: 3e-3,
            ..AdamWConfig::default()
        },
        ..ToyConfig::default()
    }
}

fn with_pq(base: &ToyConfig, f: impl FnOnce(&mut PQConfig)) -> ToyConfig {
    let mut c = base.clone();
    f(&mut c.pq);
    c
}

/// The cells of one sweep, labelled by axis value.
pub fn sweep_cells(axis: Axis, base: &ToyConfig) -> Result<Vec<(String, RunConfig)>> {
    let k = base.pq.k();
    let cell = |value: String, toy: ToyConfig| {
        let name = format!("{axis}={value}");
        (value, RunConfig::new(name, toy))
    };
    let cells: Vec<(String, RunConfig)> = match axis {
        // sub-codebook size K held fixed, so capacity grows with N
        Axis::N => [1, 2, 4, 8]
            .into_iter()
            .map(|n| {
                cell(
                    n.to_string(),
                    with_pq(base, |p| {
                        p.n_sub = n;
                        p.size = k * n;
                    }),
                )
            })
            .collect(),
        Axis::D => [2, 4, 8, 16]
            .into_iter()
            .map(|d| cell(d.to_string(), with_pq(base, |p| p.sub_dim = d)))
            .collect(),
        Axis::S => [2, 4, 8, 16]
            .into_iter()
            .map(|kk| {
                let s = kk * base.pq.n_sub;
                cell(s.to_string(), with_pq(base, |p| p.size = s))
            })
            .collect(),
        Axis::Fusion => [Fusion::Sum, Fusion::Mean]
            .into_iter()
            .map(|f| {
                let label = match f {
                    Fusion::Sum => "sum",
                    Fusion::Mean => "mean",
                };
                cell(label.into(), with_pq(base, |p| p.fusion = f))
            })
            .collect(),
        Axis::Shared => [false, true]
            .into_iter()
            .map(|s| cell(s.to_string(), with_pq(base, |p| p.shared = s)))
            .collect(),
        Axis::Scheme => [Scheme::Vq, Scheme::Fsq, Scheme::Rq]
            .into_iter()
            .map(|s| {
                let mut c = base.clone();
                c.scheme = s;
                // only vq has an on-tape quantizer; compare all on fixed tokens
                c.visual = VisualInput::Table;
                cell(s.to_string(), c)
            })
            .collect(),
        // independent heads only lose when visual codes are supervised
        Axis::Head9 => [OutputHead::Block, OutputHead::NineHead]
            .into_iter()
            .map(|h| {
                let mut c = base.clone();
                c.head = h;
                c.supervision = Supervision::Full;
                let label = match h {
                    OutputHead::Block => "block",
                    OutputHead::NineHead => "nine_head",
                };
                cell(label.into(), c)
            })
            .collect(),
    };
    for (_, c) in &cells {
        c.validate()?;
    }
    Ok(cells)
}

/// Final measurements of one sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub name: String,
    pub axis: Axis,
    pub value: String,
    pub scheme: Scheme,
    pub n: usize,
    pub s: usize,
    pub d: usize,
    pub initial_nbp: f64,
    /// Held-out `L_nbp` after training.
    pub final_nbp: f64,
    /// Held-out NLL of the payload tokens both output heads predict.
    pub final_payload_nll: f64,
    pub final_train_nbp: f64,
    /// Mean over code positions of the fraction of ids in use.
    pub utilization: f64,
    pub capacity_bits: f64,
    /// Raw tokens per backbone block of one grid image.
    pub compression: f64,
    pub seconds: f64,
}

fn run_cell_at<T: Real>(axis: Axis, value: &str, rc: &RunConfig) -> Result<CellResult> {
    let start = Instant::now();
    let (report, _) = run_toy::<T>(&rc.toy, false)?;
    let task = ToyTask::new(rc.toy.clone())?;
    let mut codes = Vec::new();
    for i in 0..rc.toy.eval_examples.max(1) {
        let g = task.grid().example(ToyTask::heldout_index(i));
        for p in 0..g.embeddings.rows() {
            codes.push(task.tokenizer().encode(g.embeddings.row(p))?.0);
        }
    }
    let util = utilization(task.tokenizer(), &codes);
    let grid = (rc.toy.grid.rows, rc.toy.grid.cols);
    Ok(CellResult {
        name: rc.name.clone(),
        axis,
        value: value.to_string(),
        scheme: rc.toy.scheme,
        n: task.layout().code_len,
        s: task.layout().visual,
        d: rc.toy.pq.sub_dim,
        initial_nbp: report.initial_nbp,
        final_nbp: report.final_nbp,
        final_payload_nll: report.final_payload_nll,
        final_train_nbp: report.final_train_nbp,
        utilization: util.iter().sum::<f64>() / util.len().max(1) as f64,
        capacity_bits: task.tokenizer().capacity_bits(),
        compression: compression(grid, task.layout())?.ratio(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_cell(axis: Axis, value: &str, rc: &RunConfig) -> Result<CellResult> {
    match rc.toy.precision {
        Precision::F64 => run_cell_at::<f64>(axis, value, rc),
        Precision::F32 => run_cell_at::<f32>(axis, value, rc),
    }
}

/// Runs every cell of `axis` concurrently; results keep sweep order.
pub fn run_sweep(axis: Axis, base: &ToyConfig) -> Result<Vec<CellResult>> {
    let cells = sweep_cells(axis, base)?;
    cells.par_iter().map(|(v, rc)| run_cell(axis, v, rc)).collect()
}

pub const CSV_HEADER: &str = "name,axis,value,scheme,N,S,d,initial_nbp,final_nbp,final_payload_nll,\
final_train_nbp,utilization,capacity_bits,compression,seconds";

/// Comma-separated report, one row per cell, header first.
pub fn report_csv(results: &[CellResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.4},{:.2},{:.4},{:.2}\n",
            r.name,
            r.axis,
            r.value,
            r.scheme,
            r.n,
            r.s,
            r.d,
            r.initial_nbp,
            r.final_nbp,
            r.final_payload_nll,
            r.final_train_nbp,
            r.utilization,
            r.capacity_bits,
            r.compression,
            r.seconds
        ));
    }
    out
}

/// Whether `xs` never increases by more than `slack` from one entry to
/// the next.
pub fn non_increasing(xs: &[f64], slack: f64) -> bool {
    xs.windows(2).all(|w| w[1] <= w[0] + slack)
}
