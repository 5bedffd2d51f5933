use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::prompt::{Architecture, Sharing};
use crate::train::{RunMetrics, TrainConfig};

use super::experiment::{
    run_on_task, train_template, unknown_keys, write_rows, MetricsRow, METRICS_HEADER,
};
use super::synth::load_task_dir;

pub const THREADS_ENV: &str = "PRE_LAB_THREADS";

/// Axes of a sweep over a base recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AblationGrid {
    pub task_dir: PathBuf,
    pub output: PathBuf,
    #[serde(default)]
    pub base: TrainConfig,
    pub architectures: Vec<Architecture>,
    pub residual: Vec<bool>,
    pub sharing: Vec<Sharing>,
    #[serde(rename = "M")]
    pub m: Vec<usize>,
    #[serde(rename = "K")]
    pub k: Vec<usize>,
    pub seeds: Vec<u64>,
}

/// One point of the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub index: usize,
    pub config: TrainConfig,
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let axes = [
            ("architectures", self.architectures.len()),
            ("residual", self.residual.len()),
            ("sharing", self.sharing.len()),
            ("M", self.m.len()),
            ("K", self.k.len()),
            ("seeds", self.seeds.len()),
        ];
        for (name, n) in axes {
            if n == 0 {
                errs.push(format!("{name}: axis is empty"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Cartesian product in declaration order, last axis fastest. The
    /// seed sets both the run seed and the encoder seed.
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &arch in &self.architectures {
            for &residual in &self.residual {
                for &sharing in &self.sharing {
                    for &m in &self.m {
                        for &k in &self.k {
                            for &seed in &self.seeds {
                                let mut c = self.base.clone();
                                c.encoder.architecture = arch;
                                c.encoder.residual = residual;
                                c.encoder.sharing = sharing;
                                c.encoder.seed = seed;
                                c.m = m;
                                c.k = k;
                                c.seed = seed;
                                out.push(GridCell {
                                    index: out.len(),
                                    config: c,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

pub fn load_grid(path: &Path) -> Result<AblationGrid> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text)?;
    let mut template = serde_json::json!({
        "taskDir": "", "output": "", "architectures": [], "residual": [],
        "sharing": [], "M": [], "K": [], "seeds": [],
    });
    template["base"] = train_template();
    let mut errs = Vec::new();
    unknown_keys(&value, &template, "", &mut errs);
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut grid: AblationGrid =
        serde_json::from_value(value).map_err(|e| Error::Config(vec![e.to_string()]))?;
    let base = path.parent().unwrap_or(Path::new("."));
    if grid.task_dir.is_relative() {
        grid.task_dir = base.join(&grid.task_dir);
    }
    if grid.output.is_relative() {
        grid.output = base.join(&grid.output);
    }
    grid.validate()?;
    Ok(grid)
}

/// Outcome of one cell; failures keep the message.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: GridCell,
    pub outcome: std::result::Result<RunMetrics, String>,
}

impl CellResult {
    pub fn record(&self) -> Vec<String> {
        let row = MetricsRow {
            run_id: format!("cell{:04}", self.cell.index),
            cfg: self.cell.config.clone(),
            metrics: self.outcome.as_ref().ok().cloned(),
        };
        let mut r = row.record();
        r.push(match &self.outcome {
            Ok(_) => "ok".into(),
            Err(e) => format!("error: {e}"),
        });
        r
    }
}

/// Worker count from `PRE_LAB_THREADS`, else rayon's default.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()?
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
}

/// Runs every cell, in parallel, and writes one row per cell in cell order.
/// A failing cell is recorded and does not stop the grid.
pub fn run_ablation_grid(grid: &AblationGrid) -> Result<Vec<CellResult>> {
    grid.validate()?;
    let loaded = load_task_dir(&grid.task_dir)?;
    let cells = grid.cells();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .into_par_iter()
            .map(|cell| {
                let outcome = run_on_task(&loaded, &cell.config)
                    .map(|(_, m)| m)
                    .map_err(|e| e.to_string());
                if let Err(e) = &outcome {
                    log::warn!("cell {} failed: {e}", cell.index);
                }
                CellResult { cell, outcome }
            })
            .collect()
    });
    if let Some(parent) = grid.output.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut header = METRICS_HEADER.to_vec();
    header.push("status");
    let rows: Vec<Vec<String>> = results.iter().map(CellResult::record).collect();
    write_rows(&grid.output, &header, &rows)?;
    Ok(results)
}
