//! Resumable grid sweeps over group size, noise level and seed.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use agrp::eval::{accuracy, rerank};
use agrp::trainer::{train, Variant};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{CliError, CliResult};

pub const SWEEP_CSV: &str = "sweep.csv";
const HEADER: &str = "noise_level,group_size,seed,variant,accuracy,map\n";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub noise_level: f64,
    pub group_size: usize,
    pub seed: u64,
    pub variant: Variant,
}

impl Cell {
    fn key(&self) -> (u64, usize, u64, Variant) {
        (self.noise_level.to_bits(), self.group_size, self.seed, self.variant)
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "xi={} k={} seed={} {}",
            self.noise_level, self.group_size, self.seed, self.variant
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub noise_level: f64,
    pub group_size: usize,
    pub seed: u64,
    pub variant: Variant,
    pub accuracy: f64,
    pub map: f64,
}

impl SweepRow {
    pub fn cell(&self) -> Cell {
        Cell {
            noise_level: self.noise_level,
            group_size: self.group_size,
            seed: self.seed,
            variant: self.variant,
        }
    }

    fn line(&self) -> String {
        format!(
            "{},{},{},{},{},{}\n",
            self.noise_level, self.group_size, self.seed, self.variant, self.accuracy, self.map
        )
    }
}

/// Every cell of the grid, noise level outermost.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let s = &cfg.sweep;
    let mut out = Vec::new();
    for &noise_level in &s.noise_levels {
        for &group_size in &s.group_sizes {
            for &seed in &s.seeds {
                out.push(Cell {
                    noise_level,
                    group_size,
                    seed,
                    variant: cfg.cell_variant(group_size),
                });
            }
        }
    }
    out
}

/// Trains one cell and scores it: test accuracy and re-ranking MAP over
/// the noisy training set.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell) -> CliResult<SweepRow> {
    let ds = cfg.dataset.load_cell(cell.noise_level, cell.seed)?;
    let tc = cfg.run_config(cell.variant, cell.group_size, cell.seed);
    let (model, _) = train(&tc, &ds)?;
    Ok(SweepRow {
        noise_level: cell.noise_level,
        group_size: cell.group_size,
        seed: cell.seed,
        variant: cell.variant,
        accuracy: accuracy(&model, &ds.test)?,
        map: rerank(&model, &ds.train)?.mean_average_precision,
    })
}

/// Reads the rows already in a sweep CSV. A torn final line, left by an
/// interrupted write, is cut off so appends start on a fresh line.
pub fn read_rows(path: &Path) -> CliResult<Vec<SweepRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let bytes = fs::read(path)?;
    if !bytes.is_empty() && !bytes.ends_with(b"\n") {
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let rows = rdr.deserialize().collect::<Result<Vec<SweepRow>, _>>()?;
    Ok(rows)
}

#[derive(Debug)]
pub struct SweepReport {
    pub total: usize,
    pub resumed: usize,
    pub completed: usize,
    pub failures: Vec<(Cell, CliError)>,
}

/// Thread count from `AGRP_THREADS`, if set.
pub fn thread_cap() -> CliResult<Option<usize>> {
    match std::env::var("AGRP_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::config(format!("AGRP_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs every cell not already recorded in `csv_path`, appending one row
/// per finished cell. A failing cell is reported and the others still run.
pub fn run_sweep(cfg: &ExperimentConfig, csv_path: &Path, threads: Option<usize>) -> CliResult<SweepReport> {
    if let DataSource::Directory(_) = cfg.dataset {
        return Err(CliError::config("a sweep varies the noise level; use a synthetic or idx dataset"));
    }
    let done: HashSet<_> = read_rows(csv_path)?.iter().map(|r| r.cell().key()).collect();
    let all = cells(cfg);
    let todo: Vec<Cell> = all.iter().filter(|c| !done.contains(&c.key())).copied().collect();

    let mut file = OpenOptions::new().create(true).append(true).open(csv_path)?;
    if file.metadata()?.len() == 0 {
        file.write_all(HEADER.as_bytes())?;
    }
    let out: Mutex<File> = Mutex::new(file);

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))?;

    let results: Vec<(Cell, CliResult<()>)> = pool.install(|| {
        todo.par_iter()
            .map(|cell| {
                let r = run_cell(cfg, cell).and_then(|row| {
                    // One write per row, so rows never interleave.
                    let mut f = out.lock().unwrap();
                    f.write_all(row.line().as_bytes())?;
                    f.flush()?;
                    Ok(())
                });
                (*cell, r)
            })
            .collect()
    });

    let mut report = SweepReport {
        total: all.len(),
        resumed: all.len() - todo.len(),
        completed: 0,
        failures: Vec::new(),
    };
    for (cell, r) in results {
        match r {
            Ok(()) => report.completed += 1,
            Err(e) => report.failures.push((cell, e)),
        }
    }
    Ok(report)
}
