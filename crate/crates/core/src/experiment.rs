//! Phase-diagram sweeps, configuration files and CSV output.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hier::{block_score, default_block_score, SparsityProfile};
use crate::operator::{operator_backend, Dims, MeasurementOperator, DEFAULT_DENSE_BUDGET};
use crate::protocol::{Field, Perturbation, PlantedInstance, ProtocolConfig, QuantizerConfig};
use crate::scalar::{Scalar, C64};
use crate::seed;
use crate::solver::{evaluate_success, Hihtp, SolverConfig, SuccessReport};

/// Exact CSV header written by [`write_csv`].
pub const CSV_HEADER: &str =
    "mu,sigma,s,trials,successes,success_rate,mean_iterations,mean_residual,mean_runtime_ms,key_bits";

/// An explicit list of values or an inclusive `start..=end` span.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RangeSpec {
    List(Vec<usize>),
    Span {
        start: usize,
        end: usize,
        #[serde(default = "one")]
        step: usize,
    },
}

fn one() -> usize {
    1
}

impl RangeSpec {
    pub fn values(&self) -> Result<Vec<usize>> {
        let values = match self {
            RangeSpec::List(v) => v.clone(),
            RangeSpec::Span { start, end, step } => {
                if *step == 0 {
                    return Err(Error::InvalidConfig("range step must be positive".into()));
                }
                (*start..=*end).step_by(*step).collect()
            }
        };
        if values.is_empty() {
            return Err(Error::InvalidConfig("empty range".into()));
        }
        Ok(values)
    }
}

impl From<Vec<usize>> for RangeSpec {
    fn from(v: Vec<usize>) -> Self {
        RangeSpec::List(v)
    }
}

/// The key-value configuration file shared by `sweep` and `protocol`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "N_d")]
    pub taps: usize,
    #[serde(rename = "E")]
    pub code_len: usize,
    #[serde(rename = "N_r")]
    pub users: usize,
    /// Required by `sweep`; `protocol` may give `mu`, `sigma`, `s` instead.
    #[serde(default)]
    pub mu_range: Option<RangeSpec>,
    #[serde(default)]
    pub sigma_range: Option<RangeSpec>,
    #[serde(default)]
    pub s_range: Option<RangeSpec>,
    #[serde(default = "one")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// `null` or absent for noiseless data.
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub quantizer: QuantizerConfig,
    #[serde(default)]
    pub field: Field,
    #[serde(default)]
    pub perturbation: Perturbation,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub score: Option<String>,
    #[serde(default)]
    pub backend: Option<String>,
    /// Single cell for `protocol`; defaults to the first value of each range.
    #[serde(default)]
    pub mu: Option<usize>,
    #[serde(default)]
    pub sigma: Option<usize>,
    #[serde(default)]
    pub s: Option<usize>,
}

fn range_values(range: &Option<RangeSpec>, key: &str) -> Result<Vec<usize>> {
    range
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig(format!("missing `{key}`")))?
        .values()
}

impl ExperimentConfig {
    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        Ok(serde_json::from_reader(r)?)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_reader(File::open(path)?)
    }

    pub fn dims(&self) -> Result<Dims> {
        Dims::new(self.n, self.taps, self.code_len, self.users)
    }

    pub fn grid(&self) -> Result<SweepGrid> {
        let grid = SweepGrid {
            dims: self.dims()?,
            mu: range_values(&self.mu_range, "mu_range")?,
            sigma: range_values(&self.sigma_range, "sigma_range")?,
            s: range_values(&self.s_range, "s_range")?,
            trials: self.trials,
            seed: self.seed,
            snr_db: self.snr_db,
            quantizer: self.quantizer,
            field: self.field,
            solver: self.solver,
            score: self.score.clone().unwrap_or_else(|| default_block_score().name().into()),
            backend: self.backend.clone().unwrap_or_else(|| "matrix-free".into()),
            timing: false,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn protocol(&self) -> Result<ProtocolConfig> {
        let pick = |single: Option<usize>, range: &Option<RangeSpec>, key: &str| match single {
            Some(v) => Ok(v),
            None => range_values(range, key).map(|v| v[0]),
        };
        let mut cfg = ProtocolConfig::new(
            self.dims()?,
            pick(self.s, &self.s_range, "s_range")?,
            pick(self.sigma, &self.sigma_range, "sigma_range")?,
            pick(self.mu, &self.mu_range, "mu_range")?,
        );
        cfg.trials = self.trials;
        cfg.seed = self.seed;
        cfg.snr_db = self.snr_db;
        cfg.quantizer = self.quantizer;
        cfg.perturbation = self.perturbation;
        cfg.field = self.field;
        cfg.solver = self.solver;
        if let Some(score) = &self.score {
            cfg.score = score.clone();
        }
        if let Some(backend) = &self.backend {
            cfg.backend = backend.clone();
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub dims: Dims,
    pub mu: Vec<usize>,
    pub sigma: Vec<usize>,
    pub s: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub snr_db: Option<f64>,
    pub quantizer: QuantizerConfig,
    pub field: Field,
    pub solver: SolverConfig,
    pub score: String,
    pub backend: String,
    /// Record wall-clock solve times. Off by default so that output depends
    /// only on the configuration and seed.
    pub timing: bool,
}

impl SweepGrid {
    fn with_ranges(dims: Dims, mu: Vec<usize>, sigma: Vec<usize>, s: Vec<usize>, trials: usize, seed: u64) -> Self {
        Self {
            dims,
            mu,
            sigma,
            s,
            trials,
            seed,
            snr_db: None,
            quantizer: QuantizerConfig::default(),
            field: Field::Real,
            solver: SolverConfig::default(),
            score: default_block_score().name().into(),
            backend: "matrix-free".into(),
            timing: false,
        }
    }

    /// `N = 256`, `N_d = E = 32`, `N_r = 6`; `μ ∈ {2,3}`, `σ, s ∈ {2,4,6}`.
    pub fn desk(trials: usize, seed: u64) -> Self {
        let dims = Dims::new(256, 32, 32, 6).expect("valid desk dims");
        Self::with_ranges(dims, vec![2, 3], vec![2, 4, 6], vec![2, 4, 6], trials, seed)
    }

    /// `N = 1024`, `N_d = E = 128`, `N_r = 10`; `μ ∈ 2..=5`, `σ, s ∈ 2..=15`.
    pub fn published(trials: usize, seed: u64) -> Self {
        let dims = Dims::new(1024, 128, 128, 10).expect("valid published dims");
        Self::with_ranges(
            dims,
            (2..=5).collect(),
            (2..=15).collect(),
            (2..=15).collect(),
            trials,
            seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.mu.is_empty() || self.sigma.is_empty() || self.s.is_empty() {
            return Err(Error::InvalidConfig("sweep ranges must be non-empty".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        self.solver.validate()?;
        block_score(&self.score)?;
        Ok(())
    }

    /// Cells in emission order: `μ` outermost, then `σ`, then `s`.
    pub fn cells(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for &mu in &self.mu {
            for &sigma in &self.sigma {
                for &s in &self.s {
                    out.push((mu, sigma, s));
                }
            }
        }
        out
    }

    pub fn trial_seed(&self, mu: usize, sigma: usize, s: usize, trial: usize) -> u64 {
        seed::split(self.seed, &[mu as u64, sigma as u64, s as u64, trial as u64])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub mu: usize,
    pub sigma: usize,
    pub s: usize,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_iterations: f64,
    pub mean_residual: f64,
    pub mean_runtime_ms: f64,
    pub key_bits: usize,
}

/// Outcome of one planted trial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialStats {
    pub success: bool,
    pub iterations: usize,
    pub residual: f64,
    pub runtime_ms: f64,
}

/// Draw the planted instance of one grid trial and solve it.
pub fn run_trial(grid: &SweepGrid, mu: usize, sigma: usize, s: usize, trial: usize) -> Result<TrialStats> {
    match grid.field {
        Field::Real => run_trial_in::<f64>(grid, mu, sigma, s, trial),
        Field::Complex => run_trial_in::<C64>(grid, mu, sigma, s, trial),
    }
}

fn run_trial_in<T: Scalar>(grid: &SweepGrid, mu: usize, sigma: usize, s: usize, trial: usize) -> Result<TrialStats> {
    let profile = SparsityProfile::new(s, sigma, mu, grid.dims)?;
    let trial_seed = grid.trial_seed(mu, sigma, s, trial);
    let op = MeasurementOperator::<T>::gaussian(grid.dims, seed::split(trial_seed, &[seed::CODEBOOK_TAG]))?;
    let mut rng = seed::rng(seed::split(trial_seed, &[seed::INSTANCE_TAG]));
    let mut noise_rng = seed::rng(seed::split(trial_seed, &[seed::NOISE_TAG]));
    let instance = PlantedInstance::plant(&op, &profile, &mut rng, grid.snr_db, &mut noise_rng)?;

    let backend = operator_backend(&grid.backend, op, DEFAULT_DENSE_BUDGET)?;
    let solver = Hihtp::new(grid.solver).with_score(block_score(&grid.score)?);
    let started = Instant::now();
    let result = solver.solve(backend.as_ref(), &instance.y, &profile)?;
    let runtime_ms = started.elapsed().as_secs_f64() * 1e3;
    let report = evaluate_success(&result, &instance)?;
    Ok(TrialStats {
        success: report.success,
        iterations: result.iterations,
        residual: result.residual_norm,
        runtime_ms: if grid.timing { runtime_ms } else { 0.0 },
    })
}

/// Plant one instance for the single cell of `cfg` (seeded by `cfg.seed`)
/// and report recovery.
pub fn solve_planted(cfg: &ProtocolConfig) -> Result<SuccessReport> {
    match cfg.field {
        Field::Real => solve_planted_in::<f64>(cfg),
        Field::Complex => solve_planted_in::<C64>(cfg),
    }
}

fn solve_planted_in<T: Scalar>(cfg: &ProtocolConfig) -> Result<SuccessReport> {
    let profile = SparsityProfile::new(cfg.s, cfg.sigma, cfg.mu, cfg.dims)?;
    let op = MeasurementOperator::<T>::gaussian(cfg.dims, seed::split(cfg.seed, &[seed::CODEBOOK_TAG]))?;
    let mut rng = seed::rng(seed::split(cfg.seed, &[seed::INSTANCE_TAG]));
    let mut noise_rng = seed::rng(seed::split(cfg.seed, &[seed::NOISE_TAG]));
    let instance = PlantedInstance::plant(&op, &profile, &mut rng, cfg.snr_db, &mut noise_rng)?;
    let backend = operator_backend(&cfg.backend, op, DEFAULT_DENSE_BUDGET)?;
    let solver = Hihtp::new(cfg.solver).with_score(block_score(&cfg.score)?);
    let result = solver.solve(backend.as_ref(), &instance.y, &profile)?;
    evaluate_success(&result, &instance)
}

fn feasible(grid: &SweepGrid, mu: usize, sigma: usize, s: usize) -> bool {
    (1..=grid.dims.users).contains(&mu)
        && (1..=grid.dims.taps).contains(&sigma)
        && (1..=grid.dims.code_len).contains(&s)
}

/// Run every cell of `grid`. Trials run in parallel; records come back in
/// [`SweepGrid::cells`] order and do not depend on the schedule.
pub fn sweep(grid: &SweepGrid) -> Result<Vec<SweepRecord>> {
    grid.validate()?;
    let cells = grid.cells();
    let jobs: Vec<(usize, usize)> = cells
        .iter()
        .enumerate()
        .filter(|(_, &(mu, sigma, s))| feasible(grid, mu, sigma, s))
        .flat_map(|(c, _)| (0..grid.trials).map(move |t| (c, t)))
        .collect();

    let stats: Vec<TrialStats> = jobs
        .par_iter()
        .map(|&(c, t)| {
            let (mu, sigma, s) = cells[c];
            run_trial(grid, mu, sigma, s, t)
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(cells.len());
    let mut results = jobs.iter().zip(stats.iter()).peekable();
    for (c, &(mu, sigma, s)) in cells.iter().enumerate() {
        let key_bits = grid.quantizer.key_bits(grid.field, sigma);
        if !feasible(grid, mu, sigma, s) {
            warn!("skipping infeasible cell mu={mu} sigma={sigma} s={s} for dims {:?}", grid.dims);
            records.push(SweepRecord {
                mu,
                sigma,
                s,
                trials: 0,
                successes: 0,
                success_rate: 0.0,
                mean_iterations: 0.0,
                mean_residual: 0.0,
                mean_runtime_ms: 0.0,
                key_bits,
            });
            continue;
        }
        let mut cell = Vec::with_capacity(grid.trials);
        while let Some(((jc, _), st)) = results.next_if(|((jc, _), _)| *jc == c) {
            debug_assert_eq!(*jc, c);
            cell.push(*st);
        }
        records.push(aggregate(mu, sigma, s, key_bits, &cell));
    }
    Ok(records)
}

fn aggregate(mu: usize, sigma: usize, s: usize, key_bits: usize, trials: &[TrialStats]) -> SweepRecord {
    let n = trials.len();
    let successes = trials.iter().filter(|t| t.success).count();
    let mean = |f: &dyn Fn(&TrialStats) -> f64| trials.iter().map(f).sum::<f64>() / n as f64;
    SweepRecord {
        mu,
        sigma,
        s,
        trials: n,
        successes,
        success_rate: successes as f64 / n as f64,
        mean_iterations: mean(&|t| t.iterations as f64),
        mean_residual: mean(&|t| t.residual),
        mean_runtime_ms: mean(&|t| t.runtime_ms),
        key_bits,
    }
}

pub fn write_csv<W: Write>(records: &[SweepRecord], w: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wtr.write_record(CSV_HEADER.split(','))?;
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn emit_csv(records: &[SweepRecord], path: &Path) -> Result<()> {
    write_csv(records, File::create(path)?)
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<SweepRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::InvalidConfig(format!("unexpected CSV header `{}`", header.join(","))));
    }
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}
