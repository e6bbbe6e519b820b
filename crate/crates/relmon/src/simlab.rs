//! Synthetic data generation and the rejection-rate experiment harness.
//!
//! Scenarios draw 2-6 change locations uniformly in the monitoring window
//! under a minimum-gap constraint, assign jump sizes per scenario kind and
//! add one of three noise models, all normalized to variance 1/4. The
//! harness runs seeded replications of the full decision rule in
//! stop-on-first-rejection mode and tabulates rejection rates.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cpe;
use crate::error::{RelmonError, Result};
use crate::monitor::Monitor;
use crate::stream_core::{seeded_rng, streams, CpConstant, MonitorConfig, QuantileMode};

/// Minimum index gap between consecutive change locations.
pub const MIN_GAP: usize = 90;
/// Cap on rejection-sampling attempts for the location constraint.
const MAX_ATTEMPTS: usize = 1_000_000;
/// AR recursion warm-up length.
const AR_BURN_IN: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseModel {
    Iid,
    Ma,
    Ar,
}

impl NoiseModel {
    pub fn label(&self) -> &'static str {
        match self {
            NoiseModel::Iid => "IID",
            NoiseModel::Ma => "MA",
            NoiseModel::Ar => "AR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    /// All deviations strictly inside the stability corridor.
    Interior,
    /// All deviations exactly at the threshold (random sign).
    Boundary,
    AltI,
    AltII,
    AltIII,
}

impl ScenarioKind {
    pub fn label(&self) -> &'static str {
        match self {
            ScenarioKind::Interior => "Interior",
            ScenarioKind::Boundary => "Boundary",
            ScenarioKind::AltI => "AltI",
            ScenarioKind::AltII => "AltII",
            ScenarioKind::AltIII => "AltIII",
        }
    }

    /// Range of the large jump magnitudes under the alternatives.
    fn big_range(&self, delta: f64) -> (f64, f64) {
        match self {
            ScenarioKind::AltI => (delta + 0.1, delta + 1.0),
            ScenarioKind::AltII => (delta + 0.5, delta + 1.5),
            ScenarioKind::AltIII => (delta + 1.0, delta + 2.0),
            _ => unreachable!(),
        }
    }
}

/// Population truth of one generated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub noise: NoiseModel,
    pub n: usize,
    /// Total length, 20 N (training included).
    pub horizon_n: usize,
    /// Change locations as indices in (N, 19N).
    pub change_locations: Vec<usize>,
    /// Post-change mean deviations from the training mean.
    pub jumps: Vec<f64>,
    pub delta: f64,
}

impl ScenarioSpec {
    /// Population mean at index i (1-based).
    pub fn mean_at(&self, i: usize) -> f64 {
        let mut level = 0.0;
        for (loc, jump) in self.change_locations.iter().zip(&self.jumps) {
            if i > *loc {
                level = *jump;
            }
        }
        level
    }

    /// First location whose jump exceeds the threshold, if any.
    pub fn first_relevant_change(&self) -> Option<usize> {
        self.change_locations
            .iter()
            .zip(&self.jumps)
            .find(|(_, j)| j.abs() > self.delta)
            .map(|(loc, _)| *loc)
    }
}

/// Noise draws with variance 1/4 under all three models.
pub fn gen_noise(model: NoiseModel, len: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    match model {
        NoiseModel::Iid => (0..len).map(|_| 0.5 * normal(rng)).collect(),
        NoiseModel::Ma => {
            let inv = 1.0 / 5f64.sqrt();
            let mut prev = normal(rng);
            (0..len)
                .map(|_| {
                    let eta = normal(rng);
                    let eps = inv * (eta + 0.5 * prev);
                    prev = eta;
                    eps
                })
                .collect()
        }
        NoiseModel::Ar => {
            let c = 3f64.sqrt() / 4.0;
            let mut eps = 0.0;
            for _ in 0..AR_BURN_IN {
                eps = c * normal(rng) + 0.5 * eps;
            }
            (0..len)
                .map(|_| {
                    eps = c * normal(rng) + 0.5 * eps;
                    eps
                })
                .collect()
        }
    }
}

fn normal(rng: &mut ChaCha12Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn uniform(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draw change locations by rejection sampling under the minimum-gap
/// constraint.
fn draw_locations(n: usize, count: usize, rng: &mut ChaCha12Rng) -> Result<Vec<usize>> {
    for _ in 0..MAX_ATTEMPTS {
        let mut locs: Vec<usize> =
            (0..count).map(|_| rng.random_range(n + 1..19 * n)).collect();
        locs.sort_unstable();
        let ok = locs.windows(2).all(|w| w[1] - w[0] >= MIN_GAP);
        if ok {
            return Ok(locs);
        }
    }
    Err(RelmonError::Generation(format!(
        "no admissible change configuration found after {MAX_ATTEMPTS} attempts \
         (N = {n}, {count} changes, gap {MIN_GAP})"
    )))
}

/// Generate one scenario together with its observed data sequence of length
/// 20 N (the first N observations form the training sample).
pub fn gen_scenario(
    kind: ScenarioKind,
    noise: NoiseModel,
    n: usize,
    delta: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(ScenarioSpec, Vec<f64>)> {
    if kind == ScenarioKind::Interior && delta <= 0.2 {
        return Err(RelmonError::Generation(
            "interior scenarios need delta > 0.2".into(),
        ));
    }
    let count = rng.random_range(2..=6usize);
    let locations = draw_locations(n, count, rng)?;
    let jumps: Vec<f64> = match kind {
        ScenarioKind::Interior => {
            (0..count).map(|_| uniform(rng, 0.1, delta - 0.1)).collect()
        }
        ScenarioKind::Boundary => (0..count)
            .map(|_| if rng.random::<bool>() { delta } else { -delta })
            .collect(),
        _ => {
            let (lo, hi) = kind.big_range(delta);
            loop {
                let big: Vec<bool> = (0..count).map(|_| rng.random::<bool>()).collect();
                if !big.iter().any(|&b| b) {
                    continue; // at least one change must exceed the threshold
                }
                break big
                    .into_iter()
                    .map(|b| {
                        if b {
                            uniform(rng, lo, hi)
                        } else {
                            uniform(rng, 0.1, delta - 0.1)
                        }
                    })
                    .collect();
            }
        }
    };
    let horizon_n = 20 * n;
    let spec = ScenarioSpec {
        kind,
        noise,
        n,
        horizon_n,
        change_locations: locations,
        jumps,
        delta,
    };
    let eps = gen_noise(noise, horizon_n, rng);
    let data: Vec<f64> = (1..=horizon_n).map(|i| spec.mean_at(i) + eps[i - 1]).collect();
    Ok((spec, data))
}

/// One cell of the rejection-rate table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableCell {
    pub noise: NoiseModel,
    pub n: usize,
    /// Weight exponent, stored in per-mille to keep the cell hashable;
    /// use [`TableCell::beta`].
    pub beta_millis: u32,
    pub kind: ScenarioKind,
}

impl TableCell {
    pub fn new(noise: NoiseModel, n: usize, beta: f64, kind: ScenarioKind) -> TableCell {
        TableCell {
            noise,
            n,
            beta_millis: (beta * 1000.0).round() as u32,
            kind,
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta_millis as f64 / 1000.0
    }
}

/// Aggregated result of one table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub cell: TableCell,
    pub reps: usize,
    pub rejection_rate: f64,
    /// Mean, over rejecting replications, of the gap between the first
    /// rejection and the first relevant change (monitoring start when the
    /// scenario has none). NaN when nothing rejected.
    pub mean_detection_delay: f64,
}

/// Overrides applied on top of the per-cell default configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableSettings {
    pub delta: f64,
    pub alpha: f64,
    pub mc_reps: usize,
    pub horizon: f64,
    pub master_seed: u64,
    pub cp_budget: f64,
}

impl Default for TableSettings {
    fn default() -> Self {
        TableSettings {
            delta: 1.0,
            alpha: 0.05,
            mc_reps: 100,
            horizon: 20.0,
            master_seed: 0,
            // more liberal than the monitor default: the detector threshold
            // only drives segmentation, while the test level is controlled by
            // the limit quantile; a tight budget starves the power scenarios
            // of change-point records
            cp_budget: 0.1,
        }
    }
}

fn cell_config(cell: &TableCell, s: &TableSettings) -> MonitorConfig {
    let mut cfg = MonitorConfig::new(cell.n, cell.beta(), s.delta);
    cfg.alpha = s.alpha;
    cfg.mc_reps = s.mc_reps;
    cfg.horizon = s.horizon;
    cfg.quantile_mode = QuantileMode::DeltaFree;
    cfg.stop_on_reject = true;
    cfg
}

/// Outcome of a single replication.
#[derive(Debug, Clone, Copy)]
struct RepOutcome {
    rejected: bool,
    delay: f64,
}

fn cell_tag(cell: &TableCell) -> u64 {
    let noise = match cell.noise {
        NoiseModel::Iid => 0u64,
        NoiseModel::Ma => 1,
        NoiseModel::Ar => 2,
    };
    let kind = match cell.kind {
        ScenarioKind::Interior => 0u64,
        ScenarioKind::Boundary => 1,
        ScenarioKind::AltI => 2,
        ScenarioKind::AltII => 3,
        ScenarioKind::AltIII => 4,
    };
    (cell.n as u64) ^ ((cell.beta_millis as u64) << 16) ^ (noise << 28) ^ (kind << 32)
}

fn run_rep(
    cell: &TableCell,
    settings: &TableSettings,
    pivotal: f64,
    rep: usize,
) -> Result<RepOutcome> {
    let rep_seed = settings
        .master_seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(streams::SIMLAB_BASE)
        .wrapping_add(cell_tag(cell) << 16)
        .wrapping_add(rep as u64);
    let mut rng = seeded_rng(rep_seed, 0);
    let (spec, data) = gen_scenario(cell.kind, cell.noise, cell.n, settings.delta, &mut rng)?;
    let mut cfg = cell_config(cell, settings);
    cfg.seed = rep_seed;
    cfg.cp_constant = CpConstant::Pivotal(pivotal);
    let mut mon = Monitor::new(cfg, &data[..cell.n])?;
    for &x in &data[cell.n..] {
        let ev = mon.process_observation(x);
        if ev.rejected {
            let origin = spec.first_relevant_change().unwrap_or(cell.n);
            return Ok(RepOutcome {
                rejected: true,
                delay: ev.k.saturating_sub(origin) as f64,
            });
        }
    }
    Ok(RepOutcome {
        rejected: false,
        delay: f64::NAN,
    })
}

/// Run one cell: seeded replications of the global decision rule in
/// stop-on-first-rejection mode.
pub fn run_cell(cell: &TableCell, reps: usize, settings: &TableSettings) -> Result<TableRow> {
    let mut cfg = cell_config(cell, settings);
    cfg.seed = settings.master_seed;
    let pivotal = cpe::calibrate_pivotal(&cfg, settings.cp_budget)?;
    let outcomes = run_reps(cell, settings, pivotal, reps)?;
    let rejections: Vec<&RepOutcome> = outcomes.iter().filter(|o| o.rejected).collect();
    let rate = rejections.len() as f64 / reps as f64;
    let delay = if rejections.is_empty() {
        f64::NAN
    } else {
        rejections.iter().map(|o| o.delay).sum::<f64>() / rejections.len() as f64
    };
    Ok(TableRow {
        cell: *cell,
        reps,
        rejection_rate: rate,
        mean_detection_delay: delay,
    })
}

#[cfg(feature = "parallel")]
fn run_reps(
    cell: &TableCell,
    settings: &TableSettings,
    pivotal: f64,
    reps: usize,
) -> Result<Vec<RepOutcome>> {
    (0..reps)
        .into_par_iter()
        .map(|rep| run_rep(cell, settings, pivotal, rep))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn run_reps(
    cell: &TableCell,
    settings: &TableSettings,
    pivotal: f64,
    reps: usize,
) -> Result<Vec<RepOutcome>> {
    (0..reps).map(|rep| run_rep(cell, settings, pivotal, rep)).collect()
}

/// Run a list of cells and assemble the rejection-rate table, deterministic
/// given the master seed.
pub fn run_table(
    cells: &[TableCell],
    reps: usize,
    settings: &TableSettings,
) -> Result<Vec<TableRow>> {
    if reps < 1 {
        return Err(RelmonError::Config("reps must be >= 1".into()));
    }
    cells.iter().map(|c| run_cell(c, reps, settings)).collect()
}

/// Render rows as the CSV layout used by the command line.
pub fn table_to_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("noise,N,beta,scenario,reps,rejection_rate,mean_detection_delay\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.4},{:.1}\n",
            r.cell.noise.label(),
            r.cell.n,
            r.cell.beta(),
            r.cell.kind.label(),
            r.reps,
            r.rejection_rate,
            r.mean_detection_delay
        ));
    }
    out
}
