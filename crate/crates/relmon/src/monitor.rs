//! The relevance test: sequential mean estimates, the scaled deviation
//! statistic, the decision rule and the maximal-deviation measure.
//!
//! Per tick the monitor (1) runs the change-point scan, (2) refreshes the
//! cached quantiles from the fixed path ensemble when a detection fired,
//! (3) compares the deviation statistic against the active quantile and
//! (4) reports the maximal threshold that would still be rejected. A
//! rejection does not stop the stream; monitoring continues and the
//! maximal-deviation measure keeps updating.

use serde::{Deserialize, Serialize};

use crate::cpe;
use crate::error::{RelmonError, Result};
use crate::limit_sim::{self, LimitEnsemble};
use crate::stream_core::{
    new_stream, sign_or_plus, CpConstant, DecisionEvent, MonitorConfig, QuantileMode,
    StreamState,
};

/// Benchmark mean together with the running post-change mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiHatView {
    pub train_mean: f64,
    /// Mean over (k_hat, k]; `None` when k = k_hat (no data since the last
    /// detected change).
    pub current_mean: Option<f64>,
    pub k_hat: usize,
}

/// Sequential mean estimate at time k.
pub fn psi_hat(state: &StreamState, k: usize, n: usize) -> PsiHatView {
    if k <= n {
        return PsiHatView {
            train_mean: state.train_mean,
            current_mean: Some(state.train_mean),
            k_hat: n,
        };
    }
    let k_hat = state.k_hat(n);
    let current_mean = if k == k_hat {
        None
    } else {
        Some(state.window_sum(k_hat, k) / (k - k_hat) as f64)
    };
    PsiHatView {
        train_mean: state.train_mean,
        current_mean,
        k_hat,
    }
}

/// Scaled deviation statistic sqrt(N)(k - k_hat)/k (|dev| - delta); affine and
/// strictly decreasing in delta, zero when k = k_hat.
pub fn gamma_stat(state: &StreamState, k: usize, delta: f64, n: usize) -> f64 {
    let view = psi_hat(state, k, n);
    let Some(current) = view.current_mean else {
        return 0.0;
    };
    if k == view.k_hat {
        return 0.0;
    }
    let dev = (view.train_mean - current).abs();
    (n as f64).sqrt() * (k - view.k_hat) as f64 / k as f64 * (dev - delta)
}

/// Closed form of sup{delta >= 0 : gamma_stat(k, delta) > q_tilde}, clamped
/// at 0 for reporting.
pub fn delta_max(state: &StreamState, k: usize, q_tilde: f64, n: usize) -> f64 {
    let view = psi_hat(state, k, n);
    let Some(current) = view.current_mean else {
        return 0.0;
    };
    if k == view.k_hat {
        return 0.0;
    }
    let dev = (view.train_mean - current).abs();
    (dev - q_tilde * k as f64 / ((n as f64).sqrt() * (k - view.k_hat) as f64)).max(0.0)
}

/// Snapshot needed to resume a stream: everything except the path ensemble,
/// which is rebuilt deterministically from the config seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: MonitorConfig,
    pub state: StreamState,
    pub sigma_warning: bool,
    /// Running per-path minima backing the quantiles; must survive a resume
    /// so the continuation is event-identical.
    #[serde(default)]
    pub pivotal_tilde: Vec<f64>,
    #[serde(default)]
    pub pivotal_decision: Vec<f64>,
}

/// Single-writer monitoring engine for one stream.
#[derive(Debug)]
pub struct Monitor {
    config: MonitorConfig,
    state: StreamState,
    ensemble: LimitEnsemble,
    sigma_warning: bool,
    /// Per-path pivotal limit values, kept as a running minimum across
    /// quantile refreshes. Each refresh evaluates the feasible bound on the
    /// same fixed ensemble (common random numbers); since every refresh
    /// yields a valid per-path upper bound, the pathwise minimum is a valid
    /// and nonincreasing bound, making successive quantiles comparable.
    pivotal_tilde: Vec<f64>,
    /// Same running minimum for the threshold-specific decision quantile;
    /// empty in threshold-free mode where it would duplicate `pivotal_tilde`.
    pivotal_decision: Vec<f64>,
}

fn min_in_place(acc: &mut Vec<f64>, fresh: Vec<f64>) {
    if acc.is_empty() {
        *acc = fresh;
    } else {
        for (a, f) in acc.iter_mut().zip(fresh) {
            if f < *a {
                *a = f;
            }
        }
    }
}

impl Monitor {
    /// Build a monitor from a completed training sample: estimates the
    /// long-run variance, resolves the change-point constant and computes the
    /// initial (no-detection) quantiles.
    pub fn new(config: MonitorConfig, training: &[f64]) -> Result<Monitor> {
        let mut state = new_stream(&config, training)?;
        let sigma_hat = state.sigma_hat();
        let sigma_warning = sigma_hat == 0.0;
        state.cp_constant = match config.cp_constant {
            CpConstant::Fixed(c) => c,
            CpConstant::Pivotal(c0) => sigma_hat * c0,
            CpConstant::Auto { budget } => {
                if sigma_warning {
                    0.0
                } else {
                    cpe::calibrate_cp_constant(sigma_hat, &config, budget)?
                }
            }
        };
        let ensemble = limit_sim::build_ensemble(&config)?;
        let mut monitor = Monitor {
            config,
            state,
            ensemble,
            sigma_warning,
            pivotal_tilde: Vec::new(),
            pivotal_decision: Vec::new(),
        };
        monitor.refresh_quantiles();
        Ok(monitor)
    }

    /// Restore a monitor from a checkpoint; the ensemble is regenerated from
    /// the config, so the continuation is identical to an uninterrupted run.
    pub fn from_checkpoint(cp: Checkpoint) -> Result<Monitor> {
        cp.config.validate()?;
        let ensemble = limit_sim::build_ensemble(&cp.config)?;
        Ok(Monitor {
            config: cp.config,
            state: cp.state,
            ensemble,
            sigma_warning: cp.sigma_warning,
            pivotal_tilde: cp.pivotal_tilde,
            pivotal_decision: cp.pivotal_decision,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            state: self.state.clone(),
            sigma_warning: self.sigma_warning,
            pivotal_tilde: self.pivotal_tilde.clone(),
            pivotal_decision: self.pivotal_decision.clone(),
        }
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn state(&self) -> &StreamState {
        &self.state
    }

    pub fn ensemble(&self) -> &LimitEnsemble {
        &self.ensemble
    }

    /// True when the training sample was degenerate (zero variance estimate);
    /// quantiles are then 0 and any nonzero deviation rejects.
    pub fn sigma_warning(&self) -> bool {
        self.sigma_warning
    }

    /// Pivotal per-path limit values (running minima) backing the
    /// threshold-free quantile.
    pub fn pivotal_values_tilde(&self) -> Vec<f64> {
        self.pivotal_tilde.clone()
    }

    fn refresh_quantiles(&mut self) {
        let theta_k = self.state.theta_hat_k(self.ensemble.n);
        let sets = limit_sim::compute_a_tilde(&self.state, &self.config);
        let fresh = limit_sim::evaluate_paths(&self.ensemble, &sets, theta_k);
        min_in_place(&mut self.pivotal_tilde, fresh);
        let sigma = self.state.sigma_hat();
        self.state.q_tilde =
            limit_sim::quantile_from_values(&self.pivotal_tilde, sigma, self.config.alpha);
        self.state.current_quantile = match self.config.quantile_mode {
            QuantileMode::DeltaFree => self.state.q_tilde,
            QuantileMode::DeltaSpecific => {
                let sets = limit_sim::compute_a_hat(&self.state, &self.config);
                let fresh = limit_sim::evaluate_paths(&self.ensemble, &sets, theta_k);
                min_in_place(&mut self.pivotal_decision, fresh);
                limit_sim::quantile_from_values(
                    &self.pivotal_decision,
                    sigma,
                    self.config.alpha,
                )
            }
        };
    }

    /// Advance the stream by one observation.
    pub fn process_observation(&mut self, x: f64) -> DecisionEvent {
        let scan = cpe::scan_step(&mut self.state, x, &self.config);
        if scan.fired {
            // quantiles only change at detection ticks
            self.refresh_quantiles();
        }
        let k = self.state.k;
        let n = self.config.train_size;
        let g = gamma_stat(&self.state, k, self.config.delta, n);
        let rejected = g > self.state.current_quantile;
        let dmax = delta_max(&self.state, k, self.state.q_tilde, n);
        let view = psi_hat(&self.state, k, n);
        let deviation_sign = match view.current_mean {
            Some(m) => sign_or_plus(view.train_mean - m) as i8,
            None => 1,
        };
        DecisionEvent {
            k,
            gamma_stat: g,
            quantile: self.state.current_quantile,
            rejected,
            delta_max: dmax,
            deviation_sign,
            new_detection: scan.fired,
        }
    }
}

/// Serialize a checkpoint as a self-describing JSON document.
pub fn checkpoint_to_json(cp: &Checkpoint) -> Result<String> {
    serde_json::to_string_pretty(cp)
        .map_err(|e| RelmonError::Checkpoint(format!("serialize: {e}")))
}

pub fn checkpoint_from_json(s: &str) -> Result<Checkpoint> {
    serde_json::from_str(s).map_err(|e| RelmonError::Checkpoint(format!("parse: {e}")))
}
