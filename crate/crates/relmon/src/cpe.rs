//! Online multiscale change-point estimation.
//!
//! Every tick compares the two adjacent length-h windows ending at the current
//! index, for all admissible widths h, with weights that decay in k so that
//! late false alarms stay rare. A detection resets the admissible range so no
//! window ever looks back across a detected change.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{RelmonError, Result};
use crate::stream_core::{
    seeded_rng, streams, ChangePointRecord, MonitorConfig, StreamState,
};

/// Outcome of one multiscale scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanResult {
    /// Maximal detector value over admissible scales; -inf on an empty range.
    pub max_gamma: f64,
    /// Smallest scale achieving the maximum, when the range is non-empty.
    pub argmax_scale: Option<usize>,
    pub fired: bool,
}

/// Detector weight sqrt(N) / (k^{1-beta} h^beta log(1 + k/N)).
pub fn weight(h: usize, k: usize, n: usize, beta: f64) -> Result<f64> {
    if k <= n {
        return Err(RelmonError::State(format!(
            "weight requested at k = {k} <= N = {n}: monitoring has not begun"
        )));
    }
    let (h, k, n) = (h as f64, k as f64, n as f64);
    Ok(n.sqrt() / (k.powf(1.0 - beta) * h.powf(beta) * (1.0 + k / n).ln()))
}

/// Admissible window widths {1, ..., floor((k - kbar + 1)/2)}; empty when
/// k = kbar.
pub fn admissible_scales(k: usize, kbar: usize) -> Result<std::ops::RangeInclusive<usize>> {
    if k < kbar {
        return Err(RelmonError::State(format!(
            "scan at k = {k} before last detection kbar = {kbar}"
        )));
    }
    Ok(1..=(k - kbar + 1) / 2)
}

/// Weighted absolute difference of the window sums over (k-2h, k-h] and
/// (k-h, k].
pub fn gamma(h: usize, k: usize, state: &StreamState, config: &MonitorConfig) -> Result<f64> {
    let scales = admissible_scales(k, state.kbar)?;
    if !scales.contains(&h) {
        return Err(RelmonError::State(format!(
            "scale h = {h} inadmissible at k = {k}, kbar = {}",
            state.kbar
        )));
    }
    let w = weight(h, k, config.train_size, config.beta)?;
    let left = state.window_sum(k - 2 * h, k - h);
    let right = state.window_sum(k - h, k);
    Ok(w * (left - right).abs())
}

/// Append an observation and scan all admissible scales. On a firing, records
/// the localized change, closes the previous segment (storing its mean over
/// the localized boundaries) and resets the admissible range.
pub fn scan_step(state: &mut StreamState, x_new: f64, config: &MonitorConfig) -> ScanResult {
    state.push(x_new);
    let k = state.k;
    let n = config.train_size;
    debug_assert!(k > n);

    let hmax = (k - state.kbar + 1) / 2;
    let mut max_gamma = f64::NEG_INFINITY;
    let mut argmax: Option<usize> = None;
    for h in 1..=hmax {
        // inline of gamma(): the weight denominators share k, so only the
        // h-dependent parts vary inside the loop
        let w = (n as f64).sqrt()
            / ((k as f64).powf(1.0 - config.beta)
                * (h as f64).powf(config.beta)
                * (1.0 + k as f64 / n as f64).ln());
        let left = state.window_sum(k - 2 * h, k - h);
        let right = state.window_sum(k - h, k);
        let g = w * (left - right).abs();
        // strict > keeps the smallest scale among maximizers
        if g > max_gamma {
            max_gamma = g;
            argmax = Some(h);
        }
    }

    let threshold = state.cp_constant * (n as f64).ln();
    let fired = max_gamma > threshold;
    if fired {
        let h_star = argmax.unwrap();
        let boundary = k - h_star;
        let prev_boundary = state.k_hat(n);
        let width = boundary - prev_boundary;
        let seg_mean = if width == 0 {
            // zero-length segment (detection at theta = 1 with h = 1)
            state.train_mean
        } else {
            state.window_sum(prev_boundary, boundary) / width as f64
        };
        state.segment_means.push(seg_mean);
        state.records.push(ChangePointRecord {
            theta_hat: boundary as f64 / n as f64,
            detect_time: k,
            scale: h_star,
        });
        state.kbar = k;
    }
    ScanResult {
        max_gamma,
        argmax_scale: argmax,
        fired,
    }
}

/// Pivotal calibration constant c0 such that the effective change-point
/// constant for noise level sigma is sigma * c0.
///
/// c0 * log N is the (1 - budget) empirical quantile, across simulated
/// standard-normal partial-sum paths, of the maximal weighted window
/// difference over the full admissible lattice k <= H*N (with kbar = N).
pub fn calibrate_pivotal(config: &MonitorConfig, budget: f64) -> Result<f64> {
    if !(budget > 0.0 && budget < 1.0) {
        return Err(RelmonError::Calibration(format!(
            "false-detection budget must lie in (0,1), got {budget}"
        )));
    }
    let reps = config.mc_reps;
    let maxima = path_maxima(config, reps);
    let mut sorted = maxima;
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = (((1.0 - budget) * reps as f64).ceil() as usize).clamp(1, reps);
    Ok(sorted[idx - 1] / (config.train_size as f64).ln())
}

fn null_scan_max(config: &MonitorConfig, path_idx: usize) -> f64 {
    let n = config.train_size;
    let len = (config.horizon * n as f64).round() as usize;
    let mut rng = seeded_rng(config.seed, streams::CALIBRATION_BASE + path_idx as u64);
    let mut prefix = Vec::with_capacity(len + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for _ in 0..len {
        acc += rng.sample::<f64, _>(StandardNormal);
        prefix.push(acc);
    }
    let mut best = f64::NEG_INFINITY;
    for k in (n + 1)..=len {
        let kf = k as f64;
        let wk = (n as f64).sqrt() / (kf.powf(1.0 - config.beta) * (1.0 + kf / n as f64).ln());
        for h in 1..=(k - n + 1) / 2 {
            let diff = (prefix[k - h] - prefix[k - 2 * h]) - (prefix[k] - prefix[k - h]);
            let g = wk / (h as f64).powf(config.beta) * diff.abs();
            if g > best {
                best = g;
            }
        }
    }
    best
}

#[cfg(feature = "parallel")]
fn path_maxima(config: &MonitorConfig, reps: usize) -> Vec<f64> {
    (0..reps)
        .into_par_iter()
        .map(|i| null_scan_max(config, i))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn path_maxima(config: &MonitorConfig, reps: usize) -> Vec<f64> {
    (0..reps).map(|i| null_scan_max(config, i)).collect()
}

/// Sequential calibration path, kept for benchmarking against the parallel
/// default.
pub fn calibrate_pivotal_seq(config: &MonitorConfig, budget: f64) -> Result<f64> {
    let reps = config.mc_reps;
    let mut sorted: Vec<f64> = (0..reps).map(|i| null_scan_max(config, i)).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if !(budget > 0.0 && budget < 1.0) {
        return Err(RelmonError::Calibration(format!(
            "false-detection budget must lie in (0,1), got {budget}"
        )));
    }
    let idx = (((1.0 - budget) * reps as f64).ceil() as usize).clamp(1, reps);
    Ok(sorted[idx - 1] / (config.train_size as f64).ln())
}

/// Calibrated change-point constant for the given noise scale.
pub fn calibrate_cp_constant(
    sigma_hat: f64,
    config: &MonitorConfig,
    budget: f64,
) -> Result<f64> {
    if !sigma_hat.is_finite() {
        return Err(RelmonError::Calibration(format!(
            "non-finite sigma_hat = {sigma_hat}"
        )));
    }
    Ok(sigma_hat * calibrate_pivotal(config, budget)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream_core::{new_stream, seeded_rng};
    use approx::assert_abs_diff_eq;

    fn config(n: usize, beta: f64) -> MonitorConfig {
        MonitorConfig::new(n, beta, 1.0)
    }

    #[test]
    fn weight_closed_formula() {
        let w = weight(50, 200, 100, 0.3).unwrap();
        assert_abs_diff_eq!(w, 0.06899, epsilon = 1e-4);
    }

    #[test]
    fn weight_h_dependence() {
        let w1 = weight(1, 200, 100, 0.3).unwrap();
        let w2 = weight(2, 200, 100, 0.3).unwrap();
        assert_abs_diff_eq!(w1 / w2, 2f64.powf(0.3), epsilon = 1e-12);
    }

    #[test]
    fn weight_n_scaling_at_fixed_rescaled_time() {
        // fixed k/N = 2, fixed h = 10
        let w100 = weight(10, 200, 100, 0.3).unwrap();
        let w400 = weight(10, 800, 400, 0.3).unwrap();
        let predicted = (400f64.sqrt() * 800f64.powf(-0.7)) / (100f64.sqrt() * 200f64.powf(-0.7));
        assert_abs_diff_eq!(w400 / w100, predicted, epsilon = 1e-12);
    }

    #[test]
    fn weight_before_monitoring_is_error() {
        assert!(weight(1, 100, 100, 0.3).is_err());
    }

    #[test]
    fn admissible_scales_examples() {
        assert_eq!(admissible_scales(107, 100).unwrap(), 1..=4);
        assert!(admissible_scales(100, 100).unwrap().is_empty());
        let r = admissible_scales(100 + 2 * 7, 100).unwrap();
        assert_eq!(*r.end(), 7);
        assert!(admissible_scales(99, 100).is_err());
    }

    #[test]
    fn gamma_constant_data_is_zero() {
        let cfg = config(10, 0.3);
        let mut s = new_stream(&cfg, &vec![5.0; 10]).unwrap();
        for _ in 0..10 {
            s.push(5.0);
        }
        for h in 1..=5 {
            assert_eq!(gamma(h, 20, &s, &cfg).unwrap(), 0.0);
        }
    }

    #[test]
    fn gamma_noiseless_step() {
        // 0 for n <= 150, 1 afterwards; k = 160, h = 10 puts the step at k - h
        let cfg = config(100, 0.3);
        let mut s = new_stream(&cfg, &vec![0.0; 100]).unwrap();
        for i in 101..=160 {
            s.push(if i > 150 { 1.0 } else { 0.0 });
        }
        let g = gamma(10, 160, &s, &cfg).unwrap();
        let expected = 10.0 * 100f64.sqrt()
            / (160f64.powf(0.7) * 10f64.powf(0.3) * (1.0 + 1.6f64).ln());
        assert_abs_diff_eq!(g, expected, epsilon = 1e-12);
        // brute-force window sums agree
        let brute: f64 = {
            let data: Vec<f64> = (1..=160).map(|i| if i > 150 { 1.0 } else { 0.0 }).collect();
            let left: f64 = data[140..150].iter().sum();
            let right: f64 = data[150..160].iter().sum();
            weight(10, 160, 100, 0.3).unwrap() * (left - right).abs()
        };
        assert_abs_diff_eq!(g, brute, epsilon = 1e-12);
        assert!(gamma(40, 160, &s, &cfg).is_err());
    }

    #[test]
    fn calibration_linear_in_sigma_and_monotone_in_budget() {
        let mut cfg = config(50, 0.3);
        cfg.mc_reps = 40;
        cfg.horizon = 4.0;
        cfg.seed = 9;
        let c1 = calibrate_cp_constant(1.0, &cfg, 0.05).unwrap();
        let c2 = calibrate_cp_constant(2.0, &cfg, 0.05).unwrap();
        assert_abs_diff_eq!(c2, 2.0 * c1, epsilon = 1e-12);
        let strict = calibrate_cp_constant(1.0, &cfg, 0.01).unwrap();
        let loose = calibrate_cp_constant(1.0, &cfg, 0.10).unwrap();
        assert!(strict >= loose);
        assert!(calibrate_cp_constant(f64::NAN, &cfg, 0.05).is_err());
    }

    fn run_noiseless(cfg: &MonitorConfig, data: &[f64]) -> StreamState {
        let mut s = new_stream(cfg, &data[..cfg.train_size]).unwrap();
        s.cp_constant = 1e-9;
        for &x in &data[cfg.train_size..] {
            scan_step(&mut s, x, cfg);
        }
        s
    }

    #[test]
    fn noiseless_single_jump_localized() {
        let n = 100;
        let cfg = config(n, 0.3);
        let data: Vec<f64> = (1..=4 * n).map(|i| if i > 2 * n { 1.0 } else { 0.0 }).collect();
        let s = run_noiseless(&cfg, &data);
        assert_eq!(s.records.len(), 1);
        assert!((s.records[0].theta_hat - 2.0).abs() <= 2.0 / n as f64);
        // brute-force gamma surface on the noiseless path peaks at the jump
        assert_eq!(s.records[0].boundary(), 2 * n);
    }

    #[test]
    fn noiseless_two_jumps_detected_in_order() {
        let n = 100;
        let cfg = config(n, 0.3);
        let data: Vec<f64> = (1..=6 * n)
            .map(|i| {
                if i > 400 {
                    3.0
                } else if i > 250 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let s = run_noiseless(&cfg, &data);
        assert_eq!(s.records.len(), 2);
        assert!(s.records[0].theta_hat < s.records[1].theta_hat);
        assert!((s.records[0].theta_hat - 2.5).abs() <= 0.01);
        assert!((s.records[1].theta_hat - 4.0).abs() <= 0.01);
        // segment mean of the closed middle segment
        assert_abs_diff_eq!(s.segment_means[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn online_offline_prefix_agreement() {
        // rerunning on any prefix yields a prefix of the record list
        let n = 50;
        let cfg = config(n, 0.3);
        let mut rng = seeded_rng(3, 77);
        let data: Vec<f64> = (1..=8 * n)
            .map(|i| {
                let level = if i > 300 { 2.0 } else if i > 150 { -1.5 } else { 0.0 };
                level + 0.3 * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let mut full = new_stream(&cfg, &data[..n]).unwrap();
        full.cp_constant = 0.5;
        for &x in &data[n..] {
            scan_step(&mut full, x, &cfg);
        }
        let mut partial = new_stream(&cfg, &data[..n]).unwrap();
        partial.cp_constant = 0.5;
        for &x in &data[n..5 * n] {
            scan_step(&mut partial, x, &cfg);
        }
        assert!(partial.records.len() <= full.records.len());
        assert_eq!(
            &full.records[..partial.records.len()],
            partial.records.as_slice()
        );
    }

}
