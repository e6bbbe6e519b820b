//! Monte-Carlo engine for the feasible limit functional and its quantiles.
//!
//! A fixed ensemble of standard Brownian paths on the grid {j/N} is generated
//! once per run and reused verbatim at every quantile recomputation (common
//! random numbers). For each path the functional is the max of a signed
//! supremum over closed boundary-sized segments and an absolute supremum over
//! the worst-case unobserved future; both are pivotal (unit variance) and the
//! final quantile is rescaled by the estimated noise level.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{RelmonError, Result};
use crate::stream_core::{
    seeded_rng, sign_or_plus, streams, MonitorConfig, StreamState,
};

/// Guard against accidentally huge ensembles (total f64 count).
pub const ENSEMBLE_BUDGET: usize = 200_000_000;

/// Fixed set of simulated standard Brownian paths on the grid
/// {j/N : j = 0, ..., H*N}.
#[derive(Debug, Clone)]
pub struct LimitEnsemble {
    pub paths: Vec<Vec<f64>>,
    /// Grid resolution: step 1/N.
    pub n: usize,
    pub horizon: f64,
}

impl LimitEnsemble {
    pub fn grid_len(&self) -> usize {
        self.paths[0].len()
    }
}

/// One closed segment eligible for the relevance sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevantSegment {
    /// Segment index (0 = the monitoring stretch before the first detection).
    pub index: usize,
    /// Rescaled lower boundary, clamped at 1 (monitoring start).
    pub lo: f64,
    /// Rescaled upper boundary.
    pub hi: f64,
    /// Sign of (train mean - segment mean); +1 at ties.
    pub sign: f64,
}

/// Estimated set of past changes at (or near) the relevance boundary.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RelevanceSets {
    pub entries: Vec<RelevantSegment>,
}

impl RelevanceSets {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }
}

/// Generate the path ensemble, deterministic given the config seed.
pub fn build_ensemble(config: &MonitorConfig) -> Result<LimitEnsemble> {
    let n = config.train_size;
    let grid_len = (config.horizon * n as f64).round() as usize + 1;
    if config.mc_reps.saturating_mul(grid_len) > ENSEMBLE_BUDGET {
        return Err(RelmonError::Config(format!(
            "ensemble of {} paths x {} grid points exceeds the memory budget; \
             reduce mc_reps or the horizon",
            config.mc_reps, grid_len
        )));
    }
    let generate = |i: usize| -> Vec<f64> {
        let mut rng = seeded_rng(config.seed, streams::ENSEMBLE_BASE + i as u64);
        let sd = (1.0 / n as f64).sqrt();
        let mut path = Vec::with_capacity(grid_len);
        let mut acc = 0.0;
        path.push(0.0);
        for _ in 1..grid_len {
            acc += sd * rng.sample::<f64, _>(StandardNormal);
            path.push(acc);
        }
        path
    };
    #[cfg(feature = "parallel")]
    let paths: Vec<Vec<f64>> = (0..config.mc_reps).into_par_iter().map(generate).collect();
    #[cfg(not(feature = "parallel"))]
    let paths: Vec<Vec<f64>> = (0..config.mc_reps).map(generate).collect();
    Ok(LimitEnsemble {
        paths,
        n,
        horizon: config.horizon,
    })
}

/// Closed segments whose following segment is also closed, with boundaries,
/// deviation from the benchmark and sign. Segment i spans
/// (boundary_i, boundary_{i+1}] with boundary_0 = N.
fn eligible_segments(state: &StreamState, n: usize) -> Vec<(RelevantSegment, f64)> {
    let m = state.records.len();
    if m < 2 {
        return Vec::new();
    }
    let boundary = |i: usize| -> f64 {
        if i == 0 {
            1.0
        } else {
            (state.records[i - 1].boundary() as f64 / n as f64).max(1.0)
        }
    };
    (0..=m - 2)
        .map(|i| {
            let diff = state.train_mean - state.segment_means[i];
            (
                RelevantSegment {
                    index: i,
                    lo: boundary(i),
                    hi: boundary(i + 1),
                    sign: sign_or_plus(diff),
                },
                diff.abs(),
            )
        })
        .collect()
}

/// Threshold-specific relevance set: closed segments deviating by more than
/// delta - log(N)/sqrt(N).
pub fn compute_a_hat(state: &StreamState, config: &MonitorConfig) -> RelevanceSets {
    let n = config.train_size;
    let slack = (n as f64).ln() / (n as f64).sqrt();
    let entries = eligible_segments(state, n)
        .into_iter()
        .filter(|(_, dev)| *dev > config.delta - slack)
        .map(|(e, _)| e)
        .collect();
    RelevanceSets { entries }
}

/// Threshold-free relevance set: closed segments within log(N)/sqrt(N) of the
/// maximal observed deviation.
pub fn compute_a_tilde(state: &StreamState, config: &MonitorConfig) -> RelevanceSets {
    let n = config.train_size;
    let slack = (n as f64).ln() / (n as f64).sqrt();
    let segs = eligible_segments(state, n);
    let max_dev = segs.iter().map(|(_, d)| *d).fold(f64::NEG_INFINITY, f64::max);
    let entries = segs
        .into_iter()
        .filter(|(_, dev)| *dev >= max_dev - slack)
        .map(|(e, _)| e)
        .collect();
    RelevanceSets { entries }
}

/// Signed supremum over the closed boundary-sized segments; -inf on an empty
/// set.
pub fn l_hat_one(path: &[f64], n: usize, sets: &RelevanceSets) -> f64 {
    let nf = n as f64;
    let b1 = path[n];
    let mut best = f64::NEG_INFINITY;
    for e in &sets.entries {
        let j_lo = (e.lo * nf).round() as usize;
        let j_hi = ((e.hi * nf).round() as usize).min(path.len() - 1);
        let b_lo = path[j_lo];
        for j in j_lo..=j_hi {
            let x = j as f64 / nf;
            let v = e.sign * ((x - e.lo) * b1 - (path[j] - b_lo)) / x;
            if v > best {
                best = v;
            }
        }
    }
    best
}

/// Absolute supremum over the worst-case future: sup over grid
/// x in [theta_k, H], theta in [theta_k, x] of
/// |(x - theta) B(1) - B(x) + B(theta)| / x.
///
/// Computed in one pass via (x - theta)B(1) - B(x) + B(theta) = a(x) - a(theta)
/// with a(t) = t B(1) - B(t), keeping running extrema of a.
pub fn l_hat_two(path: &[f64], n: usize, theta_k: f64) -> f64 {
    let nf = n as f64;
    let b1 = path[n];
    let j0 = (theta_k * nf).round() as usize;
    let j_end = path.len() - 1;
    if j0 >= j_end {
        return 0.0;
    }
    let a = |j: usize| (j as f64 / nf) * b1 - path[j];
    let mut a_min = a(j0);
    let mut a_max = a_min;
    let mut best = 0.0f64;
    for j in j0..=j_end {
        let aj = a(j);
        if aj < a_min {
            a_min = aj;
        }
        if aj > a_max {
            a_max = aj;
        }
        let x = j as f64 / nf;
        let v = (aj - a_min).max(a_max - aj) / x;
        if v > best {
            best = v;
        }
    }
    best
}

/// Brute-force double loop over all grid pairs; oracle for [`l_hat_two`].
pub fn l_hat_two_naive(path: &[f64], n: usize, theta_k: f64) -> f64 {
    let nf = n as f64;
    let b1 = path[n];
    let j0 = (theta_k * nf).round() as usize;
    let j_end = path.len() - 1;
    if j0 >= j_end {
        return 0.0;
    }
    let mut best = 0.0f64;
    for jx in j0..=j_end {
        let x = jx as f64 / nf;
        for jt in j0..=jx {
            let theta = jt as f64 / nf;
            let v = ((x - theta) * b1 - (path[jx] - path[jt])).abs() / x;
            if v > best {
                best = v;
            }
        }
    }
    best
}

fn eval_path(path: &[f64], n: usize, sets: &RelevanceSets, theta_k: f64) -> f64 {
    l_hat_one(path, n, sets).max(l_hat_two(path, n, theta_k))
}

/// Pivotal per-path limit values for the current state of the relevance sets.
pub fn evaluate_paths(ensemble: &LimitEnsemble, sets: &RelevanceSets, theta_k: f64) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        ensemble
            .paths
            .par_iter()
            .map(|p| eval_path(p, ensemble.n, sets, theta_k))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        evaluate_paths_seq(ensemble, sets, theta_k)
    }
}

/// Sequential evaluation, kept for benchmarking against the parallel default.
pub fn evaluate_paths_seq(
    ensemble: &LimitEnsemble,
    sets: &RelevanceSets,
    theta_k: f64,
) -> Vec<f64> {
    ensemble
        .paths
        .iter()
        .map(|p| eval_path(p, ensemble.n, sets, theta_k))
        .collect()
}

/// Conservative empirical quantile: the ceil((1 - alpha) R)-th smallest value,
/// no interpolation, rescaled by sigma_hat.
pub fn quantile_from_values(values: &[f64], sigma_hat: f64, alpha: f64) -> f64 {
    let r = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = (((1.0 - alpha) * r as f64).ceil() as usize).clamp(1, r);
    sigma_hat * sorted[idx - 1]
}

/// Quantile of the feasible limit law for the given relevance sets,
/// cache-free; callers cache until the next detection.
pub fn quantile(
    state: &StreamState,
    ensemble: &LimitEnsemble,
    sets: &RelevanceSets,
    alpha: f64,
) -> f64 {
    let theta_k = state.theta_hat_k(ensemble.n);
    let values = evaluate_paths(ensemble, sets, theta_k);
    quantile_from_values(&values, state.sigma_hat(), alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream_core::{new_stream, ChangePointRecord};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn test_config(n: usize, reps: usize, horizon: f64) -> MonitorConfig {
        let mut cfg = MonitorConfig::new(n, 0.3, 1.0);
        cfg.mc_reps = reps;
        cfg.horizon = horizon;
        cfg.seed = 42;
        cfg
    }

    /// Build a state with the given detected boundaries (indices) and closed
    /// segment means; observation values themselves are irrelevant here.
    fn state_with_segments(n: usize, boundaries: &[usize], means: &[f64]) -> StreamState {
        let cfg = test_config(n, 4, 20.0);
        let mut s = new_stream(&cfg, &vec![0.0; n]).unwrap();
        for &b in boundaries {
            s.records.push(ChangePointRecord {
                theta_hat: b as f64 / n as f64,
                detect_time: b + 1,
                scale: 1,
            });
        }
        // segment_means entries align with records
        s.segment_means = means.to_vec();
        s
    }

    #[test]
    fn ensemble_basics() {
        let cfg = test_config(100, 4000, 3.0);
        let ens = build_ensemble(&cfg).unwrap();
        assert_eq!(ens.paths.len(), 4000);
        assert_eq!(ens.grid_len(), 301);
        for p in &ens.paths {
            assert_eq!(p[0], 0.0);
        }
        // Var B(1) = 1
        let var1: f64 =
            ens.paths.iter().map(|p| p[100] * p[100]).sum::<f64>() / 4000.0;
        assert!((var1 - 1.0).abs() < 0.05, "var B(1) = {var1}");
        // Cov(B(1), B(2)) = 1
        let cov: f64 = ens.paths.iter().map(|p| p[100] * p[200]).sum::<f64>() / 4000.0;
        assert!((cov - 1.0).abs() < 0.08, "cov = {cov}");
    }

    #[test]
    fn ensemble_budget_guard() {
        let mut cfg = test_config(100, 1_000_000, 20_000.0);
        cfg.mc_reps = 1_000_000;
        assert!(build_ensemble(&cfg).is_err());
    }

    #[test]
    fn a_hat_empty_without_detections() {
        let cfg = test_config(100, 4, 20.0);
        let s = new_stream(&cfg, &vec![0.0; 100]).unwrap();
        assert!(compute_a_hat(&s, &cfg).is_empty());
        assert!(compute_a_tilde(&s, &cfg).is_empty());
    }

    #[test]
    fn a_hat_threshold_comparisons() {
        let n = 100;
        let cfg = test_config(n, 4, 20.0);
        // two closed segments requires three detections
        let s = state_with_segments(n, &[200, 320, 440], &[-1.5, 0.0, 9.9]);
        // deviations (1.5, 0.0) for eligible segments 0 and 1; delta = 1
        let sets = compute_a_hat(&s, &cfg);
        assert_eq!(sets.indices(), vec![0]);
        assert_eq!(sets.entries[0].sign, 1.0);
        assert_abs_diff_eq!(sets.entries[0].lo, 1.0);
        assert_abs_diff_eq!(sets.entries[0].hi, 2.0);

        // deviations (0.8, 0.5): 0.8 > 1 - 0.4605, 0.5 < 0.5395
        let s = state_with_segments(n, &[200, 320, 440], &[0.8, 0.5, 9.9]);
        let sets = compute_a_hat(&s, &cfg);
        assert_eq!(sets.indices(), vec![0]);
        assert_eq!(sets.entries[0].sign, -1.0);
    }

    #[test]
    fn a_tilde_running_max() {
        let n = 100;
        let cfg = test_config(n, 4, 20.0);
        let s = state_with_segments(n, &[200, 320, 440], &[0.8, 0.5, 9.9]);
        // both within log(100)/10 = 0.4605 of the max deviation 0.8
        assert_eq!(compute_a_tilde(&s, &cfg).indices(), vec![0, 1]);

        let s = state_with_segments(n, &[200, 320], &[0.8, 9.9]);
        assert_eq!(compute_a_tilde(&s, &cfg).indices(), vec![0]);

        let n = 10_000;
        let cfg = test_config(n, 4, 20.0);
        let s = state_with_segments(n, &[20_000, 32_000, 44_000], &[2.0, 0.3, 9.9]);
        // log(10^4)/100 = 0.0921: only the maximal segment survives
        assert_eq!(compute_a_tilde(&s, &cfg).indices(), vec![0]);
    }

    #[test]
    fn l_hat_one_hand_values() {
        let n = 10;
        // grid on [0, 3]
        let zero = vec![0.0; 31];
        let empty = RelevanceSets::default();
        assert_eq!(l_hat_one(&zero, n, &empty), f64::NEG_INFINITY);
        let seg = RelevanceSets {
            entries: vec![RelevantSegment {
                index: 0,
                lo: 1.0,
                hi: 2.0,
                sign: 1.0,
            }],
        };
        assert_eq!(l_hat_one(&zero, n, &seg), 0.0);

        // path rising to B(1) = 1 then dropping to 0 on (1, 2]:
        // sup over x in (1, 2] of ((x - 1) + 1)/x = 1
        let mut path = vec![0.0; 31];
        for j in 0..=10 {
            path[j] = j as f64 / 10.0;
        }
        for j in 11..=20 {
            path[j] = 0.0;
        }
        assert_abs_diff_eq!(l_hat_one(&path, n, &seg), 1.0, epsilon = 1e-12);

        // path rising to B(1) = 1 then flat: increment vanishes on [1, 2],
        // sup over x of (x - 1)/x = 1/2 at x = 2
        let mut flat = vec![0.0; 31];
        for j in 0..=10 {
            flat[j] = j as f64 / 10.0;
        }
        for j in 11..=30 {
            flat[j] = 1.0;
        }
        // B(x) - B(1) = 0 on [1,2]: sup (x-1)/x = 1/2 at x = 2
        assert_abs_diff_eq!(l_hat_one(&flat, n, &seg), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn l_hat_two_degenerate_cases() {
        let n = 10;
        let zero = vec![0.0; 31];
        assert_eq!(l_hat_two(&zero, n, 1.0), 0.0);
        // theta_k at the grid end: empty future domain
        assert_eq!(l_hat_two(&zero, n, 3.0), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn prefix_trick_equals_brute_force(seed in 0u64..1000) {
            let n = 20;
            let mut cfg = test_config(n, 1, 4.0);
            cfg.seed = seed;
            let ens = build_ensemble(&cfg).unwrap();
            let path = &ens.paths[0];
            for theta_k in [1.0, 1.5, 2.0, 3.95] {
                let fast = l_hat_two(path, n, theta_k);
                let naive = l_hat_two_naive(path, n, theta_k);
                prop_assert!((fast - naive).abs() < 1e-12, "fast {fast} naive {naive}");
            }
        }
    }

    #[test]
    fn quantile_scaling_and_order_statistic() {
        let values = vec![0.5, 2.0, 1.0, 3.0];
        let q = quantile_from_values(&values, 1.0, 0.25);
        // ceil(0.75 * 4) = 3rd smallest = 2.0
        assert_eq!(q, 2.0);
        assert_eq!(quantile_from_values(&values, 2.0, 0.25), 4.0);
        // alpha -> 1: order-statistic floor is the minimum
        assert_eq!(quantile_from_values(&values, 1.5, 1.0), 0.75);
    }

    #[test]
    fn quantile_self_consistency_across_ensembles() {
        // no detections, N = 100, alpha = 0.05: two independent ensembles agree
        let n = 100;
        let mut q = [0.0f64; 2];
        for (i, seed) in [41u64, 4242].into_iter().enumerate() {
            let mut cfg = test_config(n, 4000, 20.0);
            cfg.seed = seed;
            let ens = build_ensemble(&cfg).unwrap();
            let vals = evaluate_paths(&ens, &RelevanceSets::default(), 1.0);
            q[i] = quantile_from_values(&vals, 1.0, 0.05);
        }
        assert!((q[0] - q[1]).abs() < 0.05, "q = {q:?}");
    }

    #[test]
    fn parallel_matches_sequential() {
        let cfg = test_config(50, 64, 5.0);
        let ens = build_ensemble(&cfg).unwrap();
        let sets = RelevanceSets {
            entries: vec![RelevantSegment { index: 0, lo: 1.0, hi: 2.0, sign: -1.0 }],
        };
        assert_eq!(
            evaluate_paths(&ens, &sets, 2.0),
            evaluate_paths_seq(&ens, &sets, 2.0)
        );
    }
}
