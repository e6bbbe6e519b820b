//! Long-run variance estimation from the training sample.
//!
//! Uses non-overlapping block differencing: adjacent block sums of length
//! m_N ~ N^{1/3} are differenced, squared and averaged. The estimate is
//! frozen after training and never updated during monitoring, so later mean
//! changes cannot contaminate it.

use serde::{Deserialize, Serialize};

use crate::error::{RelmonError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrvEstimate {
    /// Long-run variance estimate (data units squared).
    pub sigma2: f64,
    /// Block length m_N.
    pub block_length: usize,
    /// Number of complete blocks, floor(N / m_N).
    pub n_blocks: usize,
}

/// Block length floor(N^{1/3}), at least 1.
pub fn block_length(n: usize) -> usize {
    // integer cube root; f64 powf alone misrounds exact cubes
    let mut m = (n as f64).powf(1.0 / 3.0).round() as usize;
    while m.pow(3) > n {
        m -= 1;
    }
    while (m + 1).pow(3) <= n {
        m += 1;
    }
    m.max(1)
}

/// Blocked long-run variance estimator over the training sample.
pub fn long_run_variance(training: &[f64]) -> Result<LrvEstimate> {
    let n = training.len();
    let m = block_length(n);
    let n_blocks = n / m;
    if n_blocks < 2 {
        return Err(RelmonError::Estimation(format!(
            "only {n_blocks} block(s) of length {m} fit into N = {n}; a larger training sample is required"
        )));
    }
    let block_sum = |j: usize| -> f64 {
        // sum over indices (j-1)m+1 ..= jm, 1-based
        training[(j - 1) * m..j * m].iter().sum()
    };
    let mut acc = 0.0;
    for j in 1..n_blocks {
        let d = block_sum(j) - block_sum(j + 1);
        acc += d * d / (2.0 * m as f64);
    }
    let sigma2 = acc / (n_blocks - 1) as f64;
    Ok(LrvEstimate {
        sigma2,
        block_length: m,
        n_blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream_core::seeded_rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn block_length_examples() {
        assert_eq!(block_length(27), 3);
        assert_eq!(block_length(7), 1);
        assert_eq!(block_length(1000), 10);
        assert_eq!(block_length(2), 1);
        assert_eq!(block_length(999), 9);
    }

    #[test]
    fn alternating_hand_value() {
        // blocks of length 1: diffs (1, -1, 1), each squared / 2, averaged over 3
        let est = long_run_variance(&[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(est.sigma2, 0.5, epsilon = 1e-15);
        assert_eq!(est.block_length, 1);
        assert_eq!(est.n_blocks, 4);
    }

    #[test]
    fn constant_data_is_zero() {
        let est = long_run_variance(&vec![3.7; 64]).unwrap();
        assert_eq!(est.sigma2, 0.0);
    }

    #[test]
    fn too_few_blocks_is_an_error() {
        // N = 8, m = 2, 4 blocks: fine; N = 2, m = 1, 2 blocks: fine;
        // a case with < 2 blocks needs n/m < 2 which cannot happen for n >= 2,
        // so exercise the empty-ish edge directly.
        assert!(long_run_variance(&[1.0]).is_err());
    }

    #[test]
    fn iid_standard_normal_consistency() {
        // 20-seed average at N = 10_000 should sit near 1
        let mut avg = 0.0;
        for seed in 0..20 {
            let mut rng = seeded_rng(seed, 11);
            let data: Vec<f64> =
                (0..10_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            avg += long_run_variance(&data).unwrap().sigma2;
        }
        avg /= 20.0;
        assert!((0.9..=1.1).contains(&avg), "avg sigma2 = {avg}");
    }

    #[test]
    fn ma_noise_long_run_variance() {
        // eps_i = (eta_i + eta_{i-1}/2)/sqrt(5): long-run variance (1/5)(3/2)^2 = 0.45
        let mut avg = 0.0;
        for seed in 0..20 {
            let mut rng = seeded_rng(seed, 12);
            let eta: Vec<f64> =
                (0..10_001).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let data: Vec<f64> = (1..=10_000)
                .map(|i| (eta[i] + 0.5 * eta[i - 1]) / 5f64.sqrt())
                .collect();
            avg += long_run_variance(&data).unwrap().sigma2;
        }
        avg /= 20.0;
        assert!((0.40..=0.50).contains(&avg), "avg sigma2 = {avg}");
    }

    proptest! {
        #[test]
        fn scale_equivariance(data in prop::collection::vec(-50.0f64..50.0, 8..200), c in -4.0f64..4.0) {
            let base = long_run_variance(&data).unwrap().sigma2;
            let scaled: Vec<f64> = data.iter().map(|x| c * x).collect();
            let got = long_run_variance(&scaled).unwrap().sigma2;
            prop_assert!((got - c * c * base).abs() <= 1e-9 * (1.0 + base.abs() * c * c));
        }

        #[test]
        fn shift_invariance(data in prop::collection::vec(-50.0f64..50.0, 8..200), b in -100.0f64..100.0) {
            let base = long_run_variance(&data).unwrap().sigma2;
            let shifted: Vec<f64> = data.iter().map(|x| x + b).collect();
            let got = long_run_variance(&shifted).unwrap().sigma2;
            prop_assert!((got - base).abs() <= 1e-7 * (1.0 + base.abs() + b.abs()));
        }
    }
}
