//! Mapping score rows onto the probability simplex: softmax and sparsemax.
//!
//! Sparsemax is the Euclidean projection onto the simplex. Sort the scores
//! descending as `z(1) >= ... >= z(K)`, take the largest `k` with
//! `1 + k·z(k) > z(1) + ... + z(k)`, set `tau = (z(1) + ... + z(k) - 1) / k`
//! and output `max(z_i - tau, 0)`. Entries below the threshold come out as
//! exactly `0.0`, which is what makes it usable for channel selection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Which simplex mapping the attention uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalizer {
    Softmax,
    Sparsemax,
}

impl Normalizer {
    pub fn as_str(self) -> &'static str {
        match self {
            Normalizer::Softmax => "softmax",
            Normalizer::Sparsemax => "sparsemax",
        }
    }
}

impl fmt::Display for Normalizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Normalizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Normalizer::Softmax),
            "sparsemax" => Ok(Normalizer::Sparsemax),
            other => Err(Error::Config(format!(
                "unknown normalizer {other:?} (expected softmax or sparsemax)"
            ))),
        }
    }
}

/// Axis of the score matrix that forms one simplex.
///
/// `QueryRows` makes each query row a distribution over channels, which is
/// what `A·V` needs for convex combinations of value rows. `KeyColumns`
/// normalizes each column instead and exists for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormAxis {
    QueryRows,
    KeyColumns,
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Soft threshold `tau(z)` and support size `k(z)`.
pub fn sparsemax_threshold(z: &[f64]) -> (f64, usize) {
    let mut sorted = z.to_vec();
    // stable descending sort
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut support = 0;
    let mut support_sum = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let k = (i + 1) as f64;
        if 1.0 + k * v > cumsum {
            support = i + 1;
            support_sum = cumsum;
        }
    }
    ((support_sum - 1.0) / support as f64, support)
}

pub fn sparsemax(z: &[f64]) -> Vec<f64> {
    if z.is_empty() {
        return Vec::new();
    }
    let (tau, _) = sparsemax_threshold(z);
    z.iter()
        .map(|&v| {
            let p = v - tau;
            if p > 0.0 {
                p
            } else {
                0.0
            }
        })
        .collect()
}

/// Vector-Jacobian product of softmax at output `p` against upstream `v`.
pub fn softmax_vjp(p: &[f64], v: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(v).map(|(a, b)| a * b).sum();
    p.iter().zip(v).map(|(&pi, &vi)| pi * (vi - inner)).collect()
}

/// Vector-Jacobian product of sparsemax at output `p` against upstream `v`.
/// The support is read off the forward output, so ties reuse the forward
/// pass's decision.
pub fn sparsemax_vjp(p: &[f64], v: &[f64]) -> Vec<f64> {
    let (sum, count) = p
        .iter()
        .zip(v)
        .filter(|(&pi, _)| pi > 0.0)
        .fold((0.0, 0usize), |(s, n), (_, &vi)| (s + vi, n + 1));
    let mean = if count > 0 { sum / count as f64 } else { 0.0 };
    p.iter()
        .zip(v)
        .map(|(&pi, &vi)| if pi > 0.0 { vi - mean } else { 0.0 })
        .collect()
}

impl Normalizer {
    pub fn apply(self, z: &[f64]) -> Vec<f64> {
        match self {
            Normalizer::Softmax => softmax(z),
            Normalizer::Sparsemax => sparsemax(z),
        }
    }

    pub fn vjp(self, p: &[f64], v: &[f64]) -> Vec<f64> {
        match self {
            Normalizer::Softmax => softmax_vjp(p, v),
            Normalizer::Sparsemax => sparsemax_vjp(p, v),
        }
    }
}

/// Maps every row of `scores` onto the probability simplex.
pub fn row_normalize(scores: &Matrix, mode: Normalizer) -> Result<Matrix> {
    if !scores.is_finite() {
        return Err(Error::Numeric("row_normalize on non-finite scores".into()));
    }
    let mut out = Matrix::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        let p = mode.apply(scores.row(r));
        out.row_mut(r).copy_from_slice(&p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_pair() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn sparsemax_worked_examples() {
        assert_eq!(sparsemax(&[3.0, 1.0]), vec![1.0, 0.0]);
        let p = sparsemax(&[0.5, 0.1]);
        assert!((p[0] - 0.7).abs() < 1e-12 && (p[1] - 0.3).abs() < 1e-12);
        let third = sparsemax(&[0.0, 0.0, 0.0]);
        assert!(third.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn single_entry_is_one() {
        assert_eq!(sparsemax(&[-42.0]), vec![1.0]);
        assert_eq!(softmax(&[17.0]), vec![1.0]);
    }

    #[test]
    fn sparsemax_zero_is_positive_zero() {
        let p = sparsemax(&[10.0, -10.0]);
        assert_eq!(p[1].to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn softmax_never_zero_on_moderate_scores() {
        let p = softmax(&[30.0, -30.0, 0.0]);
        assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn sparsemax_vjp_matches_finite_differences() {
        let z = [0.9, 0.4, 0.35, -1.0];
        let v = [0.3, -1.2, 0.5, 2.0];
        let g = sparsemax_vjp(&sparsemax(&z), &v);
        let h = 1e-6;
        for i in 0..z.len() {
            let mut zp = z;
            let mut zm = z;
            zp[i] += h;
            zm[i] -= h;
            let fp: f64 = sparsemax(&zp).iter().zip(&v).map(|(a, b)| a * b).sum();
            let fm: f64 = sparsemax(&zm).iter().zip(&v).map(|(a, b)| a * b).sum();
            assert!(((fp - fm) / (2.0 * h) - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_vjp_matches_finite_differences() {
        let z = [0.2, -0.7, 1.3];
        let v = [1.0, 0.5, -2.0];
        let g = softmax_vjp(&softmax(&z), &v);
        let h = 1e-6;
        for i in 0..z.len() {
            let mut zp = z;
            let mut zm = z;
            zp[i] += h;
            zm[i] -= h;
            let fp: f64 = softmax(&zp).iter().zip(&v).map(|(a, b)| a * b).sum();
            let fm: f64 = softmax(&zm).iter().zip(&v).map(|(a, b)| a * b).sum();
            assert!(((fp - fm) / (2.0 * h) - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn parse_modes() {
        assert_eq!("sparsemax".parse::<Normalizer>().unwrap(), Normalizer::Sparsemax);
        assert!("relu".parse::<Normalizer>().is_err());
    }

    fn projection_oracle(z: &[f64]) -> Vec<f64> {
        // KKT enumeration over every nonempty support set
        let k = z.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 1u32..(1 << k) {
            let members: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
            let tau = (members.iter().map(|&i| z[i]).sum::<f64>() - 1.0) / members.len() as f64;
            let p: Vec<f64> = (0..k)
                .map(|i| if mask & (1 << i) != 0 { z[i] - tau } else { 0.0 })
                .collect();
            let feasible = (0..k).all(|i| {
                if mask & (1 << i) != 0 {
                    p[i] >= -1e-12
                } else {
                    z[i] - tau <= 1e-12
                }
            });
            if !feasible {
                continue;
            }
            let dist: f64 = p.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum();
            if best.as_ref().is_none_or(|(d, _)| dist < *d) {
                best = Some((dist, p));
            }
        }
        best.expect("a feasible support always exists").1
    }

    proptest::proptest! {
        #[test]
        fn sparsemax_is_simplex_projection(z in proptest::collection::vec(-3.0f64..3.0, 1..=6)) {
            let fast = sparsemax(&z);
            let oracle = projection_oracle(&z);
            for (a, b) in fast.iter().zip(&oracle) {
                proptest::prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn rows_land_on_simplex(z in proptest::collection::vec(-50.0f64..50.0, 1..=12)) {
            for mode in [Normalizer::Softmax, Normalizer::Sparsemax] {
                let p = mode.apply(&z);
                proptest::prop_assert!(p.iter().all(|&v| v >= 0.0));
                proptest::prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn sparsemax_idempotent(z in proptest::collection::vec(-5.0f64..5.0, 1..=8)) {
            let once = sparsemax(&z);
            let twice = sparsemax(&once);
            for (a, b) in once.iter().zip(&twice) {
                proptest::prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn sparsemax_translation_invariant(z in proptest::collection::vec(-5.0f64..5.0, 1..=8), c in -100.0f64..100.0) {
            let base = sparsemax(&z);
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            for (a, b) in base.iter().zip(&sparsemax(&shifted)) {
                proptest::prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
