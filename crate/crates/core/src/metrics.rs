//! Fairness and quality metrics: Jain's index, the Gini coefficient,
//! perplexity from a mean negative log-likelihood, and the dB-domain average
//! SNR used in the round summaries.

use crate::error::{Error, Result};
use crate::scalar::{count, real, Scalar};
use serde::{Deserialize, Serialize};

/// Jain's fairness index `(sum x)^2 / (U * sum x^2)` over nonnegative
/// selection shares. Equals 1 on uniform shares and `1/U` on a one-hot
/// vector.
pub fn jain_index<T: Scalar>(shares: &[T]) -> Result<T> {
    check_shares(shares)?;
    let s: T = shares.iter().copied().sum();
    let sq: T = shares.iter().map(|&x| x * x).sum();
    if sq == T::zero() {
        return Err(Error::domain("Jain index undefined for all-zero shares"));
    }
    Ok(s * s / (count::<T>(shares.len()) * sq))
}

/// Gini coefficient `sum_{u,v} |x_u - x_v| / (2 U sum x)`. Equals 0 on
/// uniform shares and `(U-1)/U` on a one-hot vector.
pub fn gini_coefficient<T: Scalar>(shares: &[T]) -> Result<T> {
    check_shares(shares)?;
    let total: T = shares.iter().copied().sum();
    if total == T::zero() {
        return Err(Error::domain("Gini coefficient undefined for all-zero shares"));
    }
    let mut acc = T::zero();
    for &a in shares {
        for &b in shares {
            acc += (a - b).abs();
        }
    }
    Ok(acc / (real::<T>(2.0) * count::<T>(shares.len()) * total))
}

fn check_shares<T: Scalar>(shares: &[T]) -> Result<()> {
    if shares.is_empty() {
        return Err(Error::dimension("metrics need at least one share"));
    }
    for &x in shares {
        if !x.is_finite() || x < T::zero() {
            return Err(Error::domain("shares must be finite and nonnegative"));
        }
    }
    Ok(())
}

/// Perplexity `exp(mean_nll)`. Overflows to `+inf` for very large losses.
pub fn perplexity<T: Scalar>(mean_nll: T) -> Result<T> {
    if !mean_nll.is_finite() {
        return Err(Error::numeric("mean NLL must be finite"));
    }
    Ok(mean_nll.exp())
}

/// Mean of per-round SNRs expressed in dB: `mean_n 10 log10(snr_n)`. This is
/// the dB-domain mean, not the dB of the mean; `{1, 100}` averages to 10 dB.
pub fn avg_snr_db<T: Scalar>(snrs_linear: &[T]) -> Result<T> {
    if snrs_linear.is_empty() {
        return Err(Error::dimension("average SNR needs at least one sample"));
    }
    let mut acc = T::zero();
    for &s in snrs_linear {
        if !(s > T::zero()) || !s.is_finite() {
            return Err(Error::domain("SNR samples must be strictly positive"));
        }
        acc += real::<T>(10.0) * s.log10();
    }
    Ok(acc / count::<T>(snrs_linear.len()))
}

/// Snapshot of the headline metrics at a given round horizon.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub jain: f64,
    pub gini: f64,
    pub perplexity: f64,
    pub avg_snr_db: f64,
    pub round_horizon: u64,
}

impl MetricRecord {
    /// Range checks the record against the number of users it summarizes.
    pub fn validate(&self, num_users: usize) -> Result<()> {
        let low = 1.0 / num_users as f64;
        if !(self.jain >= low - 1e-12 && self.jain <= 1.0 + 1e-12) {
            return Err(Error::domain(format!("jain {} outside [1/U, 1]", self.jain)));
        }
        if !(self.gini >= -1e-12 && self.gini <= 1.0) {
            return Err(Error::domain(format!("gini {} outside [0, 1)", self.gini)));
        }
        // perplexity below 1 means a negative mean NLL, which is legal for
        // dense synthetic losses; only nonpositive or NaN values are invalid.
        if !(self.perplexity > 0.0) {
            return Err(Error::domain("perplexity must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn one_hot_identities() {
        let one_hot = [0.0, 0.0, 1.0, 0.0];
        assert_relative_eq!(jain_index(&one_hot).unwrap(), 0.25, epsilon = 1e-15);
        assert_relative_eq!(gini_coefficient(&one_hot).unwrap(), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn uniform_identities() {
        let uniform = [0.2; 5];
        assert_relative_eq!(jain_index(&uniform).unwrap(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(gini_coefficient(&uniform).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn perplexity_identities() {
        assert_relative_eq!(perplexity(0.0).unwrap(), 1.0);
        assert_relative_eq!(perplexity(std::f64::consts::LN_2).unwrap(), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn snr_average_is_db_domain() {
        assert_relative_eq!(avg_snr_db(&[1.0, 100.0]).unwrap(), 10.0, epsilon = 1e-12);
        assert!(avg_snr_db(&[1.0, 0.0]).is_err());
        assert!(avg_snr_db(&[1.0, -2.0]).is_err());
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(jain_index::<f64>(&[]).is_err());
        assert!(jain_index(&[0.0, 0.0]).is_err());
        assert!(gini_coefficient(&[0.0, 0.0]).is_err());
        assert!(jain_index(&[1.0, -0.1]).is_err());
    }

    proptest! {
        #[test]
        fn jain_and_gini_are_scale_and_permutation_invariant(
            mut xs in proptest::collection::vec(0.01f64..10.0, 2..12),
            scale in 0.1f64..50.0,
        ) {
            let j0 = jain_index(&xs).unwrap();
            let g0 = gini_coefficient(&xs).unwrap();
            let scaled: Vec<f64> = xs.iter().map(|x| x * scale).collect();
            prop_assert!((jain_index(&scaled).unwrap() - j0).abs() < 1e-9);
            prop_assert!((gini_coefficient(&scaled).unwrap() - g0).abs() < 1e-9);
            xs.reverse();
            prop_assert!((jain_index(&xs).unwrap() - j0).abs() < 1e-12);
            prop_assert!((gini_coefficient(&xs).unwrap() - g0).abs() < 1e-12);
        }

        #[test]
        fn jain_range_and_gini_range_hold(
            xs in proptest::collection::vec(0.0f64..10.0, 2..12),
        ) {
            prop_assume!(xs.iter().any(|&x| x > 0.0));
            let u = xs.len() as f64;
            let j = jain_index(&xs).unwrap();
            let g = gini_coefficient(&xs).unwrap();
            prop_assert!(j >= 1.0 / u - 1e-12 && j <= 1.0 + 1e-12);
            prop_assert!(g >= -1e-12 && g <= (u - 1.0) / u + 1e-12);
        }

        #[test]
        fn max_jain_iff_zero_gini(
            xs in proptest::collection::vec(0.01f64..10.0, 2..10),
        ) {
            let j = jain_index(&xs).unwrap();
            let g = gini_coefficient(&xs).unwrap();
            // jain = 1 exactly when all shares equal, which is gini = 0
            prop_assert_eq!((j - 1.0).abs() < 1e-12, g.abs() < 1e-12);
        }
    }
}
