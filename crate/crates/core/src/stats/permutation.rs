//! Monte Carlo permutation test with a Clopper–Pearson adjusted p-value.

use rayon::prelude::*;

use super::binom::binom_ci;
use super::{Method, PValueReport, StatsError};
use crate::rng::{mix, SplitMix64};

/// Shuffles all entries `n_perm` times, recomputing `statistic` from
/// scratch. Replica `r` uses its own sub-seed, so the result does not depend
/// on the number of threads.
pub fn permutation_test<F>(
    values: &[f64],
    statistic: F,
    n_perm: usize,
    ci_level: f64,
    seed: u64,
) -> Result<PValueReport, StatsError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if n_perm < 100 {
        return Err(StatsError::Input(format!("n_perm {n_perm} < 100")));
    }
    let observed = statistic(values);
    let null: Vec<f64> = (0..n_perm as u64)
        .into_par_iter()
        .map_init(
            || values.to_vec(),
            |buf, r| {
                buf.copy_from_slice(values);
                SplitMix64::new(mix(seed, r)).shuffle(buf);
                statistic(buf)
            },
        )
        .collect();
    permutation_pvalue(observed, &null, ci_level)
}

/// p-value for an observed statistic against precomputed permutation draws.
pub fn permutation_pvalue(observed: f64, null: &[f64], ci_level: f64) -> Result<PValueReport, StatsError> {
    if null.is_empty() {
        return Err(StatsError::Input("no permutation draws".into()));
    }
    let c = null.iter().filter(|&&s| s >= observed).count() as u64;
    let (lo, hi) = binom_ci(c, null.len() as u64, ci_level)?;
    Ok(PValueReport {
        p_value: hi,
        method: Method::MonteCarloPermutation,
        ci: Some((lo, hi)),
        statistic: observed,
        n_samples: null.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spread(v: &[f64]) -> f64 {
        // Range of the first-half mean minus second-half mean, as a toy statistic.
        let h = v.len() / 2;
        (v[..h].iter().sum::<f64>() - v[h..].iter().sum::<f64>()).abs()
    }

    #[test]
    fn constant_input_gives_one() {
        let r = permutation_test(&[3.0; 20], spread, 500, 0.99, 1).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn zero_exceedances_gives_closed_form() {
        let r = permutation_pvalue(10.0, &vec![0.0; 10_000], 0.99).unwrap();
        assert!((r.p_value - (1.0 - 0.005f64.powf(1e-4))).abs() < 1e-15);
    }

    #[test]
    fn reproducible_and_monotone() {
        let v: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = permutation_test(&v, spread, 1000, 0.99, 9).unwrap();
        let b = permutation_test(&v, spread, 1000, 0.99, 9).unwrap();
        assert_eq!(a, b);
        let null: Vec<f64> = (0..1000).map(|i| i as f64 / 100.0).collect();
        let mut last = 1.0;
        for s in 0..12 {
            let p = permutation_pvalue(s as f64, &null, 0.99).unwrap().p_value;
            assert!(p <= last);
            last = p;
        }
    }

    #[test]
    fn separated_halves_reject() {
        let v: Vec<f64> = (0..40).map(|i| if i < 20 { 0.0 } else { 1.0 } + (i as f64) * 1e-3).collect();
        assert!(permutation_test(&v, spread, 2000, 0.99, 3).unwrap().p_value < 0.01);
    }
}
