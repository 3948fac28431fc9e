//! Clopper–Pearson binomial confidence interval.

use super::special::beta_quantile;
use super::StatsError;

/// Exact two-sided interval for `successes` out of `trials` at `level`.
pub fn binom_ci(successes: u64, trials: u64, level: f64) -> Result<(f64, f64), StatsError> {
    if trials == 0 {
        return Err(StatsError::Input("trials must be positive".into()));
    }
    if successes > trials {
        return Err(StatsError::Input(format!("{successes} successes out of {trials} trials")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::Input(format!("level {level} outside (0,1)")));
    }
    let (c, n) = (successes as f64, trials as f64);
    let tail = (1.0 - level) / 2.0;
    let lo = if successes == 0 {
        0.0
    } else if successes == trials {
        tail.powf(1.0 / n)
    } else {
        beta_quantile(tail, c, n - c + 1.0)
    };
    let hi = if successes == trials {
        1.0
    } else if successes == 0 {
        1.0 - tail.powf(1.0 / n)
    } else {
        beta_quantile(1.0 - tail, c + 1.0, n - c)
    };
    Ok((lo, hi))
}
