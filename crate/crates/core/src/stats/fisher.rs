//! Fisher's exact test on 2×2 tables.

use serde::{Deserialize, Serialize};

use super::special::ln_choose;
use super::{Method, PValueReport};

/// [[a, b], [c, d]].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable2x2 {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable2x2 {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        Self { a, b, c, d }
    }
}

/// Two-sided p: total probability of tables no more likely than the
/// observed one, margins fixed.
pub fn fisher_exact(t: ContingencyTable2x2) -> PValueReport {
    let r1 = t.a + t.b;
    let r2 = t.c + t.d;
    let c1 = t.a + t.c;
    let n = r1 + r2;
    let report = |p: f64| PValueReport {
        p_value: p.clamp(0.0, 1.0),
        method: Method::FisherExact,
        ci: None,
        statistic: t.a as f64,
        n_samples: n as usize,
    };
    if r1 == 0 || r2 == 0 || c1 == 0 || c1 == n {
        return report(1.0);
    }
    let ln_denom = ln_choose(n, c1);
    let lo = c1.saturating_sub(r2);
    let hi = c1.min(r1);
    let pmf = |x: u64| (ln_choose(r1, x) + ln_choose(r2, c1 - x) - ln_denom).exp();
    let p_obs = pmf(t.a);
    let cutoff = p_obs * (1.0 + 1e-7);
    let p: f64 = (lo..=hi).map(pmf).filter(|&p| p <= cutoff).sum();
    report(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert!((fisher_exact(ContingencyTable2x2::new(5, 5, 5, 5)).p_value - 1.0).abs() < 1e-12);
        let p = fisher_exact(ContingencyTable2x2::new(10, 0, 0, 10)).p_value;
        assert!((p - 2.0 / 184_756.0).abs() < 1e-15);
        assert_eq!(fisher_exact(ContingencyTable2x2::new(0, 0, 3, 4)).p_value, 1.0);
    }

    #[test]
    fn swap_invariance() {
        let t = ContingencyTable2x2::new(3, 9, 7, 2);
        let s = ContingencyTable2x2::new(2, 7, 9, 3);
        assert!((fisher_exact(t).p_value - fisher_exact(s).p_value).abs() < 1e-14);
    }
}
