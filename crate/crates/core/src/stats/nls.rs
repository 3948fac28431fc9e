//! Nonlinear least squares: bounded Brent search for one parameter and
//! full-batch gradient descent for several.

use serde::{Deserialize, Serialize};

use super::StatsError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlsFit {
    pub params: Vec<f64>,
    pub residuals: Vec<f64>,
    pub sse: f64,
    pub iterations: usize,
}

fn sse_of<F: Fn(f64, &[f64]) -> f64>(xs: &[f64], ys: &[f64], model: &F, theta: &[f64]) -> f64 {
    xs.iter().zip(ys).map(|(&x, &y)| (y - model(x, theta)).powi(2)).sum()
}

fn residuals_of<F: Fn(f64, &[f64]) -> f64>(xs: &[f64], ys: &[f64], model: &F, theta: &[f64]) -> Vec<f64> {
    xs.iter().zip(ys).map(|(&x, &y)| y - model(x, theta)).collect()
}

/// Bounded scalar minimization (golden section with parabolic steps).
pub fn brent_min<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, xtol: f64, max_iter: usize) -> Result<(f64, f64, usize), StatsError> {
    let golden = 0.5 * (3.0 - 5f64.sqrt());
    let (mut a, mut b) = (lo, hi);
    let mut x = a + golden * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    for it in 0..max_iter {
        let m = 0.5 * (a + b);
        let tol1 = 1e-12 * x.abs() + xtol / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            return Ok((x, fx, it));
        }
        let mut golden_step = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if m >= x { tol1 } else { -tol1 };
                }
                golden_step = false;
            }
        }
        if golden_step {
            e = if x >= m { a - x } else { b - x };
            d = golden * e;
        }
        let u = if d.abs() >= tol1 { x + d } else if d > 0.0 { x + tol1 } else { x - tol1 };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Err(StatsError::NonConvergence { iterations: max_iter, best_loss: fx, best_params: vec![x], loss_trace: vec![] })
}

/// Single-parameter least squares on [lo, hi]. A log-spaced scan around
/// `init` brackets the minimum before Brent refinement.
pub fn nls_fit_scalar<F>(xs: &[f64], ys: &[f64], model: F, init: f64, bounds: (f64, f64)) -> Result<NlsFit, StatsError>
where
    F: Fn(f64, f64) -> f64,
{
    if xs.len() < 2 || xs.len() != ys.len() {
        return Err(StatsError::Input("need at least 2 paired points".into()));
    }
    let (lo, hi) = bounds;
    if !(lo < hi) {
        return Err(StatsError::Input("empty bounds".into()));
    }
    let m = |x: f64, t: &[f64]| model(x, t[0]);
    let obj = |t: f64| sse_of(xs, ys, &m, &[t]);
    let positive = lo > 0.0;
    let grid: Vec<f64> = (0..=96)
        .map(|i| {
            let f = i as f64 / 96.0;
            if positive { (lo.ln() + f * (hi.ln() - lo.ln())).exp() } else { lo + f * (hi - lo) }
        })
        .chain(std::iter::once(init.clamp(lo, hi)))
        .collect();
    let mut pts: Vec<(f64, f64)> = grid.iter().map(|&t| (t, obj(t))).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let best = (0..pts.len()).min_by(|&i, &j| pts[i].1.total_cmp(&pts[j].1)).unwrap_or(0);
    let a = pts[best.saturating_sub(1)].0;
    let b = pts[(best + 1).min(pts.len() - 1)].0;
    let xtol = 1e-10 * (1.0 + pts[best].0.abs());
    let (t, sse, iterations) = brent_min(obj, a, b, xtol, 500)?;
    Ok(NlsFit { params: vec![t], residuals: residuals_of(xs, ys, &m, &[t]), sse, iterations })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdOptions {
    pub learning_rate: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for GdOptions {
    fn default() -> Self {
        Self { learning_rate: 0.05, max_iter: 5000, tol: 1e-9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdResult {
    pub params: Vec<f64>,
    pub loss: f64,
    pub iterations: usize,
    pub loss_trace: Vec<f64>,
}

/// Full-batch gradient descent. `f` returns the loss and writes the
/// gradient. Converged once the loss changes by less than `tol`.
pub fn gradient_descent<F>(mut f: F, init: Vec<f64>, opts: GdOptions) -> Result<GdResult, StatsError>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let mut params = init;
    let mut grad = vec![0.0; params.len()];
    let mut trace = Vec::new();
    let mut prev = f(&params, &mut grad);
    trace.push(prev);
    for it in 1..=opts.max_iter {
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= opts.learning_rate * g;
        }
        let loss = f(&params, &mut grad);
        if it % 50 == 0 {
            trace.push(loss);
        }
        if !loss.is_finite() {
            break;
        }
        if (prev - loss).abs() < opts.tol {
            trace.push(loss);
            return Ok(GdResult { params, loss, iterations: it, loss_trace: trace });
        }
        prev = loss;
    }
    Err(StatsError::NonConvergence { iterations: opts.max_iter, best_loss: prev, best_params: params, loss_trace: trace })
}

/// Multi-parameter least squares by gradient descent on the mean squared
/// residual with central-difference gradients.
pub fn nls_fit<F>(xs: &[f64], ys: &[f64], model: F, init: Vec<f64>, opts: GdOptions) -> Result<NlsFit, StatsError>
where
    F: Fn(f64, &[f64]) -> f64,
{
    if xs.len() < 2 || xs.len() != ys.len() {
        return Err(StatsError::Input("need at least 2 paired points".into()));
    }
    let n = xs.len() as f64;
    let r = gradient_descent(
        |t, g| {
            let mut tp = t.to_vec();
            for i in 0..t.len() {
                let h = 1e-6 * (1.0 + t[i].abs());
                tp[i] = t[i] + h;
                let up = sse_of(xs, ys, &model, &tp);
                tp[i] = t[i] - h;
                let dn = sse_of(xs, ys, &model, &tp);
                tp[i] = t[i];
                g[i] = (up - dn) / (2.0 * h * n);
            }
            sse_of(xs, ys, &model, t) / n
        },
        init,
        opts,
    )?;
    let residuals = residuals_of(xs, ys, &model, &r.params);
    Ok(NlsFit { sse: r.loss * n, params: r.params, residuals, iterations: r.iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rarefaction(n: f64, k: f64) -> f64 {
        k * (1.0 - (1.0 - 1.0 / k).powf(n))
    }

    #[test]
    fn exact_scalar_recovery() {
        let xs: Vec<f64> = (1..=1000).map(|n| n as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&n| rarefaction(n, 256.0)).collect();
        let fit = nls_fit_scalar(&xs, &ys, rarefaction, 500.0, (1.0, 10_000.0)).unwrap();
        assert!((fit.params[0] - 256.0).abs() < 1e-6, "{}", fit.params[0]);
    }

    #[test]
    fn quadratic_minimum() {
        let (x, _, _) = brent_min(|x| (x - 1.234).powi(2) + 3.0, -10.0, 10.0, 1e-12, 200).unwrap();
        assert!((x - 1.234).abs() < 1e-6);
    }

    #[test]
    fn multi_parameter_fit() {
        let xs: Vec<f64> = (0..30).map(|i| i as f64 / 10.0).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| 1.5 * x + 0.7).collect();
        let fit = nls_fit(&xs, &ys, |x, t| t[0] * x + t[1], vec![0.0, 0.0], GdOptions { learning_rate: 0.1, max_iter: 100_000, tol: 1e-16 }).unwrap();
        assert!((fit.params[0] - 1.5).abs() < 1e-3 && (fit.params[1] - 0.7).abs() < 1e-3, "{:?}", fit.params);
    }

    #[test]
    fn non_convergence_reports_best() {
        let r = gradient_descent(|t, g| { g[0] = 1.0; t[0] }, vec![0.0], GdOptions { learning_rate: 0.1, max_iter: 10, tol: 1e-9 });
        assert!(matches!(r, Err(StatsError::NonConvergence { .. })));
    }
}
