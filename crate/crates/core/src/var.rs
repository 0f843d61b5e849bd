//! Least-squares VAR fits and the coefficient-difference baseline: fit the
//! nominal and anomalous series separately and flag the patterns whose
//! coefficients moved the most.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Pattern;

/// Fits with a regressor condition number above this are rejected.
pub const MAX_CONDITION: f64 = 1e12;
pub const AIC_MAX_LAG: usize = 5;
pub const DEFAULT_FLAG_FRACTION: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarFit {
    pub n: usize,
    pub p: usize,
    /// `coefs[k][i][j]`: estimated influence of node `j` at lag `k + 1` on node `i`.
    pub coefs: Vec<Vec<Vec<f64>>>,
    pub intercept: Vec<f64>,
    /// Unbiased residual covariance.
    pub residual_cov: Vec<Vec<f64>>,
    pub aic: f64,
    pub condition: f64,
    pub samples: usize,
}

fn check_series(channels: &[Vec<f64>]) -> Result<usize> {
    let n = channels.len();
    if n == 0 {
        return Err(Error::invalid("series has no channels"));
    }
    let t = channels[0].len();
    for (j, c) in channels.iter().enumerate() {
        if c.len() != t {
            return Err(Error::shape(format!("channel {j} has length {}, expected {t}", c.len())));
        }
        if let Some(i) = c.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("channel {j}, sample {i}")));
        }
    }
    Ok(t)
}

/// OLS fit of a lag-`p` VAR with intercept on channel-major data.
pub fn fit_var(channels: &[Vec<f64>], p: usize) -> Result<VarFit> {
    if p == 0 {
        return Err(Error::invalid("lag order must be at least 1"));
    }
    let t = check_series(channels)?;
    let n = channels.len();
    let k = 1 + n * p;
    let rows = t.saturating_sub(p);
    if rows <= k {
        return Err(Error::TooShort(format!(
            "{t} samples cannot fit a lag-{p} VAR on {n} channels"
        )));
    }
    // Normal equations, accumulated row by row.
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = DMatrix::<f64>::zeros(k, n);
    let mut x = vec![0.0; k];
    let regressor = |s: usize, x: &mut [f64]| {
        x[0] = 1.0;
        for lag in 0..p {
            for j in 0..n {
                x[1 + lag * n + j] = channels[j][s - lag - 1];
            }
        }
    };
    for s in p..t {
        regressor(s, &mut x);
        for a in 0..k {
            let xa = x[a];
            for b in a..k {
                xtx[(a, b)] += xa * x[b];
            }
            for i in 0..n {
                xty[(a, i)] += xa * channels[i][s];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            xtx[(a, b)] = xtx[(b, a)];
        }
    }
    let eig = xtx.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if min > 0.0 { (max / min).sqrt() } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Singular { condition });
    }
    let beta = xtx
        .cholesky()
        .ok_or(Error::Singular { condition })?
        .solve(&xty);
    let mut sse = DMatrix::<f64>::zeros(n, n);
    let mut resid = vec![0.0; n];
    for s in p..t {
        regressor(s, &mut x);
        for i in 0..n {
            resid[i] = channels[i][s] - (0..k).map(|a| x[a] * beta[(a, i)]).sum::<f64>();
        }
        for i in 0..n {
            for j in 0..n {
                sse[(i, j)] += resid[i] * resid[j];
            }
        }
    }
    let ml = &sse / rows as f64;
    let log_det = ml
        .clone()
        .cholesky()
        .map(|c| 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
        .unwrap_or(f64::NEG_INFINITY);
    let aic = log_det + 2.0 * (p * n * n) as f64 / rows as f64;
    let dof = (rows - k) as f64;
    let coefs = (0..p)
        .map(|lag| (0..n).map(|i| (0..n).map(|j| beta[(1 + lag * n + j, i)]).collect()).collect())
        .collect();
    Ok(VarFit {
        n,
        p,
        coefs,
        intercept: (0..n).map(|i| beta[(0, i)]).collect(),
        residual_cov: (0..n).map(|i| (0..n).map(|j| sse[(i, j)] / dof).collect()).collect(),
        aic,
        condition,
        samples: rows,
    })
}

/// Lag order minimizing AIC over `1..=max_lag`.
pub fn select_lag(channels: &[Vec<f64>], max_lag: usize) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for p in 1..=max_lag {
        let fit = fit_var(channels, p)?;
        if best.is_none_or(|(_, a)| fit.aic < a) {
            best = Some((p, fit.aic));
        }
    }
    best.map(|(p, _)| p).ok_or_else(|| Error::invalid("max lag must be at least 1"))
}

/// Per-pattern coefficient change between two fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarRca {
    /// `delta[source][target] = sum_k |A'[k][target][source] - A[k][target][source]|`.
    pub delta: Vec<Vec<f64>>,
    pub threshold: f64,
    /// Flagged patterns by decreasing `delta`.
    pub flagged: Vec<Pattern>,
}

/// Flag patterns with `delta > fraction * max(delta)`.
pub fn var_rca(nominal: &VarFit, anomalous: &VarFit, fraction: f64) -> Result<VarRca> {
    if nominal.n != anomalous.n || nominal.p != anomalous.p {
        return Err(Error::shape(format!(
            "fits differ: n {} vs {}, p {} vs {}",
            nominal.n, anomalous.n, nominal.p, anomalous.p
        )));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("flag fraction {fraction} must be in [0, 1)")));
    }
    let n = nominal.n;
    let delta: Vec<Vec<f64>> = (0..n)
        .map(|src| {
            (0..n)
                .map(|dst| {
                    (0..nominal.p)
                        .map(|k| (anomalous.coefs[k][dst][src] - nominal.coefs[k][dst][src]).abs())
                        .sum()
                })
                .collect()
        })
        .collect();
    let max = delta.iter().flatten().cloned().fold(0.0_f64, f64::max);
    let threshold = fraction * max;
    let mut flagged: Vec<(Pattern, f64)> = (0..n)
        .flat_map(|s| (0..n).map(move |d| Pattern::new(s, d)))
        .map(|pat| (pat, delta[pat.source][pat.target]))
        .filter(|&(_, d)| max > 0.0 && d > threshold)
        .collect();
    flagged.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(VarRca {
        delta,
        threshold,
        flagged: flagged.into_iter().map(|(p, _)| p).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{simulate_var, VarModel};

    fn model() -> VarModel {
        let mut m = VarModel::zeros(3, 1);
        m.coefs[0] = vec![vec![0.5, 0.0, 0.0], vec![0.4, 0.3, 0.0], vec![0.0, -0.3, 0.2]];
        m
    }

    #[test]
    fn recovers_known_coefficients() {
        let m = model();
        let y = simulate_var(&m, 20_000, 200, 1).unwrap().channels;
        let fit = fit_var(&y, 1).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((fit.coefs[0][i][j] - m.coefs[0][i][j]).abs() < 0.03, "A[{i}][{j}]");
            }
            assert!(fit.intercept[i].abs() < 0.05);
            assert!((fit.residual_cov[i][i] - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn exact_recovery_on_noiseless_data() {
        // y_t = 2 + 0.5 y_{t-1} starting away from the fixed point
        let mut y = vec![10.0];
        for _ in 0..50 {
            let last = *y.last().unwrap();
            y.push(2.0 + 0.5 * last);
        }
        let x: Vec<f64> = (0..51).map(|i| ((i * 7919) % 13) as f64).collect();
        let fit = fit_var(&[y, x], 1).unwrap();
        assert!((fit.coefs[0][0][0] - 0.5).abs() < 1e-8);
        assert!(fit.coefs[0][0][1].abs() < 1e-8);
        assert!((fit.intercept[0] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fit_var(&[vec![1.0; 100]], 1).is_err());
        assert!(matches!(fit_var(&[vec![0.0; 3]], 1), Err(Error::TooShort(_))));
        assert!(fit_var(&[vec![1.0, f64::NAN, 2.0, 3.0, 4.0]], 1).is_err());
        assert!(fit_var(&[vec![1.0, 2.0, 3.0], vec![1.0]], 1).is_err());
        assert!(fit_var(&[vec![1.0, 2.0, 3.0]], 0).is_err());
    }

    #[test]
    fn aic_prefers_the_true_order() {
        let mut m = VarModel::zeros(2, 2);
        m.coefs[0] = vec![vec![0.3, 0.0], vec![0.2, 0.2]];
        m.coefs[1] = vec![vec![-0.5, 0.0], vec![0.0, 0.3]];
        let y = simulate_var(&m, 10_000, 200, 2).unwrap().channels;
        assert_eq!(select_lag(&y, AIC_MAX_LAG).unwrap(), 2);
    }

    #[test]
    fn flags_the_broken_edge() {
        let nominal = model();
        let mut broken = nominal.clone();
        broken.coefs[0][1][0] = 0.0;
        let a = fit_var(&simulate_var(&nominal, 20_000, 200, 3).unwrap().channels, 1).unwrap();
        let b = fit_var(&simulate_var(&broken, 20_000, 200, 4).unwrap().channels, 1).unwrap();
        let rca = var_rca(&a, &b, DEFAULT_FLAG_FRACTION).unwrap();
        assert_eq!(rca.flagged, vec![Pattern::new(0, 1)]);
        assert!((rca.delta[0][1] - 0.4).abs() < 0.05);
    }

    #[test]
    fn threshold_is_strict() {
        let mut a = fit_var(&simulate_var(&model(), 500, 50, 5).unwrap().channels, 1).unwrap();
        for row in a.coefs[0].iter_mut() {
            row.iter_mut().for_each(|c| *c = 0.0);
        }
        let mut b = a.clone();
        b.coefs[0][0][1] = 1.0;
        b.coefs[0][2][2] = 0.4;
        let rca = var_rca(&a, &b, 0.4).unwrap();
        assert_eq!(rca.flagged, vec![Pattern::new(1, 0)]);
        assert!(var_rca(&a, &a, 0.4).unwrap().flagged.is_empty());
        assert!(var_rca(&a, &b, 1.0).is_err());
    }
}
