//! Synthetic multivariate series from vector autoregressions, plus the two
//! anomaly injections used for evaluation: broken causal edges and delayed
//! nodes.

mod io;
mod recipe;

pub use io::{read_dataset, read_series_csv, write_dataset};
pub use recipe::{
    draw_five_node, draw_thirty_node, five_node_recipe, lambda_margin, node_delay_suite, pattern_suite, simulate_case, simulate_mode, thirty_node_recipe, CaseSpec, DrawConfig,
    ModeRecipe, FIVE_NODE_TOPOLOGIES,
};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Pattern;

/// Lag-`p` vector autoregression `y_t = sum_k A[k] y_{t-k-1} + mu_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarModel {
    pub n: usize,
    pub p: usize,
    /// `coefs[k][i][j]`: influence of node `j` at lag `k + 1` on node `i`.
    pub coefs: Vec<Vec<Vec<f64>>>,
    pub noise_cov: Vec<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
}

impl VarModel {
    pub fn zeros(n: usize, p: usize) -> Self {
        let mut noise_cov = vec![vec![0.0; n]; n];
        for (i, row) in noise_cov.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        VarModel {
            n,
            p,
            coefs: vec![vec![vec![0.0; n]; n]; p],
            noise_cov,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.coefs.len() != self.p {
            return Err(Error::shape(format!(
                "expected {} lag matrices, found {}",
                self.p,
                self.coefs.len()
            )));
        }
        let square = |m: &Vec<Vec<f64>>| m.len() == self.n && m.iter().all(|r| r.len() == self.n);
        if !self.coefs.iter().all(square) || !square(&self.noise_cov) {
            return Err(Error::shape(format!("matrices must be {0}x{0}", self.n)));
        }
        for i in 0..self.n {
            for j in 0..i {
                if (self.noise_cov[i][j] - self.noise_cov[j][i]).abs() > 1e-12 {
                    return Err(Error::invalid("noise covariance is not symmetric"));
                }
            }
        }
        let flat = self.coefs.iter().flatten().flatten();
        if flat.chain(self.noise_cov.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model coefficients".into()));
        }
        Ok(())
    }

    /// `(n*p) x (n*p)` companion matrix.
    pub fn companion(&self) -> DMatrix<f64> {
        let dim = self.n * self.p;
        let mut c = DMatrix::zeros(dim, dim);
        for (k, lag) in self.coefs.iter().enumerate() {
            for i in 0..self.n {
                for j in 0..self.n {
                    c[(i, k * self.n + j)] = lag[i][j];
                }
            }
        }
        for r in self.n..dim {
            c[(r, r - self.n)] = 1.0;
        }
        c
    }

    /// Sum over lags of `|A[k][target][source]|`.
    pub fn edge_weight(&self, source: usize, target: usize) -> f64 {
        self.coefs.iter().map(|lag| lag[target][source].abs()).sum()
    }
}

/// Spectral radius of the companion matrix; the model is stationary iff it is < 1.
pub fn check_stationarity(model: &VarModel) -> f64 {
    if model.n == 0 || model.p == 0 {
        return 0.0;
    }
    let c = model.companion();
    // The unbounded Schur iteration can stall on defective matrices.
    if let Some(schur) = c.clone().try_schur(f64::EPSILON, 10_000) {
        return schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    }
    gelfand_radius(c)
}

/// `lim ||C^k||^(1/k)` by repeated squaring with renormalization.
fn gelfand_radius(mut m: DMatrix<f64>) -> f64 {
    let mut log_scale = 0.0;
    let mut estimate = m.norm();
    for k in 1..=60 {
        m = &m * &m;
        let s = m.norm();
        if s == 0.0 || !s.is_finite() {
            return if s == 0.0 { 0.0 } else { f64::INFINITY };
        }
        m /= s;
        log_scale = 2.0 * log_scale + s.ln();
        estimate = (log_scale / 2f64.powi(k)).exp();
    }
    estimate
}

/// A nominal operating mode: a directed graph whose edges carry per-lag
/// coefficients. Self-loops are ordinary edges with `source == target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMode {
    pub mode_id: String,
    pub n: usize,
    pub p: usize,
    pub edges: Vec<Edge>,
    /// Diagonal noise variance.
    #[serde(default = "unit")]
    pub noise_var: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    /// One coefficient per lag, `coefs.len() == p`.
    pub coefs: Vec<f64>,
}

impl GraphMode {
    pub fn realize(&self) -> VarModel {
        let mut model = VarModel::zeros(self.n, self.p);
        for row in 0..self.n {
            model.noise_cov[row][row] = self.noise_var;
        }
        for e in &self.edges {
            for (k, &c) in e.coefs.iter().enumerate().take(self.p) {
                model.coefs[k][e.target][e.source] = c;
            }
        }
        model
    }

    pub fn has_edge(&self, source: usize, target: usize) -> bool {
        self.edges
            .iter()
            .any(|e| e.source == source && e.target == target)
    }

    /// Off-diagonal edges as patterns.
    pub fn relational_edges(&self) -> Vec<Pattern> {
        self.edges
            .iter()
            .filter(|e| e.source != e.target)
            .map(|e| Pattern::new(e.source, e.target))
            .collect()
    }

    /// Pattern-matrix adjacency (`adj[source][target]`), self-loops included.
    pub fn adjacency(&self) -> Vec<Vec<bool>> {
        let mut adj = vec![vec![false; self.n]; self.n];
        for e in &self.edges {
            adj[e.source][e.target] = true;
        }
        adj
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnomalySpec {
    PatternBreak { broken_patterns: Vec<Pattern> },
    NodeDelay { node: usize, delay: usize },
}

impl AnomalySpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            AnomalySpec::PatternBreak { broken_patterns } if broken_patterns.is_empty() => {
                Err(Error::invalid("pattern-break anomaly needs at least one pattern"))
            }
            AnomalySpec::NodeDelay { delay: 0, .. } => {
                Err(Error::invalid("node-delay anomaly needs delay >= 1"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub patterns: Vec<Pattern>,
    pub fault_node: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub model: VarModel,
    #[serde(default)]
    pub mode_id: Option<String>,
    #[serde(default)]
    pub anomaly: Option<AnomalySpec>,
    pub seed: u64,
    pub burn_in: usize,
    pub truth: Truth,
}

/// Channel-major series: `channels[j][t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub channels: Vec<Vec<f64>>,
    pub meta: DatasetMeta,
}

impl SyntheticDataset {
    pub fn n(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn noise_factor(cov: &[Vec<f64>]) -> DMatrix<f64> {
    let n = cov.len();
    let m = DMatrix::from_fn(n, n, |i, j| cov[i][j]);
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || m[(i, j)] == 0.0));
    if diagonal {
        return DMatrix::from_fn(n, n, |i, j| if i == j { m[(i, i)].max(0.0).sqrt() } else { 0.0 });
    }
    if let Some(chol) = m.clone().cholesky() {
        return chol.l();
    }
    // PSD but singular: V * sqrt(max(lambda, 0))
    let eig = m.symmetric_eigen();
    let mut factor = eig.eigenvectors.clone();
    for (c, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        factor.column_mut(c).scale_mut(s);
    }
    factor
}

/// Simulate `length` samples after discarding `burn_in`, starting from a zero
/// state. Output is a pure function of `(model, length, burn_in, seed)`.
pub fn simulate_var(
    model: &VarModel,
    length: usize,
    burn_in: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    model.validate()?;
    if length == 0 {
        return Err(Error::invalid("length must be > 0"));
    }
    let radius = check_stationarity(model);
    if radius >= 1.0 {
        return Err(Error::NonStationary { radius });
    }
    let n = model.n;
    let p = model.p;
    let factor = noise_factor(&model.noise_cov);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = burn_in + length;
    // History ring of the last p states, newest first.
    let mut history = vec![vec![0.0; n]; p.max(1)];
    let mut channels = vec![Vec::with_capacity(length); n];
    let mut z = vec![0.0; n];
    let mut next = vec![0.0; n];
    for t in 0..total {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        for i in 0..n {
            let mut acc = 0.0;
            for (c, zc) in z.iter().enumerate() {
                acc += factor[(i, c)] * zc;
            }
            for (k, lag) in model.coefs.iter().enumerate() {
                let prev = &history[k];
                acc += lag[i].iter().zip(prev).map(|(a, y)| a * y).sum::<f64>();
            }
            next[i] = acc;
        }
        if p > 0 {
            history.rotate_right(1);
            history[0].copy_from_slice(&next);
        }
        if t >= burn_in {
            for (ch, &v) in channels.iter_mut().zip(&next) {
                ch.push(v);
            }
        }
    }
    Ok(SyntheticDataset {
        channels,
        meta: DatasetMeta {
            model: model.clone(),
            mode_id: None,
            anomaly: None,
            seed,
            burn_in,
            truth: Truth::default(),
        },
    })
}

/// Realize `mode` with every lag coefficient on each broken edge zeroed.
pub fn make_pattern_anomaly(mode: &GraphMode, patterns: &[Pattern]) -> Result<VarModel> {
    let mut model = mode.realize();
    for pat in patterns {
        if !mode.has_edge(pat.source, pat.target) {
            return Err(Error::invalid(format!(
                "pattern {}->{} is not an edge of mode {}",
                pat.source, pat.target, mode.mode_id
            )));
        }
        for lag in model.coefs.iter_mut() {
            lag[pat.target][pat.source] = 0.0;
        }
    }
    Ok(model)
}

/// Delay one channel by `delay` samples relative to the others.
///
/// The output has `T - delay` samples. Healthy channels take original rows
/// `delay..T`; the faulty channel takes rows `0..T - delay`, so at output time
/// `t` it reports the value the healthy channels saw `delay` samples earlier.
pub fn make_node_delay_anomaly(
    data: &SyntheticDataset,
    node: usize,
    delay: usize,
) -> Result<SyntheticDataset> {
    let t = data.len();
    if node >= data.n() {
        return Err(Error::invalid(format!("node {node} out of range for n={}", data.n())));
    }
    if delay == 0 || delay >= t {
        return Err(Error::invalid(format!("delay must satisfy 1 <= delay < T={t}, got {delay}")));
    }
    let channels = data
        .channels
        .iter()
        .enumerate()
        .map(|(j, ch)| {
            if j == node {
                ch[..t - delay].to_vec()
            } else {
                ch[delay..].to_vec()
            }
        })
        .collect();
    let mut meta = data.meta.clone();
    meta.anomaly = Some(AnomalySpec::NodeDelay { node, delay });
    meta.truth = Truth {
        patterns: Vec::new(),
        fault_node: Some(node),
    };
    Ok(SyntheticDataset { channels, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ar1(a: f64) -> VarModel {
        let mut m = VarModel::zeros(1, 1);
        m.coefs[0][0][0] = a;
        m
    }

    #[test]
    fn zero_dynamics_zero_noise_is_all_zero() {
        let mut m = VarModel::zeros(3, 2);
        m.noise_cov = vec![vec![0.0; 3]; 3];
        let d = simulate_var(&m, 50, 10, 7).unwrap();
        assert!(d.channels.iter().flatten().all(|&v| v == 0.0));
        assert!(check_stationarity(&m) < 1e-12);
    }

    #[test]
    fn gelfand_fallback_matches_known_radii() {
        let d = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -0.9]);
        assert!((gelfand_radius(d) - 0.9).abs() < 1e-9);
        let jordan = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 0.0, 0.5]);
        assert!((gelfand_radius(jordan) - 0.5).abs() < 1e-9);
        let nilpotent = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(gelfand_radius(nilpotent), 0.0);
    }

    #[test]
    fn ar1_radius_and_variance() {
        let m = ar1(0.5);
        assert!((check_stationarity(&m) - 0.5).abs() < 1e-12);
        let d = simulate_var(&m, 100_000, 1000, 11).unwrap();
        let x = &d.channels[0];
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
        let expected = 1.0 / (1.0 - 0.25);
        assert!((var - expected).abs() / expected < 0.05, "var {var}");
    }

    #[test]
    fn non_stationary_rejected_with_radius() {
        let err = simulate_var(&ar1(1.2), 10, 0, 0).unwrap_err();
        match err {
            Error::NonStationary { radius } => assert!((radius - 1.2).abs() < 1e-9),
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_msg_contains(&simulate_var(&ar1(1.2), 10, 0, 0), "1.2"));
    }

    fn err_msg_contains<T>(r: &Result<T>, s: &str) -> bool {
        r.as_ref().err().map(|e| e.to_string().contains(s)).unwrap_or(false)
    }

    #[test]
    fn deterministic_per_seed() {
        let mut m = VarModel::zeros(2, 2);
        m.coefs[0][0][1] = 0.4;
        m.coefs[1][1][1] = -0.3;
        let a = simulate_var(&m, 200, 50, 3).unwrap();
        let b = simulate_var(&m, 200, 50, 3).unwrap();
        let c = simulate_var(&m, 200, 50, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.channels, c.channels);
    }

    #[test]
    fn correlated_noise_covariance() {
        let mut m = VarModel::zeros(2, 1);
        m.noise_cov = vec![vec![1.0, 0.8], vec![0.8, 1.0]];
        let d = simulate_var(&m, 50_000, 0, 5).unwrap();
        let (x, y) = (&d.channels[0], &d.channels[1]);
        let cov = x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / x.len() as f64;
        assert!((cov - 0.8).abs() < 0.03, "cov {cov}");
        // Singular PSD covariance still simulates.
        m.noise_cov = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let d = simulate_var(&m, 100, 0, 5).unwrap();
        for t in 0..100 {
            assert!((d.channels[0][t] - d.channels[1][t]).abs() < 1e-9);
        }
    }

    #[test]
    fn broken_pattern_zeroes_only_that_edge() {
        let recipe = five_node_recipe();
        let mode = &recipe.modes[0];
        let nominal = mode.realize();
        assert_eq!(make_pattern_anomaly(mode, &[]).unwrap(), nominal);
        let pat = mode.relational_edges()[0];
        let broken = make_pattern_anomaly(mode, &[pat]).unwrap();
        for k in 0..nominal.p {
            for i in 0..nominal.n {
                for j in 0..nominal.n {
                    let (a, b) = (nominal.coefs[k][i][j], broken.coefs[k][i][j]);
                    if i == pat.target && j == pat.source {
                        assert_eq!(b, 0.0);
                    } else {
                        assert_eq!(a.to_bits(), b.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn breaking_a_non_edge_is_rejected() {
        let recipe = five_node_recipe();
        let mode = &recipe.modes[0];
        let missing = (0..5)
            .flat_map(|s| (0..5).map(move |t| Pattern::new(s, t)))
            .find(|p| !mode.has_edge(p.source, p.target))
            .unwrap();
        assert!(make_pattern_anomaly(mode, &[missing]).is_err());
    }

    #[test]
    fn node_delay_shifts_one_channel() {
        let m = five_node_recipe().modes[0].realize();
        let d = simulate_var(&m, 300, 100, 1).unwrap();
        let delayed = make_node_delay_anomaly(&d, 2, 20).unwrap();
        assert_eq!(delayed.len(), 280);
        for t in 0..280 {
            assert_eq!(delayed.channels[2][t], d.channels[2][t]);
            assert_eq!(delayed.channels[0][t], d.channels[0][t + 20]);
            assert_eq!(delayed.channels[4][t], d.channels[4][t + 20]);
        }
        assert_eq!(delayed.meta.truth.fault_node, Some(2));
        assert!(make_node_delay_anomaly(&d, 2, 300).is_err());
        assert!(make_node_delay_anomaly(&d, 2, 0).is_err());
        assert!(make_node_delay_anomaly(&d, 9, 5).is_err());
    }

    #[test]
    fn anomaly_spec_invariants() {
        assert!(AnomalySpec::PatternBreak { broken_patterns: vec![] }.validate().is_err());
        assert!(AnomalySpec::NodeDelay { node: 0, delay: 0 }.validate().is_err());
        assert!(AnomalySpec::NodeDelay { node: 0, delay: 3 }.validate().is_ok());
    }

    /// Repeated multiplication: the spectral radius is the limit of ||C^k||^(1/k).
    fn radius_by_powers(model: &VarModel) -> f64 {
        let c = model.companion();
        let mut m = c.clone();
        let k = 256;
        let mut log_norm = 0.0;
        for _ in 1..k {
            m = &m * &c;
            let norm = m.norm();
            log_norm += norm.ln();
            m /= norm;
        }
        (log_norm + m.norm().ln()) / k as f64
    }

    #[test]
    fn thirty_node_recipe_is_stable() {
        let model = thirty_node_recipe().modes[0].realize();
        let radius = check_stationarity(&model);
        assert!(radius < 1.0);
        let oracle = radius_by_powers(&model).exp();
        assert!((radius - oracle).abs() < 0.03, "{radius} vs {oracle}");
    }
}
