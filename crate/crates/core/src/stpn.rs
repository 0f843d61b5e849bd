//! Spatiotemporal pattern network features.
//!
//! Each channel is partitioned into `|Σ|` symbols. For every ordered node pair
//! `(a, b)` a cross-Markov machine counts how often each depth-`D` word of `a`
//! is followed by each symbol of `b`. The causality weight `Λ^{ab}` of the
//! machine is the mutual information between the source state and the next
//! target symbol, normalized by the target symbol entropy. Per-window `Λ`
//! matrices are thresholded into binary pattern vectors of length `n^2`,
//! flattened row-major with the source node as the major index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::SyntheticDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    /// Maximum entropy: equal-frequency bins.
    Mep,
    /// Equal-width bins over `[min, max]`.
    Uniform,
}

/// Ordered bin boundaries for one channel. A sample `x` maps to the number of
/// boundaries `<= x`, so a value equal to a boundary goes to the upper bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionScheme {
    pub kind: PartitionKind,
    pub alphabet_size: usize,
    pub boundaries: Vec<f64>,
}

pub fn fit_partition(channel: &[f64], alphabet_size: usize, kind: PartitionKind) -> Result<PartitionScheme> {
    if alphabet_size < 2 {
        return Err(Error::invalid("alphabet size must be >= 2"));
    }
    if channel.len() < 10 * alphabet_size {
        return Err(Error::TooShort(format!(
            "partitioning needs >= {} samples, got {}",
            10 * alphabet_size,
            channel.len()
        )));
    }
    if let Some(i) = channel.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("sample {i}")));
    }
    let mut sorted = channel.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    if lo == hi {
        return Err(Error::ConstantChannel);
    }
    let n = sorted.len();
    let mut boundaries: Vec<f64> = (1..alphabet_size)
        .map(|k| match kind {
            PartitionKind::Mep => {
                let idx = k * n / alphabet_size;
                0.5 * (sorted[idx - 1] + sorted[idx])
            }
            PartitionKind::Uniform => lo + (hi - lo) * k as f64 / alphabet_size as f64,
        })
        .collect();
    // Heavy ties can collapse quantiles; keep the list strictly increasing.
    for k in 1..boundaries.len() {
        if boundaries[k] <= boundaries[k - 1] {
            boundaries[k] = boundaries[k - 1].next_up();
        }
    }
    Ok(PartitionScheme {
        kind,
        alphabet_size,
        boundaries,
    })
}

impl PartitionScheme {
    pub fn symbol(&self, x: f64) -> u8 {
        self.boundaries.partition_point(|&b| b <= x) as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolSequence {
    pub node: usize,
    pub alphabet_size: usize,
    pub symbols: Vec<u8>,
}

pub fn symbolize(node: usize, channel: &[f64], scheme: &PartitionScheme) -> Result<SymbolSequence> {
    let mut symbols = Vec::with_capacity(channel.len());
    for (t, &x) in channel.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("node {node}, sample {t}")));
        }
        symbols.push(scheme.symbol(x));
    }
    Ok(SymbolSequence {
        node,
        alphabet_size: scheme.alphabet_size,
        symbols,
    })
}

/// Cross-Markov machine from the depth-`D` words of `source` to the next symbol
/// of `target`. Only observed states are kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XMarkovMachine {
    pub source: usize,
    pub target: usize,
    pub depth: usize,
    /// State words, encoded base `|Σ^a|` with the oldest symbol most significant.
    pub states: Vec<u32>,
    /// Raw transition counts, `counts[state][symbol]`.
    pub counts: Vec<Vec<u64>>,
    pub state_counts: Vec<u64>,
    /// Laplace-smoothed, row-stochastic symbol generation matrix.
    pub pi: Vec<Vec<f64>>,
}

/// Dense `|Σ^a|^D x |Σ^b|` count table over `t in [from, to)` where `t` is the
/// time of the emitted target symbol.
fn count_table(sa: &[u8], alpha_a: usize, sb: &[u8], alpha_b: usize, depth: usize, from: usize, to: usize, table: &mut [u64]) {
    table.iter_mut().for_each(|c| *c = 0);
    let n_states = alpha_a.pow(depth as u32);
    let start = from.max(depth);
    if start >= to {
        return;
    }
    let mut word = 0usize;
    for &s in &sa[start - depth..start] {
        word = (word * alpha_a + s as usize) % n_states;
    }
    for t in start..to {
        table[word * alpha_b + sb[t] as usize] += 1;
        word = (word * alpha_a + sa[t] as usize) % n_states;
    }
}

fn machine_from_table(source: usize, target: usize, depth: usize, alpha_b: usize, table: &[u64]) -> XMarkovMachine {
    let mut states = Vec::new();
    let mut counts = Vec::new();
    let mut state_counts = Vec::new();
    let mut pi = Vec::new();
    for (state, row) in table.chunks(alpha_b).enumerate() {
        let total: u64 = row.iter().sum();
        if total == 0 {
            continue;
        }
        let denom = (total + alpha_b as u64) as f64;
        states.push(state as u32);
        counts.push(row.to_vec());
        state_counts.push(total);
        pi.push(row.iter().map(|&c| (c + 1) as f64 / denom).collect());
    }
    XMarkovMachine {
        source,
        target,
        depth,
        states,
        counts,
        state_counts,
        pi,
    }
}

pub fn estimate_machine(sa: &SymbolSequence, sb: &SymbolSequence, depth: usize) -> Result<XMarkovMachine> {
    if sa.symbols.len() != sb.symbols.len() {
        return Err(Error::shape(format!(
            "sequence lengths differ: {} vs {}",
            sa.symbols.len(),
            sb.symbols.len()
        )));
    }
    if depth == 0 {
        return Err(Error::invalid("depth must be >= 1"));
    }
    let min_len = sa.alphabet_size.pow(depth as u32) * 10;
    if sa.symbols.len() <= min_len {
        return Err(Error::TooShort(format!(
            "machine needs more than {min_len} symbols, got {}",
            sa.symbols.len()
        )));
    }
    let mut table = vec![0u64; sa.alphabet_size.pow(depth as u32) * sb.alphabet_size];
    count_table(&sa.symbols, sa.alphabet_size, &sb.symbols, sb.alphabet_size, depth, 0, sa.symbols.len(), &mut table);
    Ok(machine_from_table(sa.node, sb.node, depth, sb.alphabet_size, &table))
}

/// Normalized mutual information `I(Q^a; Σ^b) / H(Σ^b)` in `[0, 1]`.
pub fn compute_lambda(machine: &XMarkovMachine) -> f64 {
    lambda_from_rows(&machine.state_counts, &machine.pi)
}

fn lambda_from_rows(state_counts: &[u64], pi: &[Vec<f64>]) -> f64 {
    let total: u64 = state_counts.iter().sum();
    if total == 0 || pi.is_empty() {
        return 0.0;
    }
    let width = pi[0].len();
    let mut marginal = vec![0.0; width];
    for (&c, row) in state_counts.iter().zip(pi) {
        let w = c as f64 / total as f64;
        for (m, &p) in marginal.iter_mut().zip(row) {
            *m += w * p;
        }
    }
    let entropy: f64 = marginal.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    if entropy <= 1e-15 {
        return 0.0;
    }
    let mut mi = 0.0;
    for (&c, row) in state_counts.iter().zip(pi) {
        let w = c as f64 / total as f64;
        for (&p, &m) in row.iter().zip(&marginal) {
            if p > 0.0 {
                mi += w * p * (p / m).ln();
            }
        }
    }
    (mi / entropy).clamp(0.0, 1.0)
}

/// `Λ` for every ordered node pair over one window, `lambda[source * n + target]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternGraph {
    pub n: usize,
    pub window_start: usize,
    pub window_len: usize,
    pub lambda: Vec<f64>,
}

impl PatternGraph {
    pub fn get(&self, source: usize, target: usize) -> f64 {
        self.lambda[source * self.n + target]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryPatternVector {
    pub window_start: usize,
    pub window_len: usize,
    pub bits: Vec<u8>,
}

/// Number of windows of `window_len` at `stride` that fit into `len` samples.
pub fn window_count(len: usize, window_len: usize, stride: usize) -> usize {
    if window_len == 0 || stride == 0 || len < window_len {
        0
    } else {
        (len - window_len) / stride + 1
    }
}

/// One [`PatternGraph`] per window over already-symbolized channels.
pub fn extract_windows(
    symbols: &[SymbolSequence],
    window_len: usize,
    stride: usize,
    depth: usize,
) -> Result<Vec<PatternGraph>> {
    let n = symbols.len();
    let len = symbols.first().map_or(0, |s| s.symbols.len());
    if symbols.iter().any(|s| s.symbols.len() != len) {
        return Err(Error::shape("symbol sequences differ in length"));
    }
    if stride == 0 || depth == 0 {
        return Err(Error::invalid("stride and depth must be >= 1"));
    }
    let max_alpha = symbols.iter().map(|s| s.alphabet_size).max().unwrap_or(2);
    let min_len = max_alpha.pow(depth as u32) * 10;
    if window_len <= min_len {
        return Err(Error::TooShort(format!(
            "window of {window_len} samples; machines need more than {min_len}"
        )));
    }
    let count = window_count(len, window_len, stride);
    let mut graphs = Vec::with_capacity(count);
    let mut table = Vec::new();
    for w in 0..count {
        let start = w * stride;
        let end = start + window_len;
        let mut lambda = vec![0.0; n * n];
        for a in symbols.iter() {
            for b in symbols.iter() {
                let states = a.alphabet_size.pow(depth as u32);
                table.resize(states * b.alphabet_size, 0);
                // Emissions at t in (start + depth - 1, end): both state and symbol inside the window.
                count_table(&a.symbols, a.alphabet_size, &b.symbols, b.alphabet_size, depth, start + depth, end, &mut table);
                let m = machine_from_table(a.node, b.node, depth, b.alphabet_size, &table);
                lambda[a.node * n + b.node] = compute_lambda(&m);
            }
        }
        graphs.push(PatternGraph {
            n,
            window_start: start,
            window_len,
            lambda,
        });
    }
    Ok(graphs)
}

/// Bit is 1 iff `Λ >= threshold`.
pub fn binarize(graph: &PatternGraph, thresholds: &[f64]) -> Result<BinaryPatternVector> {
    if thresholds.len() != graph.lambda.len() {
        return Err(Error::shape(format!(
            "{} thresholds for {} patterns",
            thresholds.len(),
            graph.lambda.len()
        )));
    }
    Ok(BinaryPatternVector {
        window_start: graph.window_start,
        window_len: graph.window_len,
        bits: graph
            .lambda
            .iter()
            .zip(thresholds)
            .map(|(&l, &t)| u8::from(l >= t))
            .collect(),
    })
}

/// Optimal 1-D two-means partition of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub lo: f64,
    pub hi: f64,
    pub sd_lo: f64,
    pub sd_hi: f64,
}

impl Split {
    /// Point between the centers at equal distance in units of each cluster's
    /// spread; the midpoint when either cluster has no spread.
    pub fn equal_z(&self) -> f64 {
        let spread = self.sd_lo + self.sd_hi;
        if self.sd_lo > 0.0 && self.sd_hi > 0.0 {
            self.lo + (self.hi - self.lo) * self.sd_lo / spread
        } else {
            0.5 * (self.lo + self.hi)
        }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    /// Center separation over the summed cluster spreads.
    pub fn contrast(&self) -> f64 {
        let spread = self.sd_lo + self.sd_hi;
        if spread > 0.0 {
            (self.hi - self.lo) / spread
        } else {
            f64::INFINITY
        }
    }
}

/// Exact minimum within-cluster sum of squares split; `None` for fewer than
/// two distinct values.
pub fn two_means_split(values: &[f64]) -> Option<Split> {
    if values.len() < 2 {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mut prefix = vec![0.0; n + 1];
    let mut prefix_sq = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + v[i];
        prefix_sq[i + 1] = prefix_sq[i] + v[i] * v[i];
    }
    let sse = |a: usize, b: usize| {
        let k = (b - a) as f64;
        let s = prefix[b] - prefix[a];
        ((prefix_sq[b] - prefix_sq[a]) - s * s / k).max(0.0)
    };
    let mut best: Option<(f64, usize)> = None;
    for split in 1..n {
        if v[split - 1] == v[split] {
            continue;
        }
        let cost = sse(0, split) + sse(split, n);
        if best.is_none_or(|(c, _)| cost < c) {
            best = Some((cost, split));
        }
    }
    let (_, k) = best?;
    let (nl, nh) = (k as f64, (n - k) as f64);
    Some(Split {
        lo: prefix[k] / nl,
        hi: (prefix[n] - prefix[k]) / nh,
        sd_lo: (sse(0, k) / nl).sqrt(),
        sd_hi: (sse(k, n) / nh).sqrt(),
    })
}

/// Optimal 1-D two-means split. Returns `(low center, high center)`.
pub fn two_means(values: &[f64]) -> Option<(f64, f64)> {
    two_means_split(values).map(|s| (s.lo, s.hi))
}

/// Where a threshold sits between the two cluster centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    Midpoint,
    EqualZ,
}

/// Which training values each threshold is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdScope {
    /// One split per pattern over that pattern's windows.
    PerPattern,
    /// One split over every pattern of every window, shared by all patterns.
    Pooled,
}

/// Thresholding rule: a two-means split of training `Λ` values, or
/// `fallback` when the split is degenerate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdPolicy {
    pub scope: ThresholdScope,
    pub boundary: Boundary,
    /// Splits whose centers are closer than this are degenerate.
    pub min_separation: f64,
    pub fallback: f64,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy {
            scope: ThresholdScope::Pooled,
            boundary: Boundary::EqualZ,
            min_separation: 0.05,
            fallback: 0.1,
        }
    }
}

impl ThresholdPolicy {
    /// Per-pattern midpoint of the two cluster centers.
    pub fn per_pattern_midpoint() -> Self {
        ThresholdPolicy {
            scope: ThresholdScope::PerPattern,
            boundary: Boundary::Midpoint,
            ..ThresholdPolicy::default()
        }
    }

    fn threshold(&self, values: &[f64]) -> f64 {
        match two_means_split(values) {
            Some(s) if s.hi - s.lo >= self.min_separation => match self.boundary {
                Boundary::Midpoint => s.midpoint(),
                Boundary::EqualZ => s.equal_z(),
            },
            _ => self.fallback,
        }
    }
}

/// One threshold per pattern from the training windows' `Λ` values.
pub fn fit_thresholds(graphs: &[PatternGraph], policy: &ThresholdPolicy) -> Result<Vec<f64>> {
    let first = graphs.first().ok_or_else(|| Error::invalid("no training windows"))?;
    let size = first.lambda.len();
    if graphs.iter().any(|g| g.lambda.len() != size) {
        return Err(Error::shape("training windows differ in size"));
    }
    Ok(match policy.scope {
        ThresholdScope::Pooled => {
            let pooled: Vec<f64> = graphs.iter().flat_map(|g| g.lambda.iter().copied()).collect();
            vec![policy.threshold(&pooled); size]
        }
        ThresholdScope::PerPattern => {
            let mut column = Vec::with_capacity(graphs.len());
            (0..size)
                .map(|i| {
                    column.clear();
                    column.extend(graphs.iter().map(|g| g.lambda[i]));
                    policy.threshold(&column)
                })
                .collect()
        }
    })
}

pub const FLATTENING: &str = "row-major (source, target)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StpnParams {
    pub alphabet_size: usize,
    pub depth: usize,
    pub window_len: usize,
    pub stride: usize,
    pub partition: PartitionKind,
    pub threshold: ThresholdPolicy,
}

impl Default for StpnParams {
    fn default() -> Self {
        StpnParams {
            alphabet_size: 3,
            depth: 1,
            window_len: 400,
            stride: 200,
            partition: PartitionKind::Mep,
            threshold: ThresholdPolicy::default(),
        }
    }
}

/// Partition schemes and thresholds fitted on nominal training data, frozen
/// afterwards and applied unchanged to test data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub params: StpnParams,
    pub schemes: Vec<PartitionScheme>,
    pub thresholds: Vec<f64>,
    pub flattening: String,
}

/// Per-window output of [`FeatureExtractor::transform`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowFeatures {
    pub window_start: usize,
    pub window_len: usize,
    pub lambda: Vec<Vec<f64>>,
    pub bits: Vec<u8>,
}

/// Feature file: config header plus one record per window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFile {
    pub config: FeatureExtractor,
    #[serde(default)]
    pub source: Option<String>,
    pub windows: Vec<WindowFeatures>,
}

impl FeatureFile {
    pub fn vectors(&self) -> Vec<Vec<u8>> {
        self.windows.iter().map(|w| w.bits.clone()).collect()
    }
}

impl FeatureExtractor {
    pub fn n(&self) -> usize {
        self.schemes.len()
    }

    /// Fit schemes on the pooled channels of `training`, then thresholds on
    /// the training windows.
    pub fn fit(training: &[&SyntheticDataset], params: StpnParams) -> Result<Self> {
        let first = training.first().ok_or_else(|| Error::invalid("no training datasets"))?;
        let n = first.n();
        if training.iter().any(|d| d.n() != n) {
            return Err(Error::shape("training datasets differ in node count"));
        }
        let schemes = (0..n)
            .map(|j| {
                let pooled: Vec<f64> = training.iter().flat_map(|d| d.channels[j].iter().copied()).collect();
                fit_partition(&pooled, params.alphabet_size, params.partition)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut fx = FeatureExtractor {
            params,
            schemes,
            thresholds: Vec::new(),
            flattening: FLATTENING.to_string(),
        };
        let mut graphs = Vec::new();
        for d in training {
            graphs.extend(fx.graphs(d)?);
        }
        fx.thresholds = fit_thresholds(&graphs, &fx.params.threshold)?;
        Ok(fx)
    }

    pub fn symbolize(&self, data: &SyntheticDataset) -> Result<Vec<SymbolSequence>> {
        if data.n() != self.n() {
            return Err(Error::shape(format!("dataset has {} nodes, extractor {}", data.n(), self.n())));
        }
        data.channels
            .iter()
            .zip(&self.schemes)
            .enumerate()
            .map(|(j, (ch, s))| symbolize(j, ch, s))
            .collect()
    }

    pub fn graphs(&self, data: &SyntheticDataset) -> Result<Vec<PatternGraph>> {
        let symbols = self.symbolize(data)?;
        extract_windows(&symbols, self.params.window_len, self.params.stride, self.params.depth)
    }

    pub fn vectors(&self, data: &SyntheticDataset) -> Result<Vec<Vec<u8>>> {
        self.graphs(data)?
            .iter()
            .map(|g| binarize(g, &self.thresholds).map(|b| b.bits))
            .collect()
    }

    pub fn transform(&self, data: &SyntheticDataset) -> Result<Vec<WindowFeatures>> {
        let n = self.n();
        self.graphs(data)?
            .into_iter()
            .map(|g| {
                let bits = binarize(&g, &self.thresholds)?.bits;
                Ok(WindowFeatures {
                    window_start: g.window_start,
                    window_len: g.window_len,
                    lambda: g.lambda.chunks(n).map(<[f64]>::to_vec).collect(),
                    bits,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn seq(node: usize, alpha: usize, symbols: Vec<u8>) -> SymbolSequence {
        SymbolSequence {
            node,
            alphabet_size: alpha,
            symbols,
        }
    }

    fn uniform_symbols(len: usize, alpha: u8, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(0..alpha)).collect()
    }

    /// Inverse standard-normal CDF by bisection on erf-free series: integrate
    /// the density with Simpson's rule. Independent of the partition code.
    fn normal_quantile(q: f64) -> f64 {
        let cdf = |x: f64| {
            let steps = 2000;
            let (a, b) = (-10.0_f64, x);
            let h = (b - a) / steps as f64;
            let f = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let mut s = f(a) + f(b);
            for i in 1..steps {
                let t = a + i as f64 * h;
                s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(t);
            }
            s * h / 3.0
        };
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < q {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn mep_on_uniform_data_gives_quartiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let s = fit_partition(&x, 4, PartitionKind::Mep).unwrap();
        for (b, q) in s.boundaries.iter().zip([0.25, 0.5, 0.75]) {
            assert!((b - q).abs() < 0.02, "{b} vs {q}");
        }
    }

    #[test]
    fn uniform_partition_is_equal_width() {
        let mut x: Vec<f64> = (0..100).map(|i| (i % 7) as f64).collect();
        x[3] = 8.0;
        x[4] = 0.0;
        let s = fit_partition(&x, 4, PartitionKind::Uniform).unwrap();
        assert_eq!(s.boundaries, vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn mep_on_gaussian_matches_tertiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let s = fit_partition(&x, 3, PartitionKind::Mep).unwrap();
        let q1 = normal_quantile(1.0 / 3.0);
        let q2 = normal_quantile(2.0 / 3.0);
        assert!((q1 + 0.4307).abs() < 1e-3 && (q2 - 0.4307).abs() < 1e-3);
        assert!((s.boundaries[0] - q1).abs() < 0.05, "{:?}", s.boundaries);
        assert!((s.boundaries[1] - q2).abs() < 0.05, "{:?}", s.boundaries);
    }

    #[test]
    fn partition_errors() {
        assert!(matches!(fit_partition(&[1.0; 100], 3, PartitionKind::Mep), Err(Error::ConstantChannel)));
        assert!(matches!(fit_partition(&[1.0, 2.0], 3, PartitionKind::Mep), Err(Error::TooShort(_))));
        let mut x: Vec<f64> = (0..50).map(f64::from).collect();
        x[10] = f64::NAN;
        assert!(matches!(fit_partition(&x, 3, PartitionKind::Mep), Err(Error::NonFinite(_))));
    }

    #[test]
    fn symbol_convention() {
        let s = PartitionScheme {
            kind: PartitionKind::Mep,
            alphabet_size: 4,
            boundaries: vec![0.25, 0.5, 0.75],
        };
        assert_eq!(s.symbol(0.1), 0);
        assert_eq!(s.symbol(0.5), 2);
        assert_eq!(s.symbol(0.75), 3);
        assert_eq!(s.symbol(-5.0), 0);
        assert_eq!(s.symbol(9.0), 3);
        assert!(symbolize(0, &[0.1, f64::INFINITY], &s).is_err());
    }

    #[test]
    fn mep_symbols_are_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..9001).map(|_| rng.sample(StandardNormal)).collect();
        let s = fit_partition(&x, 3, PartitionKind::Mep).unwrap();
        let seq = symbolize(0, &x, &s).unwrap();
        let mut counts = [0usize; 3];
        for &c in &seq.symbols {
            counts[c as usize] += 1;
        }
        let tol = 1.0 / (x.len() as f64).sqrt();
        for c in counts {
            assert!((c as f64 / x.len() as f64 - 1.0 / 3.0).abs() <= tol);
        }
    }

    proptest! {
        #[test]
        fn mep_bins_differ_by_at_most_one(
            values in prop::collection::hash_set(-1_000_000i64..1_000_000, 40..400),
            alpha in 2usize..6,
        ) {
            let x: Vec<f64> = values.into_iter().map(|v| v as f64 / 7.0).collect();
            prop_assume!(x.len() >= 10 * alpha);
            let s = fit_partition(&x, alpha, PartitionKind::Mep).unwrap();
            prop_assert!(s.boundaries.windows(2).all(|w| w[0] < w[1]));
            let mut counts = vec![0usize; alpha];
            for &v in &x {
                counts[s.symbol(v) as usize] += 1;
            }
            let (mn, mx) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(mx - mn <= 1, "{:?}", counts);
        }

        #[test]
        fn lambda_is_permutation_invariant(
            a in prop::collection::vec(0u8..3, 300),
            b in prop::collection::vec(0u8..3, 300),
            perm in Just([2u8, 0, 1]),
        ) {
            let sa = seq(0, 3, a.clone());
            let sb = seq(1, 3, b.clone());
            let base = compute_lambda(&estimate_machine(&sa, &sb, 1).unwrap());
            prop_assert!((0.0..=1.0).contains(&base));
            let pa = seq(0, 3, a.iter().map(|&s| perm[s as usize]).collect());
            let pb = seq(1, 3, b.iter().map(|&s| perm[s as usize]).collect());
            let m = estimate_machine(&pa, &pb, 1).unwrap();
            for row in &m.pi {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            prop_assert!((compute_lambda(&m) - base).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_streams_have_near_uniform_rows_and_small_lambda() {
        let sa = seq(0, 3, uniform_symbols(10_000, 3, 4));
        let sb = seq(1, 3, uniform_symbols(10_000, 3, 5));
        let m = estimate_machine(&sa, &sb, 1).unwrap();
        for (row, &c) in m.pi.iter().zip(&m.state_counts) {
            for &p in row {
                assert!((p - 1.0 / 3.0).abs() <= 3.0 / (c as f64).sqrt());
            }
        }
        assert!(compute_lambda(&m) <= 0.05);
    }

    #[test]
    fn deterministic_copy_is_identity_like() {
        let a = uniform_symbols(10_000, 3, 6);
        let mut b = vec![0u8; a.len()];
        b[1..].copy_from_slice(&a[..a.len() - 1]);
        let m = estimate_machine(&seq(0, 3, a), &seq(1, 3, b), 1).unwrap();
        for (state, row) in m.states.iter().zip(&m.pi) {
            assert!(row[*state as usize] > 0.99);
        }
        let l = compute_lambda(&m);
        assert!((l - 1.0).abs() <= 0.02, "{l}");
    }

    #[test]
    fn machine_counts_match_bigram_oracle() {
        // AR(1)-derived stream
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut x = vec![0.0f64; 5000];
        for t in 1..x.len() {
            x[t] = 0.7 * x[t - 1] + rng.sample::<f64, _>(StandardNormal);
        }
        let scheme = fit_partition(&x, 3, PartitionKind::Mep).unwrap();
        let s = symbolize(0, &x, &scheme).unwrap();
        let m = estimate_machine(&s, &s, 1).unwrap();
        let mut bigram = [[0u64; 3]; 3];
        for w in s.symbols.windows(2) {
            bigram[w[0] as usize][w[1] as usize] += 1;
        }
        for (state, row) in m.states.iter().zip(&m.counts) {
            assert_eq!(row.as_slice(), &bigram[*state as usize]);
        }
        assert_eq!(m.states.len(), 3);
    }

    #[test]
    fn depth_two_words_and_dropped_states() {
        // Source alternates 0,1 so only words 01 and 10 appear.
        let a: Vec<u8> = (0..200).map(|t| (t % 2) as u8).collect();
        let b = uniform_symbols(200, 3, 8);
        let m = estimate_machine(&seq(0, 3, a), &seq(1, 3, b), 2).unwrap();
        assert_eq!(m.states, vec![1, 3]);
        assert!(m.state_counts.iter().all(|&c| c > 0));
        assert!(estimate_machine(&seq(0, 3, vec![0; 50]), &seq(1, 3, vec![0; 50]), 2).is_err());
        assert!(estimate_machine(&seq(0, 3, vec![0; 50]), &seq(1, 3, vec![0; 49]), 1).is_err());
    }

    #[test]
    fn window_counts_and_additivity() {
        assert_eq!(window_count(1000, 200, 100), 9);
        assert_eq!(window_count(1000, 200, 200), 5);
        let a = uniform_symbols(1000, 3, 9);
        let b = uniform_symbols(1000, 3, 10);
        let mut whole = vec![0u64; 9];
        count_table(&a, 3, &b, 3, 1, 0, 1000, &mut whole);
        let mut sum = vec![0u64; 9];
        let mut part = vec![0u64; 9];
        for w in 0..5 {
            let start = w * 200;
            count_table(&a, 3, &b, 3, 1, start + 1, start + 200, &mut part);
            sum.iter_mut().zip(&part).for_each(|(s, p)| *s += p);
        }
        // Transitions crossing window boundaries (state at 199, symbol at 200, ...)
        for boundary in [200, 400, 600, 800] {
            sum[a[boundary - 1] as usize * 3 + b[boundary] as usize] += 1;
        }
        assert_eq!(sum, whole);
    }

    #[test]
    fn binarize_conventions() {
        let g = PatternGraph {
            n: 2,
            window_start: 0,
            window_len: 10,
            lambda: vec![0.0, 0.0, 0.0, 0.0],
        };
        assert_eq!(binarize(&g, &[0.1; 4]).unwrap().bits, vec![0; 4]);
        let g = PatternGraph {
            lambda: vec![0.1, 0.3, 0.05, 0.2],
            ..g
        };
        assert_eq!(binarize(&g, &[0.1, 0.4, 0.1, 0.2]).unwrap().bits, vec![1, 0, 0, 1]);
        assert!(binarize(&g, &[0.1; 3]).is_err());
    }

    #[test]
    fn equal_z_boundary_leans_toward_the_tight_cluster() {
        let s = two_means_split(&[0.0, 0.02, 0.3, 0.5]).unwrap();
        assert!((s.lo - 0.01).abs() < 1e-12 && (s.hi - 0.4).abs() < 1e-12);
        assert!((s.sd_lo - 0.01).abs() < 1e-12 && (s.sd_hi - 0.1).abs() < 1e-12);
        assert!((s.equal_z() - (0.01 + 0.39 * 0.01 / 0.11)).abs() < 1e-12);
        assert!((s.midpoint() - 0.205).abs() < 1e-12);
    }

    #[test]
    fn pooled_and_per_pattern_scopes() {
        // pattern 0 always near 0.3, pattern 1 near 0 or 0.3
        let graphs: Vec<PatternGraph> = (0..8)
            .map(|i| PatternGraph {
                n: 1,
                window_start: 0,
                window_len: 1,
                lambda: vec![0.3 + 0.001 * i as f64, if i % 2 == 0 { 0.0 } else { 0.3 }],
            })
            .collect();
        let pooled = fit_thresholds(&graphs, &ThresholdPolicy::default()).unwrap();
        assert_eq!(pooled[0], pooled[1]);
        assert!(pooled[0] > 0.0 && pooled[0] < 0.3);
        let per = fit_thresholds(&graphs, &ThresholdPolicy::per_pattern_midpoint()).unwrap();
        assert_eq!(per[0], 0.1);
        assert!((per[1] - 0.15).abs() < 1e-12);
    }

    #[test]
    fn two_means_split_picks_the_best_cut() {
        let (lo, hi) = two_means(&[0.0, 0.01, 0.02, 0.5, 0.51]).unwrap();
        assert!((lo - 0.01).abs() < 1e-12 && (hi - 0.505).abs() < 1e-12);
        assert!(two_means(&[0.3, 0.3, 0.3]).is_none());
        let g = |v: f64| PatternGraph {
            n: 1,
            window_start: 0,
            window_len: 1,
            lambda: vec![v],
        };
        let graphs: Vec<_> = [0.0, 0.02, 0.4, 0.42].into_iter().map(g).collect();
        for policy in [ThresholdPolicy::default(), ThresholdPolicy::per_pattern_midpoint()] {
            let t = fit_thresholds(&graphs, &policy).unwrap();
            assert!((t[0] - 0.21).abs() < 1e-12);
            let flat: Vec<_> = [0.30, 0.31, 0.32].into_iter().map(g).collect();
            assert_eq!(fit_thresholds(&flat, &policy).unwrap(), vec![0.1]);
        }
    }
}
