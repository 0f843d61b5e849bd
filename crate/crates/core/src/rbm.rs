//! Bernoulli-Bernoulli restricted Boltzmann machine over binary pattern
//! vectors, trained with CD-k, plus free-energy reference statistics and
//! KLD-based anomaly detection.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RbmConfig {
    /// `None` means one hidden unit per visible unit.
    pub n_hidden: Option<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub cd_steps: usize,
    pub batch_size: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for RbmConfig {
    fn default() -> Self {
        RbmConfig {
            n_hidden: None,
            epochs: 50,
            learning_rate: 0.05,
            cd_steps: 1,
            batch_size: 10,
            init_std: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbmModel {
    /// `n_hidden x n_visible`.
    pub weights: Array2<f64>,
    pub visible_bias: Array1<f64>,
    pub hidden_bias: Array1<f64>,
    pub config: RbmConfig,
    pub reconstruction_error: f64,
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn to_f64(v: &[u8]) -> Array1<f64> {
    v.iter().map(|&b| f64::from(b)).collect()
}

impl RbmModel {
    pub fn new(n_visible: usize, n_hidden: usize) -> Self {
        RbmModel {
            weights: Array2::zeros((n_hidden, n_visible)),
            visible_bias: Array1::zeros(n_visible),
            hidden_bias: Array1::zeros(n_hidden),
            config: RbmConfig {
                n_hidden: Some(n_hidden),
                ..RbmConfig::default()
            },
            reconstruction_error: 0.0,
        }
    }

    pub fn n_visible(&self) -> usize {
        self.visible_bias.len()
    }

    pub fn n_hidden(&self) -> usize {
        self.hidden_bias.len()
    }

    fn check_visible(&self, len: usize) -> Result<()> {
        if len != self.n_visible() {
            return Err(Error::shape(format!(
                "visible vector has length {len}, model expects {}",
                self.n_visible()
            )));
        }
        Ok(())
    }

    /// `c + W v` for a binary `v`.
    pub fn hidden_input(&self, v: &[u8]) -> Array1<f64> {
        let mut x = self.hidden_bias.clone();
        for (i, _) in v.iter().enumerate().filter(|(_, &b)| b != 0) {
            x.scaled_add(1.0, &self.weights.column(i));
        }
        x
    }

    /// `E(v, h) = -h^T W v - b^T v - c^T h`.
    pub fn energy(&self, v: &[u8], h: &[u8]) -> Result<f64> {
        self.check_visible(v.len())?;
        if h.len() != self.n_hidden() {
            return Err(Error::shape(format!(
                "hidden vector has length {}, model expects {}",
                h.len(),
                self.n_hidden()
            )));
        }
        let vf = to_f64(v);
        let hf = to_f64(h);
        let interaction = hf.dot(&self.weights.dot(&vf));
        Ok(-interaction - self.visible_bias.dot(&vf) - self.hidden_bias.dot(&hf))
    }

    /// `F(v) = -b^T v - sum_j softplus(c_j + W_j v)`.
    pub fn free_energy(&self, v: &[u8]) -> Result<f64> {
        self.check_visible(v.len())?;
        Ok(self.free_energy_unchecked(v))
    }

    pub(crate) fn free_energy_unchecked(&self, v: &[u8]) -> f64 {
        let visible: f64 = v
            .iter()
            .zip(self.visible_bias.iter())
            .filter(|(&b, _)| b != 0)
            .map(|(_, &a)| a)
            .sum();
        -visible - self.hidden_input(v).iter().map(|&x| softplus(x)).sum::<f64>()
    }

    pub fn free_energies(&self, vectors: &[Vec<u8>]) -> Result<Vec<f64>> {
        vectors.iter().map(|v| self.free_energy(v)).collect()
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.visible_bias).chain(&self.hidden_bias).all(|v| v.is_finite())
    }
}

/// Sufficient statistics of one phase: `<h v^T>`, `<v>`, `<h>`.
pub(crate) struct PhaseStats {
    pub weights: Array2<f64>,
    pub visible: Array1<f64>,
    pub hidden: Array1<f64>,
}

impl PhaseStats {
    fn zeros(n_hidden: usize, n_visible: usize) -> Self {
        PhaseStats {
            weights: Array2::zeros((n_hidden, n_visible)),
            visible: Array1::zeros(n_visible),
            hidden: Array1::zeros(n_hidden),
        }
    }

    /// Accumulate `weight * (p(h|v) v^T, v, p(h|v))` for a batch of visible rows.
    fn accumulate(&mut self, model: &RbmModel, visible: &Array2<f64>, weight: f64) {
        let hidden = hidden_probs(model, visible);
        self.weights.scaled_add(weight, &hidden.t().dot(visible));
        self.visible.scaled_add(weight, &visible.sum_axis(Axis(0)));
        self.hidden.scaled_add(weight, &hidden.sum_axis(Axis(0)));
    }
}

fn hidden_probs(model: &RbmModel, visible: &Array2<f64>) -> Array2<f64> {
    let mut x = visible.dot(&model.weights.t());
    x += &model.hidden_bias;
    x.mapv_inplace(sigmoid);
    x
}

fn visible_probs(model: &RbmModel, hidden: &Array2<f64>) -> Array2<f64> {
    let mut x = hidden.dot(&model.weights);
    x += &model.visible_bias;
    x.mapv_inplace(sigmoid);
    x
}

fn bernoulli(probs: &Array2<f64>, rng: &mut ChaCha8Rng) -> Array2<f64> {
    probs.mapv(|p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
}

fn batch_matrix(vectors: &[&[u8]], n_visible: usize) -> Array2<f64> {
    let mut m = Array2::zeros((vectors.len(), n_visible));
    for (mut row, v) in m.rows_mut().into_iter().zip(vectors) {
        for (x, &b) in row.iter_mut().zip(v.iter()) {
            *x = f64::from(b);
        }
    }
    m
}

/// CD-k training. Deterministic given `config.seed`
pub fn train(vectors: &[Vec<u8>], config: &RbmConfig) -> Result<RbmModel> {
    let first = vectors.first().ok_or_else(|| Error::invalid("no training vectors"))?;
    let n_visible = first.len();
    if vectors.iter().any(|v| v.len() != n_visible) {
        return Err(Error::shape("training vectors differ in length"));
    }
    if n_visible == 0 || config.batch_size == 0 || config.cd_steps == 0 {
        return Err(Error::invalid("need n_visible, batch_size and cd_steps >= 1"));
    }
    let n_hidden = config.n_hidden.unwrap_or(n_visible);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut model = RbmModel {
        weights: Array2::from_shape_simple_fn((n_hidden, n_visible), || normal.sample(&mut rng)),
        visible_bias: Array1::zeros(n_visible),
        hidden_bias: Array1::zeros(n_hidden),
        config: RbmConfig {
            n_hidden: Some(n_hidden),
            ..config.clone()
        },
        reconstruction_error: 0.0,
    };
    let mut order: Vec<usize> = (0..vectors.len()).collect();
    let mut recon = 0.0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut err_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let rows: Vec<&[u8]> = chunk.iter().map(|&i| vectors[i].as_slice()).collect();
            let v0 = batch_matrix(&rows, n_visible);
            let scale = config.learning_rate / rows.len() as f64;

            let mut positive = PhaseStats::zeros(n_hidden, n_visible);
            positive.accumulate(&model, &v0, 1.0);

            let mut vk = v0.clone();
            for step in 0..config.cd_steps {
                let h = bernoulli(&hidden_probs(&model, &vk), &mut rng);
                let pv = visible_probs(&model, &h);
                if step == 0 {
                    err_sum += (&v0 - &pv).mapv(|d| d * d).sum();
                }
                vk = bernoulli(&pv, &mut rng);
            }
            let mut negative = PhaseStats::zeros(n_hidden, n_visible);
            negative.accumulate(&model, &vk, 1.0);

            model.weights.scaled_add(scale, &(&positive.weights - &negative.weights));
            model.visible_bias.scaled_add(scale, &(&positive.visible - &negative.visible));
            model.hidden_bias.scaled_add(scale, &(&positive.hidden - &negative.hidden));
        }
        recon = err_sum / (vectors.len() * n_visible) as f64;
        if !recon.is_finite() || !model.is_finite() {
            return Err(Error::Diverged(format!("non-finite parameters after epoch {}", epoch + 1)));
        }
        log::debug!("rbm epoch {} reconstruction error {recon:.5}", epoch + 1);
    }
    model.reconstruction_error = recon;
    Ok(model)
}

/// Exact quantities for models small enough to enumerate every visible state.
pub mod exact {
    use super::*;

    pub const MAX_VISIBLE: usize = 20;

    fn all_visible(n: usize) -> impl Iterator<Item = Vec<u8>> {
        (0u64..1 << n).map(move |code| (0..n).map(|i| ((code >> i) & 1) as u8).collect())
    }

    fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
        let v: Vec<f64> = values.collect();
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    /// `log Z = log sum_v exp(-F(v))`.
    pub fn log_partition(model: &RbmModel) -> Result<f64> {
        let n = model.n_visible();
        if n > MAX_VISIBLE {
            return Err(Error::invalid(format!("{n} visible units is too many to enumerate")));
        }
        Ok(log_sum_exp(all_visible(n).map(|v| -model.free_energy_unchecked(&v))))
    }

    /// Mean negative log-likelihood of `data`.
    pub fn nll(model: &RbmModel, data: &[Vec<u8>]) -> Result<f64> {
        let log_z = log_partition(model)?;
        let f: f64 = model.free_energies(data)?.iter().sum();
        Ok(f / data.len() as f64 + log_z)
    }

    /// Gradient of [`nll`] with respect to `(W, b, c)`: data statistics minus
    /// model statistics, negated.
    pub fn nll_gradient(model: &RbmModel, data: &[Vec<u8>]) -> Result<(Array2<f64>, Array1<f64>, Array1<f64>)> {
        let n = model.n_visible();
        let log_z = log_partition(model)?;
        let rows: Vec<&[u8]> = data.iter().map(Vec::as_slice).collect();
        let mut positive = PhaseStats::zeros(model.n_hidden(), n);
        positive.accumulate(model, &batch_matrix(&rows, n), 1.0 / data.len() as f64);
        let mut negative = PhaseStats::zeros(model.n_hidden(), n);
        for v in all_visible(n) {
            let p = (-model.free_energy_unchecked(&v) - log_z).exp();
            negative.accumulate(model, &batch_matrix(&[&v], n), p);
        }
        Ok((
            negative.weights - positive.weights,
            negative.visible - positive.visible,
            negative.hidden - positive.hidden,
        ))
    }

    /// `-log sum_h exp(-E(v, h))` by enumerating every hidden state.
    pub fn free_energy_by_enumeration(model: &RbmModel, v: &[u8]) -> Result<f64> {
        let h = model.n_hidden();
        if h > MAX_VISIBLE {
            return Err(Error::invalid(format!("{h} hidden units is too many to enumerate")));
        }
        let energies = (0u64..1 << h)
            .map(|code| {
                let hv: Vec<u8> = (0..h).map(|j| ((code >> j) & 1) as u8).collect();
                model.energy(v, &hv).map(|e| -e)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(-log_sum_exp(energies.into_iter()))
    }
}

/// Fixed-edge histogram of free energies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// `bins` uniform bins over the value range widened by `pad` of its span on both sides.
    pub fn spanning(values: &[f64], bins: usize, pad: f64) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { lo.abs().max(1.0) };
        let (a, b) = (lo - pad * span, hi + pad * span);
        let edges: Vec<f64> = (0..=bins).map(|k| a + (b - a) * k as f64 / bins as f64).collect();
        let mut h = Histogram {
            counts: vec![0; bins],
            edges,
        };
        h.counts = h.count(values);
        h
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    fn bin(&self, x: f64) -> usize {
        let k = self.edges.partition_point(|&e| e <= x);
        k.saturating_sub(1).min(self.bins() - 1)
    }

    /// Counts of `values` on these edges; out-of-range values fall in the end bins.
    pub fn count(&self, values: &[f64]) -> Vec<u64> {
        let mut counts = vec![0; self.bins()];
        for &x in values {
            counts[self.bin(x)] += 1;
        }
        counts
    }
}

/// `KL(P || Q)` between two count vectors with add-one smoothing.
pub fn kld(p_counts: &[u64], q_counts: &[u64]) -> f64 {
    let bins = p_counts.len() as f64;
    let pn = p_counts.iter().sum::<u64>() as f64 + bins;
    let qn = q_counts.iter().sum::<u64>() as f64 + bins;
    p_counts
        .iter()
        .zip(q_counts)
        .map(|(&p, &q)| {
            let p = (p as f64 + 1.0) / pn;
            let q = (q as f64 + 1.0) / qn;
            p * (p / q).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeStats {
    pub mode: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyReference {
    pub per_mode: Vec<ModeStats>,
    /// `F̃`: the smallest per-mode mean.
    pub f_tilde: f64,
    /// Standard deviation of the mode that attains `f_tilde`.
    pub sigma: f64,
    pub histogram: Option<Histogram>,
    /// KLD above which a batch is flagged.
    pub detection_threshold: f64,
    /// Spread of the mean free energy over `batch_len` consecutive nominal
    /// windows, measured during calibration.
    #[serde(default)]
    pub batch_sigma: Option<f64>,
    #[serde(default)]
    pub batch_len: usize,
}

impl FreeEnergyReference {
    /// Nominal spread of the mean free energy of `batch` windows: `sigma` for
    /// one window, else the calibrated batch spread rescaled to `batch`, else
    /// `sigma / sqrt(batch)`.
    pub fn spread(&self, batch: usize) -> f64 {
        match (batch, self.batch_sigma) {
            (0 | 1, _) => self.sigma,
            (b, Some(bs)) if self.batch_len > 0 => bs * (self.batch_len as f64 / b as f64).sqrt(),
            (b, _) => self.sigma / (b as f64).sqrt(),
        }
    }
}

pub const HISTOGRAM_BINS: usize = 50;
pub const HISTOGRAM_PAD: f64 = 0.2;

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Free-energy statistics of nominal windows. `modes[i]` labels `vectors[i]`;
/// pass `None` to treat everything as one mode.
pub fn nominal_reference(
    model: &RbmModel,
    vectors: &[Vec<u8>],
    modes: Option<&[String]>,
) -> Result<FreeEnergyReference> {
    if vectors.is_empty() {
        return Err(Error::invalid("no nominal vectors"));
    }
    let energies = model.free_energies(vectors)?;
    let labels: Vec<String> = match modes {
        Some(m) if m.len() == vectors.len() => m.to_vec(),
        Some(m) => {
            return Err(Error::shape(format!("{} mode labels for {} vectors", m.len(), vectors.len())))
        }
        None => vec!["nominal".to_string(); vectors.len()],
    };
    let mut names: Vec<&String> = labels.iter().collect();
    names.sort();
    names.dedup();
    let per_mode: Vec<ModeStats> = names
        .into_iter()
        .map(|name| {
            let values: Vec<f64> = energies
                .iter()
                .zip(&labels)
                .filter(|(_, l)| *l == name)
                .map(|(&f, _)| f)
                .collect();
            let (mean, std) = mean_std(&values);
            ModeStats {
                mode: name.clone(),
                count: values.len(),
                mean,
                std,
            }
        })
        .collect();
    let best = per_mode
        .iter()
        .min_by(|a, b| a.mean.total_cmp(&b.mean))
        .expect("at least one mode");
    let histogram = Histogram::spanning(&energies, HISTOGRAM_BINS, HISTOGRAM_PAD);
    Ok(FreeEnergyReference {
        f_tilde: best.mean,
        sigma: best.std,
        per_mode,
        histogram: Some(histogram),
        detection_threshold: f64::INFINITY,
        batch_sigma: None,
        batch_len: 0,
    })
}

/// Set `reference.detection_threshold` to the `quantile` of KLDs between the
/// nominal histogram and bootstrap batches of `batch_len` windows. Each batch
/// is a contiguous block of one nominal group (moving-block bootstrap), so it
/// keeps the dependence between neighbouring windows; groups shorter than
/// `batch_len` are resampled with replacement instead. The spread of the batch
/// means is stored as `batch_sigma`. Groups should come from nominal runs the
/// RBM was not trained on.
pub fn calibrate_threshold(
    reference: &mut FreeEnergyReference,
    groups: &[Vec<f64>],
    batch_len: usize,
    rounds: usize,
    quantile: f64,
    seed: u64,
) -> Result<f64> {
    let hist = reference
        .histogram
        .as_ref()
        .ok_or_else(|| Error::invalid("reference has no histogram"))?;
    let groups: Vec<&Vec<f64>> = groups.iter().filter(|g| !g.is_empty()).collect();
    if groups.is_empty() || batch_len == 0 || rounds == 0 {
        return Err(Error::invalid("calibration needs non-empty groups, batch_len and rounds"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(rounds);
    let mut scores: Vec<f64> = (0..rounds)
        .map(|_| {
            let g = groups[rng.random_range(0..groups.len())];
            let batch: Vec<f64> = if g.len() >= batch_len {
                let start = rng.random_range(0..=g.len() - batch_len);
                g[start..start + batch_len].to_vec()
            } else {
                (0..batch_len).map(|_| g[rng.random_range(0..g.len())]).collect()
            };
            means.push(batch.iter().sum::<f64>() / batch_len as f64);
            kld(&hist.count(&batch), &hist.counts)
        })
        .collect();
    reference.batch_sigma = Some(mean_std(&means).1);
    reference.batch_len = batch_len;
    scores.sort_by(f64::total_cmp);
    let idx = ((quantile * rounds as f64).ceil() as usize).clamp(1, rounds) - 1;
    reference.detection_threshold = scores[idx];
    Ok(scores[idx])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub anomalous: bool,
    pub kld: f64,
    pub free_energies: Vec<f64>,
}

pub fn detect(model: &RbmModel, reference: &FreeEnergyReference, vectors: &[Vec<u8>]) -> Result<Detection> {
    let hist = reference
        .histogram
        .as_ref()
        .ok_or_else(|| Error::invalid("reference has no histogram"))?;
    if vectors.is_empty() {
        return Err(Error::invalid("no test vectors"));
    }
    let free_energies = model.free_energies(vectors)?;
    let score = kld(&hist.count(&free_energies), &hist.counts);
    Ok(Detection {
        anomalous: score > reference.detection_threshold,
        kld: score,
        free_energies,
    })
}

/// On-disk model: row-major weights plus the reference statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbmFile {
    pub n_visible: usize,
    pub n_hidden: usize,
    #[serde(rename = "W")]
    pub weights: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub training: RbmConfig,
    pub reconstruction_error: f64,
    #[serde(default)]
    pub reference: Option<FreeEnergyReference>,
}

impl RbmFile {
    pub fn new(model: &RbmModel, reference: Option<FreeEnergyReference>) -> Self {
        RbmFile {
            n_visible: model.n_visible(),
            n_hidden: model.n_hidden(),
            weights: model.weights.rows().into_iter().map(|r| r.to_vec()).collect(),
            b: model.visible_bias.to_vec(),
            c: model.hidden_bias.to_vec(),
            training: model.config.clone(),
            reconstruction_error: model.reconstruction_error,
            reference,
        }
    }

    pub fn model(&self) -> Result<RbmModel> {
        if self.weights.len() != self.n_hidden
            || self.weights.iter().any(|r| r.len() != self.n_visible)
            || self.b.len() != self.n_visible
            || self.c.len() != self.n_hidden
        {
            return Err(Error::shape("model file dimensions are inconsistent"));
        }
        let flat: Vec<f64> = self.weights.iter().flatten().copied().collect();
        let model = RbmModel {
            weights: Array2::from_shape_vec((self.n_hidden, self.n_visible), flat)
                .map_err(|e| Error::shape(e.to_string()))?,
            visible_bias: Array1::from(self.b.clone()),
            hidden_bias: Array1::from(self.c.clone()),
            config: self.training.clone(),
            reconstruction_error: self.reconstruction_error,
        };
        if !model.is_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(model)
    }
}
