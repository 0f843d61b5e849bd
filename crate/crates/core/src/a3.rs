//! Artificial anomaly association: a multi-label MLP trained on nominal pattern
//! vectors with injected bit flips. Its output is an indicator label, 1 for a
//! normal pattern and 0 for an anomalous one.

use ndarray::{Array1, Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rbm::sigmoid;

/// How corrupted samples are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlipConfig {
    /// Flip count `k` is uniform on `min_flips..=max_flips`.
    pub min_flips: usize,
    pub max_flips: usize,
    /// Share of samples left unmodified.
    pub clean_fraction: f64,
}

impl Default for FlipConfig {
    fn default() -> Self {
        FlipConfig {
            min_flips: 1,
            max_flips: 4,
            clean_fraction: 0.2,
        }
    }
}

fn bits_to_string(bits: &[u8]) -> String {
    bits.iter().map(|&b| if b == 0 { '0' } else { '1' }).collect()
}

fn string_to_bits(s: &str) -> Result<Vec<u8>> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            other => Err(Error::invalid(format!("bit string has '{other}'"))),
        })
        .collect()
}

mod bit_rows {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(rows: &[Vec<u8>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(rows.iter().map(|r| super::bits_to_string(r)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<u8>>, D::Error> {
        let rows = Vec::<String>::deserialize(d)?;
        rows.iter()
            .map(|r| super::string_to_bits(r).map_err(serde::de::Error::custom))
            .collect()
    }
}

/// Corrupted inputs paired with indicator labels. Rows are bit strings in the
/// same row-major pattern order as the feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipCorpus {
    #[serde(rename = "L")]
    pub l: usize,
    pub count: usize,
    pub seed: u64,
    pub flip: FlipConfig,
    pub samples_per_vector: usize,
    #[serde(with = "bit_rows")]
    pub inputs: Vec<Vec<u8>>,
    #[serde(with = "bit_rows")]
    pub labels: Vec<Vec<u8>>,
    /// Index of the nominal vector each sample came from.
    pub sources: Vec<usize>,
}

/// `samples_per_vector` samples from every nominal vector: each is clean with
/// probability `clean_fraction`, else has `k` distinct random bits flipped.
pub fn generate_flip_corpus(
    nominal: &[Vec<u8>],
    flip: &FlipConfig,
    samples_per_vector: usize,
    seed: u64,
) -> Result<FlipCorpus> {
    let l = nominal.first().map(Vec::len).ok_or_else(|| Error::invalid("no nominal vectors"))?;
    if l == 0 || nominal.iter().any(|v| v.len() != l) {
        return Err(Error::shape("nominal vectors must share a non-zero length"));
    }
    if flip.min_flips > flip.max_flips || flip.max_flips > l {
        return Err(Error::invalid(format!(
            "flip range {}..={} invalid for L = {l}",
            flip.min_flips, flip.max_flips
        )));
    }
    if !(0.0..=1.0).contains(&flip.clean_fraction) {
        return Err(Error::invalid("clean fraction must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = nominal.len() * samples_per_vector;
    let mut inputs = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut sources = Vec::with_capacity(count);
    for (src, v) in nominal.iter().enumerate() {
        for _ in 0..samples_per_vector {
            let mut x = v.clone();
            let mut y = vec![1u8; l];
            let clean = rng.random::<f64>() < flip.clean_fraction;
            let k = rng.random_range(flip.min_flips..=flip.max_flips);
            if !clean {
                for i in index::sample(&mut rng, l, k) {
                    x[i] ^= 1;
                    y[i] = 0;
                }
            }
            inputs.push(x);
            labels.push(y);
            sources.push(src);
        }
    }
    Ok(FlipCorpus {
        l,
        count,
        seed,
        flip: flip.clone(),
        samples_per_vector,
        inputs,
        labels,
        sources,
    })
}

/// Training and validation sizes for a corpus of `count` samples.
pub fn split_sizes(count: usize, validation_fraction: f64) -> (usize, usize) {
    let val = (count as f64 * validation_fraction).round() as usize;
    (count - val, val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: vec![500, 500, 500],
            learning_rate: 0.1,
            batch_size: 10,
            max_epochs: 200,
            patience: 10,
            validation_fraction: 0.25,
            seed: 0,
        }
    }
}

/// `out = weights . input + bias`; weights are `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

/// ReLU hidden layers, logistic outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    pub config: MlpConfig,
    pub history: Vec<EpochStats>,
    /// Epoch (1-based) whose parameters were kept; 0 for an untrained model.
    pub best_epoch: usize,
}

struct Pass {
    /// Input to each layer, then the final logits.
    activations: Vec<Array2<f64>>,
}

impl MlpModel {
    /// He-initialized network with the given widths (input first).
    pub fn new(sizes: &[usize], config: MlpConfig) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid("network needs at least two non-empty layers"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive std");
                Layer {
                    weights: Array2::from_shape_simple_fn((w[1], w[0]), || normal.sample(&mut rng)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(MlpModel {
            layers,
            config,
            history: Vec::new(),
            best_epoch: 0,
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.nrows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.n_inputs())
            .chain(self.layers.iter().map(|l| l.weights.nrows()))
            .collect()
    }

    fn forward(&self, x: Array2<f64>) -> Pass {
        let mut activations = vec![x];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = activations[i].dot(&layer.weights.t()) + &layer.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            activations.push(z);
        }
        Pass { activations }
    }

    /// Mean per-element cross-entropy and its gradient for one batch.
    fn loss_and_gradient(&self, x: Array2<f64>, y: &Array2<f64>) -> (f64, Vec<Layer>) {
        let pass = self.forward(x);
        let logits = &pass.activations[self.layers.len()];
        let scale = 1.0 / logits.len() as f64;
        let loss = cross_entropy(logits, y) * scale;
        let mut delta = (logits.mapv(sigmoid) - y) * scale;
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let input = &pass.activations[i];
            grads.push(Layer {
                weights: delta.t().dot(input),
                bias: delta.sum_axis(Axis(0)),
            });
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].weights);
                // ReLU derivative from the layer's own (rectified) output
                back.zip_mut_with(input, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
        }
        grads.reverse();
        (loss, grads)
    }

    /// Per-element logistic outputs.
    pub fn predict_proba(&self, v: &[u8]) -> Result<Vec<f64>> {
        if v.len() != self.n_inputs() {
            return Err(Error::shape(format!(
                "vector has length {}, network expects {}",
                v.len(),
                self.n_inputs()
            )));
        }
        let x = Array2::from_shape_fn((1, v.len()), |(_, j)| f64::from(v[j]));
        let pass = self.forward(x);
        Ok(pass.activations[self.layers.len()].iter().map(|&z| sigmoid(z)).collect())
    }

    fn mean_loss(&self, x: &Array2<f64>, y: &Array2<f64>) -> f64 {
        if x.nrows() == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for start in (0..x.nrows()).step_by(1024) {
            let end = (start + 1024).min(x.nrows());
            let rows = x.slice(ndarray::s![start..end, ..]).to_owned();
            let logits = &self.forward(rows).activations[self.layers.len()];
            total += cross_entropy(logits, &y.slice(ndarray::s![start..end, ..]).to_owned());
        }
        total / y.len() as f64
    }
}

/// Summed numerically stable binary cross-entropy on logits.
fn cross_entropy(logits: &Array2<f64>, y: &Array2<f64>) -> f64 {
    logits
        .iter()
        .zip(y.iter())
        .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
        .sum()
}

fn rows_matrix(rows: &[&Vec<u8>], width: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), width), |(i, j)| f64::from(rows[i][j]))
}

/// Mini-batch SGD with early stopping; the best validation checkpoint is kept.
pub fn train_mlp(corpus: &FlipCorpus, config: &MlpConfig) -> Result<MlpModel> {
    if corpus.inputs.len() != corpus.labels.len() || corpus.inputs.is_empty() {
        return Err(Error::invalid("corpus needs equal, non-empty inputs and labels"));
    }
    let l = corpus.l;
    if corpus.inputs.iter().chain(&corpus.labels).any(|r| r.len() != l) {
        return Err(Error::shape(format!("every corpus row must have length {l}")));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) || !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(Error::invalid("batch size, learning rate or validation fraction out of range"));
    }
    let sizes: Vec<usize> = std::iter::once(l).chain(config.hidden.iter().copied()).chain([l]).collect();
    let mut model = MlpModel::new(&sizes, config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..corpus.inputs.len()).collect();
    order.shuffle(&mut rng);
    let (n_train, _) = split_sizes(order.len(), config.validation_fraction);
    let (train_idx, val_idx) = order.split_at(n_train);
    let pick = |idx: &[usize], rows: &Vec<Vec<u8>>| rows_matrix(&idx.iter().map(|&i| &rows[i]).collect::<Vec<_>>(), l);
    let val_x = pick(val_idx, &corpus.inputs);
    let val_y = pick(val_idx, &corpus.labels);
    let mut train_idx = train_idx.to_vec();
    let mut best = (f64::INFINITY, model.layers.clone(), 0);
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train_idx.chunks(config.batch_size) {
            let x = pick(batch, &corpus.inputs);
            let y = pick(batch, &corpus.labels);
            let (loss, grads) = model.loss_and_gradient(x, &y);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("loss {loss} in epoch {epoch}")));
            }
            epoch_loss += loss * batch.len() as f64;
            for (layer, g) in model.layers.iter_mut().zip(grads) {
                layer.weights.scaled_add(-config.learning_rate, &g.weights);
                layer.bias.scaled_add(-config.learning_rate, &g.bias);
            }
        }
        if model.layers.iter().any(|l| l.weights.iter().chain(l.bias.iter()).any(|x| !x.is_finite())) {
            return Err(Error::Diverged(format!("non-finite parameters after epoch {epoch}")));
        }
        let train_loss = epoch_loss / train_idx.len().max(1) as f64;
        // Without a validation split, early stopping watches the training loss.
        let validation_loss = if val_idx.is_empty() { train_loss } else { model.mean_loss(&val_x, &val_y) };
        if !validation_loss.is_finite() {
            return Err(Error::Diverged(format!("validation loss {validation_loss} in epoch {epoch}")));
        }
        model.history.push(EpochStats {
            epoch,
            train_loss,
            validation_loss,
        });
        log::debug!("a3 epoch {epoch}: train {train_loss:.5} validation {validation_loss:.5}");
        if validation_loss < best.0 {
            best = (validation_loss, model.layers.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    model.layers = best.1;
    model.best_epoch = best.2;
    Ok(model)
}

/// Indicator label: 1 where the output is at least `threshold`, else 0.
pub fn infer(model: &MlpModel, v: &[u8], threshold: f64) -> Result<Vec<u8>> {
    Ok(model
        .predict_proba(v)?
        .into_iter()
        .map(|p| u8::from(p >= threshold))
        .collect())
}

/// Positions an indicator label marks anomalous.
pub fn anomalous_positions(label: &[u8]) -> Vec<usize> {
    label.iter().enumerate().filter(|(_, &b)| b == 0).map(|(i, _)| i).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFile {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpFile {
    pub hidden_activation: String,
    pub output_activation: String,
    pub layers: Vec<LayerFile>,
    pub training: MlpConfig,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

impl MlpFile {
    pub fn new(model: &MlpModel) -> Self {
        MlpFile {
            hidden_activation: "relu".into(),
            output_activation: "sigmoid".into(),
            layers: model
                .layers
                .iter()
                .map(|l| LayerFile {
                    inputs: l.weights.ncols(),
                    outputs: l.weights.nrows(),
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
            training: model.config.clone(),
            history: model.history.clone(),
            best_epoch: model.best_epoch,
        }
    }

    pub fn model(&self) -> Result<MlpModel> {
        if self.layers.is_empty() {
            return Err(Error::invalid("model file has no layers"));
        }
        let mut layers = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.outputs {
                return Err(Error::shape(format!("layer {i} bias length {}", l.bias.len())));
            }
            if i > 0 && self.layers[i - 1].outputs != l.inputs {
                return Err(Error::shape(format!("layer {i} input width {} does not chain", l.inputs)));
            }
            if l.weights.iter().chain(&l.bias).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
            let weights = Array2::from_shape_vec((l.outputs, l.inputs), l.weights.clone())
                .map_err(|e| Error::shape(format!("layer {i}: {e}")))?;
            layers.push(Layer {
                weights,
                bias: Array1::from(l.bias.clone()),
            });
        }
        Ok(MlpModel {
            layers,
            config: self.training.clone(),
            history: self.history.clone(),
            best_epoch: self.best_epoch,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(hidden: Vec<usize>) -> MlpConfig {
        MlpConfig {
            hidden,
            max_epochs: 60,
            seed: 3,
            ..MlpConfig::default()
        }
    }

    #[test]
    fn clean_range_gives_all_ones() {
        let flip = FlipConfig {
            min_flips: 0,
            max_flips: 0,
            clean_fraction: 0.0,
        };
        let c = generate_flip_corpus(&[vec![1, 0, 1], vec![0, 0, 0]], &flip, 4, 1).unwrap();
        assert_eq!(c.count, 8);
        assert!(c.labels.iter().flatten().all(|&b| b == 1));
    }

    #[test]
    fn corpus_is_sound_and_deterministic() {
        let nominal = vec![vec![1, 0, 1, 1, 0, 0, 1, 0, 1], vec![0, 1, 1, 0, 0, 1, 0, 1, 0]];
        let c = generate_flip_corpus(&nominal, &FlipConfig::default(), 200, 9).unwrap();
        let mut clean = 0;
        for ((x, y), &s) in c.inputs.iter().zip(&c.labels).zip(&c.sources) {
            for i in 0..9 {
                assert_eq!(y[i] == 0, x[i] != nominal[s][i]);
            }
            let k = y.iter().filter(|&&b| b == 0).count();
            assert!(k <= 4);
            clean += usize::from(k == 0);
        }
        let share = clean as f64 / c.count as f64;
        assert!((share - 0.2).abs() < 0.05, "{share}");
        assert_eq!(c, generate_flip_corpus(&nominal, &FlipConfig::default(), 200, 9).unwrap());
        let too_many = FlipConfig {
            max_flips: 10,
            ..FlipConfig::default()
        };
        assert!(generate_flip_corpus(&nominal, &too_many, 1, 0).is_err());
        assert!(generate_flip_corpus(&[], &FlipConfig::default(), 1, 0).is_err());
    }

    #[test]
    fn corpus_json_round_trip() {
        let c = generate_flip_corpus(&[vec![1, 0, 1, 1]], &FlipConfig::default(), 5, 2).unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"L\":4"));
        assert_eq!(serde_json::from_str::<FlipCorpus>(&text).unwrap(), c);
    }

    #[test]
    fn paper_scale_split() {
        assert_eq!(split_sizes(296_400, 0.25), (222_300, 74_100));
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut model = MlpModel::new(&[4, 5, 4], small_config(vec![5])).unwrap();
        // keep pre-activations away from the ReLU kink
        for b in model.layers[0].bias.iter_mut() {
            *b = 0.3;
        }
        let x = Array2::from_shape_vec((3, 4), vec![1., 0., 1., 1., 0., 1., 0., 0., 1., 1., 1., 0.]).unwrap();
        let y = Array2::from_shape_vec((3, 4), vec![1., 1., 0., 1., 0., 1., 1., 1., 1., 0., 1., 1.]).unwrap();
        let (_, grads) = model.loss_and_gradient(x.clone(), &y);
        let h = 1e-5;
        for (li, g) in grads.iter().enumerate() {
            for idx in 0..g.weights.len() {
                let (r, c) = (idx / g.weights.ncols(), idx % g.weights.ncols());
                let orig = model.layers[li].weights[(r, c)];
                model.layers[li].weights[(r, c)] = orig + h;
                let up = model.loss_and_gradient(x.clone(), &y).0;
                model.layers[li].weights[(r, c)] = orig - h;
                let down = model.loss_and_gradient(x.clone(), &y).0;
                model.layers[li].weights[(r, c)] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = g.weights[(r, c)];
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                assert!((numeric - analytic).abs() / denom < 1e-4 || (numeric - analytic).abs() < 1e-9);
            }
            for r in 0..g.bias.len() {
                let orig = model.layers[li].bias[r];
                model.layers[li].bias[r] = orig + h;
                let up = model.loss_and_gradient(x.clone(), &y).0;
                model.layers[li].bias[r] = orig - h;
                let down = model.loss_and_gradient(x.clone(), &y).0;
                model.layers[li].bias[r] = orig;
                let numeric = (up - down) / (2.0 * h);
                assert!((numeric - g.bias[r]).abs() < 1e-4 * numeric.abs().max(1e-5));
            }
        }
    }

    #[test]
    fn single_flip_position_toy_is_learned_exactly() {
        // Only bit 2 is ever flipped, so its value alone determines the label.
        let nominal = vec![vec![1, 0, 1, 0]];
        let mut corpus = generate_flip_corpus(&nominal, &FlipConfig { min_flips: 0, max_flips: 0, clean_fraction: 1.0 }, 100, 0).unwrap();
        for (i, (x, y)) in corpus.inputs.iter_mut().zip(corpus.labels.iter_mut()).enumerate() {
            if i % 2 == 1 {
                x[2] = 0;
                y[2] = 0;
            }
        }
        let model = train_mlp(&corpus, &small_config(vec![8])).unwrap();
        assert_eq!(infer(&model, &[1, 0, 1, 0], 0.5).unwrap(), vec![1, 1, 1, 1]);
        assert_eq!(infer(&model, &[1, 0, 0, 0], 0.5).unwrap(), vec![1, 1, 0, 1]);
        assert_eq!(anomalous_positions(&[1, 1, 0, 1]), vec![2]);
    }

    #[test]
    fn best_checkpoint_and_determinism() {
        let nominal = vec![vec![1, 0, 1, 1, 0, 0, 1, 0, 1], vec![0, 1, 1, 0, 0, 1, 0, 1, 0]];
        let corpus = generate_flip_corpus(&nominal, &FlipConfig::default(), 100, 4).unwrap();
        let cfg = small_config(vec![16, 16]);
        let model = train_mlp(&corpus, &cfg).unwrap();
        let best = model.history[model.best_epoch - 1].validation_loss;
        assert!(model.history.iter().all(|e| e.validation_loss >= best));
        let p = model.predict_proba(&nominal[0]).unwrap();
        assert_eq!(p.len(), 9);
        assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(infer(&model, &nominal[0], 0.5).unwrap(), vec![1; 9]);
        assert_eq!(train_mlp(&corpus, &cfg).unwrap(), model);
        assert!(infer(&model, &[1, 0], 0.5).is_err());
    }

    #[test]
    fn exploding_learning_rate_is_reported() {
        let corpus = generate_flip_corpus(&[vec![1, 0, 1, 1]], &FlipConfig::default(), 20, 4).unwrap();
        let cfg = MlpConfig {
            learning_rate: f64::INFINITY,
            ..small_config(vec![4])
        };
        assert!(matches!(train_mlp(&corpus, &cfg), Err(Error::Diverged(_))));
    }

    #[test]
    fn model_file_round_trip() {
        let model = MlpModel::new(&[4, 3, 4], small_config(vec![3])).unwrap();
        let file = MlpFile::new(&model);
        let text = serde_json::to_string(&file).unwrap();
        let back: MlpFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.model().unwrap(), model);
        let mut broken = back.clone();
        broken.layers[1].inputs = 5;
        assert!(broken.model().is_err());
    }
}
