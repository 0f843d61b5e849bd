//! Sequential state switching: greedily flip pattern bits to walk the RBM free
//! energy of an anomalous vector down to the nominal reference. The flipped
//! patterns, in flip order, are the root causes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rbm::{softplus, FreeEnergyReference, RbmModel};
use crate::Pattern;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct S3Config {
    /// A flip must lower the free energy by more than this.
    pub eps_improve: f64,
    /// Stop once the mean `F <= F̃ + kappa * spread`, where the spread is the
    /// nominal spread of a mean over the batch size.
    pub kappa: f64,
    /// Maximum number of flips; `None` means `L`.
    pub budget: Option<usize>,
    /// Minimize the mean free energy of a batch of windows with one shared
    /// flip set instead of searching each window separately.
    pub batch: bool,
}

impl Default for S3Config {
    fn default() -> Self {
        S3Config {
            eps_improve: 1e-6,
            kappa: 2.0,
            budget: None,
            batch: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    NoImprovement,
    ReachedNominal,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flip {
    pub pattern: Pattern,
    #[serde(rename = "deltaF")]
    pub delta_f: f64,
}

/// Result of one root-cause search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootCauseReport {
    pub method: String,
    /// Window index, or `None` for a case-level (batch) search.
    pub window: Option<usize>,
    pub flips: Vec<Flip>,
    #[serde(rename = "F_start")]
    pub f_start: f64,
    #[serde(rename = "F_end")]
    pub f_end: f64,
    #[serde(rename = "F_tilde")]
    pub f_tilde: f64,
    pub stopped_by: StopReason,
}

impl RootCauseReport {
    pub fn patterns(&self) -> Vec<Pattern> {
        self.flips.iter().map(|f| f.pattern).collect()
    }
}

fn check_bits(model: &RbmModel, v: &[u8]) -> Result<()> {
    if v.len() != model.n_visible() {
        return Err(Error::shape(format!(
            "vector has length {}, model expects {}",
            v.len(),
            model.n_visible()
        )));
    }
    Ok(())
}

/// `F(v*)` where `v*` is `v` with the bits in `flip_set` inverted.
pub fn switched_free_energy(model: &RbmModel, v: &[u8], flip_set: &[usize]) -> Result<f64> {
    check_bits(model, v)?;
    let mut w = v.to_vec();
    for &i in flip_set {
        let bit = w.get_mut(i).ok_or_else(|| Error::invalid(format!("pattern index {i} out of range")))?;
        *bit ^= 1;
    }
    model.free_energy(&w)
}

/// Hidden pre-activations of one vector, updated in place as bits flip.
struct State {
    bits: Vec<u8>,
    hidden: Vec<f64>,
    visible_term: f64,
}

impl State {
    fn new(model: &RbmModel, v: &[u8]) -> Self {
        let hidden = model.hidden_input(v).to_vec();
        let visible_term = v.iter().zip(&model.visible_bias).map(|(&b, &a)| f64::from(b) * a).sum();
        State {
            bits: v.to_vec(),
            hidden,
            visible_term,
        }
    }

    fn free_energy(&self) -> f64 {
        -self.visible_term - self.hidden.iter().map(|&x| softplus(x)).sum::<f64>()
    }

    fn sign(&self, i: usize) -> f64 {
        if self.bits[i] == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Free energy after flipping bit `i`, without applying it.
    fn flipped(&self, model: &RbmModel, i: usize) -> f64 {
        let d = self.sign(i);
        let col = model.weights.column(i);
        let hidden: f64 = self.hidden.iter().zip(col.iter()).map(|(&x, &w)| softplus(x + d * w)).sum();
        -(self.visible_term + d * model.visible_bias[i]) - hidden
    }

    fn apply(&mut self, model: &RbmModel, i: usize) {
        let d = self.sign(i);
        for (x, &w) in self.hidden.iter_mut().zip(model.weights.column(i).iter()) {
            *x += d * w;
        }
        self.visible_term += d * model.visible_bias[i];
        self.bits[i] ^= 1;
    }
}

/// Greedy search on one window.
pub fn s3_search(
    model: &RbmModel,
    v: &[u8],
    reference: &FreeEnergyReference,
    config: &S3Config,
) -> Result<RootCauseReport> {
    let mut report = s3_search_batch(model, std::slice::from_ref(&v.to_vec()), reference, &S3Config {
        batch: true,
        ..config.clone()
    })?;
    report.window = Some(0);
    Ok(report)
}

/// Greedy search over a batch of windows sharing one flip set; the objective
/// is the mean free energy. A batch of one is the per-window search.
pub fn s3_search_batch(
    model: &RbmModel,
    vectors: &[Vec<u8>],
    reference: &FreeEnergyReference,
    config: &S3Config,
) -> Result<RootCauseReport> {
    if vectors.is_empty() {
        return Err(Error::invalid("no vectors to search"));
    }
    for v in vectors {
        check_bits(model, v)?;
    }
    let l = model.n_visible();
    let n = (l as f64).sqrt().round() as usize;
    let pattern = |i: usize| if n * n == l { Pattern::from_index(i, n) } else { Pattern::new(0, i) };
    let scale = 1.0 / vectors.len() as f64;
    let mut states: Vec<State> = vectors.iter().map(|v| State::new(model, v)).collect();
    let objective = |states: &[State]| states.iter().map(State::free_energy).sum::<f64>() * scale;
    let target = reference.f_tilde + config.kappa * reference.spread(vectors.len());
    let budget = config.budget.unwrap_or(l).min(l);
    let mut flipped = vec![false; l];
    let mut current = objective(&states);
    let f_start = current;
    let mut flips = Vec::new();
    let stopped_by = loop {
        if current <= target {
            break StopReason::ReachedNominal;
        }
        if flips.len() >= budget {
            break StopReason::Budget;
        }
        let mut best: Option<(usize, f64)> = None;
        for i in (0..l).filter(|&i| !flipped[i]) {
            let f = states.iter().map(|s| s.flipped(model, i)).sum::<f64>() * scale;
            if best.is_none_or(|(_, b)| f < b) {
                best = Some((i, f));
            }
        }
        match best {
            Some((i, f)) if current - f > config.eps_improve => {
                for s in states.iter_mut() {
                    s.apply(model, i);
                }
                flipped[i] = true;
                // Recompute from the updated state so F_end has no drift.
                let exact = objective(&states);
                flips.push(Flip {
                    pattern: pattern(i),
                    delta_f: exact - current,
                });
                current = exact;
            }
            _ => break StopReason::NoImprovement,
        }
    };
    Ok(RootCauseReport {
        method: "s3".to_string(),
        window: None,
        flips,
        f_start,
        f_end: current,
        f_tilde: reference.f_tilde,
        stopped_by,
    })
}

/// Per-window search over every vector.
pub fn s3_search_windows(
    model: &RbmModel,
    vectors: &[Vec<u8>],
    reference: &FreeEnergyReference,
    config: &S3Config,
) -> Result<Vec<RootCauseReport>> {
    vectors
        .iter()
        .enumerate()
        .map(|(w, v)| {
            let mut r = s3_search(model, v, reference, config)?;
            r.window = Some(w);
            Ok(r)
        })
        .collect()
}

pub const ORACLE_MAX_BITS: usize = 12;

/// Flip set minimizing `F(v*)` over every subset of size at most `max_size`.
/// Ties go to the smaller set, then the lexicographically smaller one.
pub fn exhaustive_oracle(model: &RbmModel, v: &[u8], max_size: Option<usize>) -> Result<Vec<usize>> {
    check_bits(model, v)?;
    let l = v.len();
    if l > ORACLE_MAX_BITS && max_size.is_none() {
        return Err(Error::invalid(format!(
            "{l} bits is too many to enumerate without a subset-size bound"
        )));
    }
    let max_size = max_size.unwrap_or(l).min(l);
    let mut best = (model.free_energy(v)?, Vec::new());
    let mut buf = v.to_vec();
    // Subsets by increasing size, each size in lexicographic order, so the
    // first strict improvement wins every tie.
    for size in 1..=max_size {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            for &i in &idx {
                buf[i] ^= 1;
            }
            let f = model.free_energy(&buf)?;
            for &i in &idx {
                buf[i] ^= 1;
            }
            if f < best.0 {
                best = (f, idx.clone());
            }
            // next combination
            let mut k = size;
            while k > 0 && idx[k - 1] == l - size + k - 1 {
                k -= 1;
            }
            if k == 0 {
                break;
            }
            idx[k - 1] += 1;
            for j in k..size {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    Ok(best.1)
}
