//! Experiment configuration: every tunable of the pipeline with its default,
//! plus the seed derivation and config hash stamped into every artifact.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::a3::{FlipConfig, MlpConfig};
use crate::error::{Error, Result};
use crate::rbm::RbmConfig;
use crate::s3::S3Config;
use crate::stpn::StpnParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorParams {
    /// Samples of each nominal training run.
    pub train_len: usize,
    /// Samples of the nominal training run of the 30-node suite, whose
    /// 900-bit vectors need more windows than the five-node ones.
    pub thirty_node_train_len: usize,
    /// Samples of each anomalous test run.
    pub test_len: usize,
    /// Held-out nominal runs per mode, for detection false-alarm rates.
    pub heldout_runs: usize,
    /// Samples of the nominal run per mode, unseen by the RBM, whose moving
    /// blocks calibrate the detection threshold and the batch spread.
    pub calibration_len: usize,
    pub burn_in: usize,
    pub node_delay: usize,
    /// Mode of the five-node recipe used for the single-mode node-delay suite.
    pub node_mode: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            train_len: 20_000,
            thirty_node_train_len: 100_000,
            test_len: 4_000,
            heldout_runs: 10,
            calibration_len: 100_000,
            burn_in: 1_000,
            node_delay: 20,
            node_mode: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionParams {
    pub rounds: usize,
    pub quantile: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        DetectionParams {
            rounds: 2_000,
            quantile: 0.99,
        }
    }
}

/// How one case-level root-cause set is formed from its windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseAggregation {
    /// One search on the mean free energy of all case windows.
    Batch,
    /// Patterns flipped in at least half of the per-window searches.
    Majority,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct S3Params {
    pub search: S3Config,
    pub case_aggregation: CaseAggregation,
}

impl Default for S3Params {
    fn default() -> Self {
        S3Params {
            search: S3Config::default(),
            case_aggregation: CaseAggregation::Batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct A3Params {
    pub flip: FlipConfig,
    pub samples_per_vector: usize,
    pub mlp: MlpConfig,
    pub threshold: f64,
}

impl Default for A3Params {
    fn default() -> Self {
        A3Params {
            flip: FlipConfig::default(),
            samples_per_vector: 20,
            mlp: MlpConfig::default(),
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarParams {
    pub flag_fraction: f64,
    /// Explicit fit order. Otherwise the generator's order when
    /// `use_generator_lag`, else AIC up to `max_lag`.
    pub lag: Option<usize>,
    pub use_generator_lag: bool,
    pub max_lag: usize,
}

impl Default for VarParams {
    fn default() -> Self {
        VarParams {
            flag_fraction: crate::var::DEFAULT_FLAG_FRACTION,
            lag: None,
            use_generator_lag: true,
            max_lag: crate::var::AIC_MAX_LAG,
        }
    }
}

/// One experiment. Missing fields take their defaults, so a config file only
/// needs the overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub generator: GeneratorParams,
    pub stpn: StpnParams,
    pub rbm: RbmConfig,
    pub detection: DetectionParams,
    pub s3: S3Params,
    pub a3: A3Params,
    pub var: VarParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 2018,
            generator: GeneratorParams::default(),
            stpn: StpnParams::default(),
            rbm: RbmConfig::default(),
            detection: DetectionParams::default(),
            s3: S3Params::default(),
            a3: A3Params::default(),
            var: VarParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.generator;
        if g.train_len.min(g.thirty_node_train_len) < self.stpn.window_len || g.test_len < self.stpn.window_len + g.node_delay {
            return Err(Error::invalid(format!(
                "train_len {} and test_len {} must cover a window of {} plus the node delay {}",
                g.train_len, g.test_len, self.stpn.window_len, g.node_delay
            )));
        }
        if self.stpn.stride == 0 || self.stpn.window_len <= self.stpn.depth {
            return Err(Error::invalid("stride must be positive and the window longer than the depth"));
        }
        if g.calibration_len < g.test_len {
            return Err(Error::invalid("calibration_len must cover at least one test run"));
        }
        if g.node_delay == 0 {
            return Err(Error::invalid("node delay must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.detection.quantile) || self.detection.rounds == 0 {
            return Err(Error::invalid("detection quantile must lie in [0, 1] with rounds > 0"));
        }
        if !(0.0..1.0).contains(&self.var.flag_fraction) {
            return Err(Error::invalid("VAR flag fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Independent seed for one named purpose.
    pub fn seed_for(&self, purpose: &str) -> u64 {
        derive_seed(self.seed, purpose)
    }
}

/// First eight bytes of `SHA-256(seed || purpose)`.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
}
