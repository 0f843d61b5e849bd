//! `stpn-rca`: generate data, extract pattern features, train models, detect,
//! run root-cause analysis and evaluate, all from one JSON config.

mod commands;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stpn_rca::config::ExperimentConfig;
use stpn_rca::pipeline::NodeDataset;

/// Exit status when `detect` flags the input as anomalous.
pub const EXIT_ANOMALY: u8 = 3;
/// Exit status for invalid configs, arguments or input files.
pub const EXIT_INVALID: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "stpn-rca", version, about = "Pattern-network anomaly detection and root-cause analysis")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Experiment config JSON; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set stpn.window_len=300`. Values
    /// are parsed as JSON, falling back to a string. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,
    /// Override the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cases processed in parallel.
    #[arg(long, default_value_t = 1, global = true)]
    jobs: usize,
    /// Log verbosity on standard error.
    #[arg(long, default_value = "info", global = true)]
    log_level: log::LevelFilter,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Suite {
    Pattern,
    NodeDelay,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one nominal run or one anomalous case into a dataset directory.
    Gen(commands::GenArgs),
    /// Turn dataset directories into a feature file of binary pattern vectors.
    Extract(commands::ExtractArgs),
    /// Train an RBM on nominal feature files and calibrate its detector.
    TrainRbm(commands::TrainRbmArgs),
    /// Flag a feature file as anomalous (exit 3) or nominal (exit 0).
    Detect(commands::DetectArgs),
    /// Root-cause search by sequential state switching.
    RcaS3(commands::RcaS3Args),
    /// Build the bit-flip training corpus from nominal feature files.
    A3Gen(commands::A3GenArgs),
    /// Train the multi-label anomaly classifier on a flip corpus.
    A3Train(commands::A3TrainArgs),
    /// Predict anomalous patterns per window with a trained classifier.
    A3Infer(commands::A3InferArgs),
    /// Fit a VAR model to a dataset.
    VarFit(commands::VarFitArgs),
    /// Flag patterns whose VAR coefficients changed between two fits.
    VarRca(commands::VarRcaArgs),
    /// Score root-cause reports against dataset ground truth.
    Eval(commands::EvalArgs),
    /// Multi-mode pattern-anomaly experiment: S³ and A³ on 30 cases.
    ReproTable1(commands::ReproArgs),
    /// Node-delay experiment: S³ against the VAR baseline.
    ReproTable2(commands::ReproTable2Args),
}

/// Failure with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub status: u8,
    pub message: String,
}

impl From<stpn_rca::Error> for Failure {
    fn from(e: stpn_rca::Error) -> Self {
        use stpn_rca::Error as E;
        let status = match e {
            E::Io { .. } | E::Diverged(_) => 1,
            _ => EXIT_INVALID,
        };
        Failure {
            status,
            message: e.to_string(),
        }
    }
}

impl Failure {
    pub fn invalid(message: impl Into<String>) -> Self {
        Failure {
            status: EXIT_INVALID,
            message: message.into(),
        }
    }
}

pub type CmdResult<T> = Result<T, Failure>;

/// Files and directories written by the running command, removed if it fails.
#[derive(Default)]
pub struct Outputs {
    created: Vec<PathBuf>,
}

impl Outputs {
    /// Record `path` unless it already existed, then return it.
    pub fn claim<'a>(&mut self, path: &'a Path) -> &'a Path {
        if !path.exists() {
            self.created.push(path.to_path_buf());
        }
        path
    }

    fn remove_all(&self) {
        for p in self.created.iter().rev() {
            let removed = if p.is_dir() {
                std::fs::remove_dir_all(p)
            } else {
                std::fs::remove_file(p)
            };
            if removed.is_ok() {
                log::warn!("removed partial output {}", p.display());
            }
        }
    }
}

fn load_config(g: &Global) -> CmdResult<ExperimentConfig> {
    let mut value = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?
        }
        None => serde_json::json!({}),
    };
    for o in &g.overrides {
        apply_override(&mut value, o)?;
    }
    if let Some(seed) = g.seed {
        value["seed"] = seed.into();
    }
    Ok(ExperimentConfig::from_json(&value.to_string())?)
}

/// Set `a.b.c=value` inside a JSON object, creating intermediate objects.
fn apply_override(root: &mut serde_json::Value, spec: &str) -> CmdResult<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Failure::invalid(format!("override {spec:?} is not PATH=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(Failure::invalid(format!("override path {path:?} has an empty key")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Failure::invalid(format!("override path {path:?} crosses a non-object")))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| serde_json::json!({}));
    }
    Ok(())
}

fn run(cli: Cli, out: &mut Outputs) -> CmdResult<u8> {
    let cfg = load_config(&cli.global)?;
    let jobs = cli.global.jobs.max(1);
    match cli.command {
        Command::Gen(a) => commands::gen(&cfg, a, out),
        Command::Extract(a) => commands::extract(&cfg, a, out),
        Command::TrainRbm(a) => commands::train_rbm(&cfg, a, out),
        Command::Detect(a) => commands::detect(a, out),
        Command::RcaS3(a) => commands::rca_s3(&cfg, a, out),
        Command::A3Gen(a) => commands::a3_gen(&cfg, a, out),
        Command::A3Train(a) => commands::a3_train(&cfg, a, out),
        Command::A3Infer(a) => commands::a3_infer(&cfg, a, out),
        Command::VarFit(a) => commands::var_fit(&cfg, a, out),
        Command::VarRca(a) => commands::var_rca(&cfg, a, out),
        Command::Eval(a) => commands::eval(a, out),
        Command::ReproTable1(a) => commands::repro_table1(&cfg, jobs, a, out),
        Command::ReproTable2(a) => commands::repro_table2(&cfg, jobs, a.dataset, a.repro, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.global.log_level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    let mut out = Outputs::default();
    match run(cli, &mut out) {
        Ok(status) => ExitCode::from(status),
        Err(f) => {
            out.remove_all();
            eprintln!("error: {}", f.message);
            ExitCode::from(f.status)
        }
    }
}

/// Accepts `5node` or `30node`.
pub fn parse_dataset(s: &str) -> Result<NodeDataset, String> {
    s.parse::<NodeDataset>().map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outputs_remove_only_what_they_created() {
        let dir = tempfile::tempdir().unwrap();
        let existing = dir.path().join("keep.json");
        std::fs::write(&existing, "{}").unwrap();
        let fresh_dir = dir.path().join("new");
        let fresh = fresh_dir.join("out.json");
        let mut out = Outputs::default();
        out.claim(&existing);
        std::fs::create_dir_all(out.claim(&fresh_dir)).unwrap();
        std::fs::write(out.claim(&fresh), "{}").unwrap();
        out.remove_all();
        assert!(existing.exists());
        assert!(!fresh_dir.exists());
    }

    #[test]
    fn overrides_create_nested_fields() {
        let mut v = serde_json::json!({"stpn": {"depth": 1}});
        apply_override(&mut v, "stpn.window_len=300").unwrap();
        apply_override(&mut v, "a3.mlp.hidden=[8,8]").unwrap();
        apply_override(&mut v, "s3.case_aggregation=majority").unwrap();
        assert_eq!(v["stpn"]["window_len"], 300);
        assert_eq!(v["stpn"]["depth"], 1);
        assert_eq!(v["a3"]["mlp"]["hidden"], serde_json::json!([8, 8]));
        assert_eq!(v["s3"]["case_aggregation"], "majority");
        assert!(apply_override(&mut v, "no_equals").is_err());
        assert!(apply_override(&mut v, "stpn.depth.x=1").is_err());
    }
}
