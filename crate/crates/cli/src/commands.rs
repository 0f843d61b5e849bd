//! Subcommand implementations. Each reads its inputs, writes its outputs
//! through [`Outputs`] and returns the process exit status.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use stpn_rca::a3::{self, FlipCorpus, MlpConfig, MlpFile};
use stpn_rca::config::ExperimentConfig;
use stpn_rca::eval::{compare_report, CaseResult, Scored};
use stpn_rca::pipeline::{self, NodeDataset, Provenance};
use stpn_rca::rbm::{self, RbmConfig, RbmFile};
use stpn_rca::s3::{s3_search_batch, s3_search_windows, Flip};
use stpn_rca::stpn::{window_count, FeatureExtractor, FeatureFile};
use stpn_rca::synthgen::{
    five_node_recipe, node_delay_suite, pattern_suite, read_dataset, simulate_case, simulate_mode, thirty_node_recipe, write_dataset,
    ModeRecipe, SyntheticDataset,
};
use stpn_rca::var::{self, VarFit};
use stpn_rca::Pattern;

use crate::{parse_dataset, CmdResult, Failure, Outputs, Suite, EXIT_ANOMALY};

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CmdResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

/// Pretty JSON with a trailing newline; parent directories are created.
fn write_json<T: Serialize>(out: &mut Outputs, path: &Path, value: &T) -> CmdResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(stpn_rca::Error::from)?;
    text.push('\n');
    write_text(out, path, &text)
}

fn write_text(out: &mut Outputs, path: &Path, text: &str) -> CmdResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        if !dir.exists() {
            std::fs::create_dir_all(out.claim(dir)).map_err(|e| stpn_rca::Error::io(dir, e))?;
        }
    }
    std::fs::write(out.claim(path), text).map_err(|e| stpn_rca::Error::io(path, e))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load_recipe(name: &str) -> CmdResult<ModeRecipe> {
    match name {
        "5node" => Ok(five_node_recipe()),
        "30node" => Ok(thirty_node_recipe()),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::invalid(format!("{path}: {e}")))?;
            Ok(ModeRecipe::from_json(&text)?)
        }
    }
}

/// Seed tag shared with the repro pipelines so `gen` reproduces their data.
fn recipe_tag(recipe: &str, suite: Option<Suite>) -> &'static str {
    match (recipe, suite) {
        ("30node", _) => "table2-30node",
        (_, Some(Suite::NodeDelay)) => "table2-5node",
        _ => "table1",
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// `5node`, `30node` or a recipe JSON file.
    #[arg(long, default_value = "5node")]
    recipe: String,
    /// Mode index of a nominal run, or the base mode of a node-delay case.
    #[arg(long, default_value_t = 0)]
    mode: usize,
    /// Evaluation suite the case is drawn from; omit for a nominal run.
    #[arg(long, value_enum, requires = "case")]
    suite: Option<Suite>,
    /// Case id within the suite, e.g. `case07` or `node03`.
    #[arg(long, requires = "suite")]
    case: Option<String>,
    /// Samples to keep; defaults to the config's train or test length.
    #[arg(long)]
    len: Option<usize>,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

pub fn gen(cfg: &ExperimentConfig, a: GenArgs, out: &mut Outputs) -> CmdResult<u8> {
    let recipe = load_recipe(&a.recipe)?;
    let g = &cfg.generator;
    let tag = recipe_tag(&a.recipe, a.suite);
    let data: SyntheticDataset = match (a.suite, &a.case) {
        (Some(suite), Some(id)) => {
            let cases = match suite {
                Suite::Pattern => pattern_suite(&recipe, cfg.seed_for(&format!("{tag}/suite")))?,
                Suite::NodeDelay => node_delay_suite(&recipe, a.mode, g.node_delay),
            };
            let case = cases
                .iter()
                .find(|c| &c.case_id == id)
                .ok_or_else(|| Failure::invalid(format!("no case {id:?} in the suite")))?;
            let seed = cfg.seed_for(&format!("{tag}/case/{id}"));
            simulate_case(&recipe, case, a.len.unwrap_or(g.test_len), g.burn_in, seed)?
        }
        _ => {
            let mode = recipe
                .modes
                .get(a.mode)
                .ok_or_else(|| Failure::invalid(format!("mode {} out of range", a.mode)))?;
            let default_len = if recipe.n() == 30 { g.thirty_node_train_len } else { g.train_len };
            let seed = cfg.seed_for(&format!("{tag}/train/{}", mode.mode_id));
            simulate_mode(mode, a.len.unwrap_or(default_len), g.burn_in, seed)?
        }
    };
    std::fs::create_dir_all(out.claim(&a.out)).map_err(|e| stpn_rca::Error::io(&a.out, e))?;
    write_dataset(&a.out, &data)?;
    log::info!("wrote {} samples of {} nodes to {}", data.len(), data.n(), a.out.display());
    Ok(0)
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Dataset directory to transform.
    #[arg(long)]
    data: PathBuf,
    /// Fit partitions and thresholds on these nominal dataset directories.
    #[arg(long, num_args = 1.., conflicts_with = "extractor")]
    fit: Vec<PathBuf>,
    /// Reuse the extractor stored in an existing feature file.
    #[arg(long)]
    extractor: Option<PathBuf>,
    /// Output feature file.
    #[arg(long)]
    out: PathBuf,
}

pub fn extract(cfg: &ExperimentConfig, a: ExtractArgs, out: &mut Outputs) -> CmdResult<u8> {
    let extractor = match &a.extractor {
        Some(path) => read_json::<FeatureFile>(path)?.config,
        None if !a.fit.is_empty() => {
            let runs = a.fit.iter().map(|d| read_dataset(d)).collect::<stpn_rca::Result<Vec<_>>>()?;
            let refs: Vec<&SyntheticDataset> = runs.iter().collect();
            FeatureExtractor::fit(&refs, cfg.stpn.clone())?
        }
        None => return Err(Failure::invalid("give --fit DIR... or --extractor FILE")),
    };
    let data = read_dataset(&a.data)?;
    let windows = extractor.transform(&data)?;
    log::info!("{} windows from {}", windows.len(), a.data.display());
    let file = FeatureFile {
        config: extractor,
        source: data.meta.mode_id.clone().or_else(|| Some(a.data.display().to_string())),
        windows,
    };
    write_json(out, &a.out, &file)?;
    Ok(0)
}

fn read_features(paths: &[PathBuf]) -> CmdResult<Vec<FeatureFile>> {
    if paths.is_empty() {
        return Err(Failure::invalid("no feature files given"));
    }
    paths.iter().map(|p| read_json(p)).collect()
}

#[derive(Debug, Args)]
pub struct TrainRbmArgs {
    /// Nominal feature files; each one is a mode for the reference statistics
    /// and a block source for threshold calibration.
    #[arg(long, num_args = 1.., required = true)]
    features: Vec<PathBuf>,
    /// Nominal feature files the RBM does not train on, for calibrating the
    /// detection threshold; defaults to the training files.
    #[arg(long, num_args = 1..)]
    calibration: Vec<PathBuf>,
    /// Windows per detection batch; defaults to the windows of one test run.
    #[arg(long)]
    batch_len: Option<usize>,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
}

pub fn train_rbm(cfg: &ExperimentConfig, a: TrainRbmArgs, out: &mut Outputs) -> CmdResult<u8> {
    let files = read_features(&a.features)?;
    let mut vectors = Vec::new();
    let mut modes = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let label = f.source.clone().unwrap_or_else(|| format!("group{i}"));
        let v = f.vectors();
        modes.extend(std::iter::repeat_n(label, v.len()));
        vectors.extend(v);
    }
    let rbm_cfg = RbmConfig {
        seed: cfg.seed_for("cli/rbm"),
        ..cfg.rbm.clone()
    };
    let model = rbm::train(&vectors, &rbm_cfg)?;
    let mut reference = rbm::nominal_reference(&model, &vectors, Some(&modes))?;
    let calibration = if a.calibration.is_empty() {
        log::warn!("calibrating on the training windows; the threshold will be optimistic");
        files
    } else {
        read_features(&a.calibration)?
    };
    let groups = calibration
        .iter()
        .map(|f| model.free_energies(&f.vectors()))
        .collect::<stpn_rca::Result<Vec<_>>>()?;
    let s = &cfg.stpn;
    let batch_len = a
        .batch_len
        .unwrap_or_else(|| window_count(cfg.generator.test_len, s.window_len, s.stride))
        .max(1);
    let threshold = rbm::calibrate_threshold(
        &mut reference,
        &groups,
        batch_len,
        cfg.detection.rounds,
        cfg.detection.quantile,
        cfg.seed_for("cli/calibration"),
    )?;
    log::info!(
        "trained on {} windows: F~ {:.4}, sigma {:.4}, KLD threshold {:.4}",
        vectors.len(),
        reference.f_tilde,
        reference.sigma,
        threshold
    );
    write_json(out, &a.out, &RbmFile::new(&model, Some(reference)))?;
    Ok(0)
}

fn read_rbm(path: &Path) -> CmdResult<(rbm::RbmModel, rbm::FreeEnergyReference)> {
    let file: RbmFile = read_json(path)?;
    let model = file.model()?;
    let reference = file
        .reference
        .ok_or_else(|| Failure::invalid(format!("{}: model has no reference statistics", path.display())))?;
    Ok((model, reference))
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Feature file of the test run.
    #[arg(long)]
    features: PathBuf,
    /// Output detection report.
    #[arg(long)]
    out: PathBuf,
}

pub fn detect(a: DetectArgs, out: &mut Outputs) -> CmdResult<u8> {
    let (model, reference) = read_rbm(&a.model)?;
    let features: FeatureFile = read_json(&a.features)?;
    let d = rbm::detect(&model, &reference, &features.vectors())?;
    log::info!(
        "KLD {:.4} vs threshold {:.4}: {}",
        d.kld,
        reference.detection_threshold,
        if d.anomalous { "anomalous" } else { "nominal" }
    );
    write_json(out, &a.out, &d)?;
    Ok(if d.anomalous { EXIT_ANOMALY } else { 0 })
}

#[derive(Debug, Args)]
pub struct RcaS3Args {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// One search on the mean free energy of all windows instead of one per window.
    #[arg(long)]
    batch: bool,
    /// Output report: one object with `--batch`, else an array per window.
    #[arg(long)]
    out: PathBuf,
}

pub fn rca_s3(cfg: &ExperimentConfig, a: RcaS3Args, out: &mut Outputs) -> CmdResult<u8> {
    let (model, reference) = read_rbm(&a.model)?;
    let vectors = read_json::<FeatureFile>(&a.features)?.vectors();
    if vectors.is_empty() {
        return Err(Failure::invalid("feature file has no windows"));
    }
    let search = &cfg.s3.search;
    if a.batch || search.batch {
        let r = s3_search_batch(&model, &vectors, &reference, search)?;
        log::info!("{} flips, stopped by {:?}", r.flips.len(), r.stopped_by);
        write_json(out, &a.out, &r)?;
    } else {
        let reports = s3_search_windows(&model, &vectors, &reference, search)?;
        write_json(out, &a.out, &reports)?;
    }
    Ok(0)
}

#[derive(Debug, Args)]
pub struct A3GenArgs {
    /// Nominal feature files.
    #[arg(long, num_args = 1.., required = true)]
    features: Vec<PathBuf>,
    /// Output corpus file.
    #[arg(long)]
    out: PathBuf,
}

pub fn a3_gen(cfg: &ExperimentConfig, a: A3GenArgs, out: &mut Outputs) -> CmdResult<u8> {
    let vectors: Vec<Vec<u8>> = read_features(&a.features)?.iter().flat_map(FeatureFile::vectors).collect();
    let corpus = a3::generate_flip_corpus(&vectors, &cfg.a3.flip, cfg.a3.samples_per_vector, cfg.seed_for("cli/a3-corpus"))?;
    log::info!("{} samples of length {}", corpus.count, corpus.l);
    write_json(out, &a.out, &corpus)?;
    Ok(0)
}

#[derive(Debug, Args)]
pub struct A3TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
}

pub fn a3_train(cfg: &ExperimentConfig, a: A3TrainArgs, out: &mut Outputs) -> CmdResult<u8> {
    let corpus: FlipCorpus = read_json(&a.corpus)?;
    let mlp_cfg = MlpConfig {
        seed: cfg.seed_for("cli/a3-train"),
        ..cfg.a3.mlp.clone()
    };
    let model = a3::train_mlp(&corpus, &mlp_cfg)?;
    log::info!("best epoch {} of {}", model.best_epoch, model.history.len());
    write_json(out, &a.out, &MlpFile::new(&model))?;
    Ok(0)
}

/// Anomalous patterns predicted for one window.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct WindowPrediction {
    window: usize,
    patterns: Vec<Pattern>,
}

#[derive(Debug, Args)]
pub struct A3InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Output predictions, one entry per window.
    #[arg(long)]
    out: PathBuf,
}

pub fn a3_infer(cfg: &ExperimentConfig, a: A3InferArgs, out: &mut Outputs) -> CmdResult<u8> {
    let model = read_json::<MlpFile>(&a.model)?.model()?;
    let features: FeatureFile = read_json(&a.features)?;
    let n = features.config.n();
    let predictions = features
        .vectors()
        .iter()
        .enumerate()
        .map(|(w, v)| {
            let label = a3::infer(&model, v, cfg.a3.threshold)?;
            Ok(WindowPrediction {
                window: w,
                patterns: a3::anomalous_positions(&label).into_iter().map(|i| Pattern::from_index(i, n)).collect(),
            })
        })
        .collect::<stpn_rca::Result<Vec<_>>>()?;
    write_json(out, &a.out, &predictions)?;
    Ok(0)
}

#[derive(Debug, Args)]
pub struct VarFitArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Lag order; defaults to the config, then the generator's order, then AIC.
    #[arg(long)]
    lag: Option<usize>,
    /// Output fit file.
    #[arg(long)]
    out: PathBuf,
}

pub fn var_fit(cfg: &ExperimentConfig, a: VarFitArgs, out: &mut Outputs) -> CmdResult<u8> {
    let data = read_dataset(&a.data)?;
    let p = match a.lag.or(cfg.var.lag) {
        Some(p) => p,
        None if cfg.var.use_generator_lag && data.meta.model.p > 0 => data.meta.model.p,
        None => var::select_lag(&data.channels, cfg.var.max_lag)?,
    };
    let fit = var::fit_var(&data.channels, p)?;
    log::info!("VAR({p}) on {} samples, condition {:.3e}", fit.samples, fit.condition);
    write_json(out, &a.out, &fit)?;
    Ok(0)
}

/// VAR root causes in the shape of a search report.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct VarReport {
    method: String,
    window: Option<usize>,
    /// Flagged patterns; `deltaF` holds the coefficient change.
    flips: Vec<Flip>,
    threshold: f64,
    delta: Vec<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct VarRcaArgs {
    #[arg(long)]
    nominal: PathBuf,
    #[arg(long)]
    anomalous: PathBuf,
    /// Output report.
    #[arg(long)]
    out: PathBuf,
}

pub fn var_rca(cfg: &ExperimentConfig, a: VarRcaArgs, out: &mut Outputs) -> CmdResult<u8> {
    let nominal: VarFit = read_json(&a.nominal)?;
    let anomalous: VarFit = read_json(&a.anomalous)?;
    let rca = var::var_rca(&nominal, &anomalous, cfg.var.flag_fraction)?;
    let report = VarReport {
        method: "var".into(),
        window: None,
        flips: rca
            .flagged
            .iter()
            .map(|&p| Flip {
                pattern: p,
                delta_f: rca.delta[p.source][p.target],
            })
            .collect(),
        threshold: rca.threshold,
        delta: rca.delta,
    };
    log::info!("{} patterns flagged", report.flips.len());
    write_json(out, &a.out, &report)?;
    Ok(0)
}

/// Any report the RCA subcommands write: one case-level object, or an array
/// with one entry per window.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum AnyReport {
    One(ReportEntry),
    Many(Vec<ReportEntry>),
}

#[derive(Debug, Deserialize)]
struct ReportEntry {
    #[serde(default)]
    method: Option<String>,
    #[serde(default)]
    window: Option<usize>,
    #[serde(default)]
    flips: Vec<Flip>,
    #[serde(default)]
    patterns: Vec<Pattern>,
}

impl ReportEntry {
    fn scored(&self) -> Vec<Scored> {
        let flips = self.flips.iter().map(|f| Scored {
            pattern: f.pattern,
            importance: f.delta_f.abs(),
        });
        let plain = self.patterns.iter().map(|&p| Scored {
            pattern: p,
            importance: 1.0,
        });
        flips.chain(plain).collect()
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directories holding the ground truth, one per report.
    #[arg(long, num_args = 1.., required = true)]
    data: Vec<PathBuf>,
    /// Report files in the same order as `--data`.
    #[arg(long, num_args = 1.., required = true)]
    report: Vec<PathBuf>,
    /// Method label when a report does not name one.
    #[arg(long, default_value = "s3")]
    method: String,
    /// Output directory for `report.json` and `report.txt`.
    #[arg(long)]
    out: PathBuf,
}

pub fn eval(a: EvalArgs, out: &mut Outputs) -> CmdResult<u8> {
    if a.data.len() != a.report.len() {
        return Err(Failure::invalid(format!(
            "{} dataset directories for {} reports",
            a.data.len(),
            a.report.len()
        )));
    }
    let mut results = Vec::new();
    for (dir, path) in a.data.iter().zip(&a.report) {
        let data = read_dataset(dir)?;
        let entries = match read_json::<AnyReport>(path)? {
            AnyReport::One(e) => vec![e],
            AnyReport::Many(v) => v,
        };
        let method = entries
            .iter()
            .find_map(|e| e.method.clone())
            .unwrap_or_else(|| a.method.clone());
        // Per-window reports score every window; a case-level report only
        // contributes its discovered set.
        let per_window = entries.len() > 1 || entries.iter().all(|e| e.window.is_some());
        let windows: Vec<Vec<Pattern>> = if per_window {
            entries.iter().map(|e| e.scored().iter().map(|s| s.pattern).collect()).collect()
        } else {
            Vec::new()
        };
        let mut discovered: Vec<Scored> = Vec::new();
        for s in entries.iter().flat_map(ReportEntry::scored) {
            match discovered.iter_mut().find(|d| d.pattern == s.pattern) {
                Some(d) => d.importance = d.importance.max(s.importance),
                None => discovered.push(s),
            }
        }
        let case_id = dir.file_name().map_or_else(|| dir.display().to_string(), |s| s.to_string_lossy().into_owned());
        results.push(CaseResult {
            case_id,
            method,
            n: data.n(),
            truth: data.meta.truth.clone(),
            windows,
            discovered,
        });
    }
    let report = compare_report(&results)?;
    write_json(out, &a.out.join("report.json"), &report)?;
    write_text(out, &a.out.join("report.txt"), &report.text())?;
    Ok(0)
}

#[derive(Debug, Args)]
pub struct ReproArgs {
    /// Output directory for `report.json` and `report.txt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReproTable2Args {
    /// `5node` or `30node`.
    #[arg(long, value_parser = parse_dataset)]
    pub dataset: NodeDataset,
    #[command(flatten)]
    pub repro: ReproArgs,
}

fn write_repro<T: Serialize>(out: &mut Outputs, dir: &Path, report: &T, text: &str, provenance: &Provenance) -> CmdResult<()> {
    write_json(out, &dir.join("report.json"), report)?;
    write_text(out, &dir.join("report.txt"), text)?;
    log::info!("config hash {}", provenance.config_hash);
    Ok(())
}

pub fn repro_table1(cfg: &ExperimentConfig, jobs: usize, a: ReproArgs, out: &mut Outputs) -> CmdResult<u8> {
    let r = pipeline::repro_table1(cfg, jobs)?;
    write_repro(out, &a.out, &r, &r.text(), &r.provenance)?;
    Ok(0)
}

pub fn repro_table2(cfg: &ExperimentConfig, jobs: usize, dataset: NodeDataset, a: ReproArgs, out: &mut Outputs) -> CmdResult<u8> {
    let r = pipeline::repro_table2(cfg, dataset, jobs)?;
    write_repro(out, &a.out, &r, &r.text(), &r.provenance)?;
    Ok(0)
}
