//! End-to-end experiments: simulate nominal and anomalous runs, extract
//! features, train the models, run every root-cause method and score them.

use serde::{Deserialize, Serialize};

use crate::a3::{self, FlipCorpus, MlpModel};
use crate::config::{CaseAggregation, ExperimentConfig};
use crate::error::{Error, Result};
use crate::eval::{compare_report, CaseResult, Report, Scored};
use crate::rbm::{self, calibrate_threshold, detect, nominal_reference, FreeEnergyReference, RbmConfig, RbmModel};
use crate::s3::{s3_search, s3_search_batch, RootCauseReport};
use crate::stpn::{window_count, FeatureExtractor};
use crate::synthgen::{
    five_node_recipe, node_delay_suite, pattern_suite, simulate_case, simulate_mode, thirty_node_recipe, CaseSpec,
    ModeRecipe, SyntheticDataset,
};
use crate::var::{fit_var, select_lag, var_rca, VarFit};
use crate::Pattern;

/// Map `f` over `items` on up to `jobs` threads, keeping input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Feature extractor, RBM and calibrated reference fitted on nominal runs.
#[derive(Debug, Clone)]
pub struct NominalModel {
    pub extractor: FeatureExtractor,
    pub rbm: RbmModel,
    pub reference: FreeEnergyReference,
    pub vectors: Vec<Vec<u8>>,
    pub modes: Vec<String>,
}

/// Fit everything that only sees nominal data. The detection threshold and
/// batch spread are calibrated on blocks of `batch_len` windows from the
/// `calibration` runs, which the RBM never sees.
pub fn train_nominal(
    cfg: &ExperimentConfig,
    runs: &[SyntheticDataset],
    calibration: &[SyntheticDataset],
    batch_len: usize,
    tag: &str,
) -> Result<NominalModel> {
    let refs: Vec<&SyntheticDataset> = runs.iter().collect();
    let extractor = FeatureExtractor::fit(&refs, cfg.stpn.clone())?;
    let mut vectors = Vec::new();
    let mut modes = Vec::new();
    for run in runs {
        let v = extractor.vectors(run)?;
        modes.extend(std::iter::repeat_n(run.meta.mode_id.clone().unwrap_or_default(), v.len()));
        vectors.extend(v);
    }
    let rbm_cfg = RbmConfig {
        seed: cfg.seed_for(&format!("{tag}/rbm")),
        ..cfg.rbm.clone()
    };
    let rbm = rbm::train(&vectors, &rbm_cfg)?;
    let mut reference = nominal_reference(&rbm, &vectors, Some(&modes))?;
    let groups = calibration
        .iter()
        .map(|run| rbm.free_energies(&extractor.vectors(run)?))
        .collect::<Result<Vec<_>>>()?;
    calibrate_threshold(
        &mut reference,
        &groups,
        batch_len.max(1),
        cfg.detection.rounds,
        cfg.detection.quantile,
        cfg.seed_for(&format!("{tag}/calibration")),
    )?;
    Ok(NominalModel {
        extractor,
        rbm,
        reference,
        vectors,
        modes,
    })
}

/// Nominal training runs, one per mode in `modes`.
fn training_runs(cfg: &ExperimentConfig, recipe: &ModeRecipe, modes: &[usize], len: usize, tag: &str) -> Result<Vec<SyntheticDataset>> {
    modes
        .iter()
        .map(|&m| {
            let mode = &recipe.modes[m];
            let seed = cfg.seed_for(&format!("{tag}/train/{}", mode.mode_id));
            simulate_mode(mode, len, cfg.generator.burn_in, seed)
        })
        .collect()
}

/// `count` nominal runs of `len` samples per mode, seeded under `{tag}/{purpose}`.
fn nominal_runs(
    cfg: &ExperimentConfig,
    recipe: &ModeRecipe,
    modes: &[usize],
    (count, len): (usize, usize),
    purpose: &str,
    tag: &str,
) -> Result<Vec<SyntheticDataset>> {
    let mut runs = Vec::new();
    for &m in modes {
        let mode = &recipe.modes[m];
        for r in 0..count {
            let seed = cfg.seed_for(&format!("{tag}/{purpose}/{}/{r}", mode.mode_id));
            runs.push(simulate_mode(mode, len, cfg.generator.burn_in, seed)?);
        }
    }
    Ok(runs)
}

fn case_run(cfg: &ExperimentConfig, recipe: &ModeRecipe, case: &CaseSpec, tag: &str) -> Result<SyntheticDataset> {
    let seed = cfg.seed_for(&format!("{tag}/case/{}", case.case_id));
    simulate_case(recipe, case, cfg.generator.test_len, cfg.generator.burn_in, seed)
}

/// Detection outcome of one test run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDetection {
    pub run_id: String,
    pub anomalous_truth: bool,
    pub kld: f64,
    pub flagged: bool,
    pub mean_free_energy: f64,
    /// Mean training free energy of the run's mode.
    pub nominal_mean_free_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub threshold: f64,
    pub runs: Vec<RunDetection>,
    pub anomalous_flag_rate: f64,
    pub nominal_flag_rate: f64,
    /// Every anomalous run has a higher mean free energy than its mode's training windows.
    pub energy_gap_holds: bool,
}

fn run_detection(model: &NominalModel, run_id: &str, data: &SyntheticDataset, vectors: &[Vec<u8>]) -> Result<RunDetection> {
    let d = detect(&model.rbm, &model.reference, vectors)?;
    let mode = data.meta.mode_id.clone().unwrap_or_default();
    let nominal = model
        .reference
        .per_mode
        .iter()
        .find(|s| s.mode == mode)
        .map_or(model.reference.f_tilde, |s| s.mean);
    Ok(RunDetection {
        run_id: run_id.to_string(),
        anomalous_truth: data.meta.anomaly.is_some(),
        kld: d.kld,
        flagged: d.anomalous,
        mean_free_energy: d.free_energies.iter().sum::<f64>() / d.free_energies.len() as f64,
        nominal_mean_free_energy: nominal,
    })
}

fn summarize_detection(threshold: f64, runs: Vec<RunDetection>) -> DetectionSummary {
    let rate = |anomalous: bool| {
        let group: Vec<&RunDetection> = runs.iter().filter(|r| r.anomalous_truth == anomalous).collect();
        if group.is_empty() {
            0.0
        } else {
            group.iter().filter(|r| r.flagged).count() as f64 / group.len() as f64
        }
    };
    DetectionSummary {
        threshold,
        anomalous_flag_rate: rate(true),
        nominal_flag_rate: rate(false),
        energy_gap_holds: runs
            .iter()
            .filter(|r| r.anomalous_truth)
            .all(|r| r.mean_free_energy > r.nominal_mean_free_energy),
        runs,
    }
}

fn scored_flips(report: &RootCauseReport) -> Vec<Scored> {
    report
        .flips
        .iter()
        .map(|f| Scored {
            pattern: f.pattern,
            importance: -f.delta_f,
        })
        .collect()
}

/// Case-level S³ set under the configured aggregation.
pub fn s3_case(model: &NominalModel, vectors: &[Vec<u8>], cfg: &ExperimentConfig) -> Result<(Vec<Scored>, Vec<RootCauseReport>)> {
    let search = &cfg.s3.search;
    match cfg.s3.case_aggregation {
        CaseAggregation::Batch => {
            let r = s3_search_batch(&model.rbm, vectors, &model.reference, search)?;
            Ok((scored_flips(&r), vec![r]))
        }
        CaseAggregation::Majority => {
            let reports = vectors
                .iter()
                .map(|v| s3_search(&model.rbm, v, &model.reference, search))
                .collect::<Result<Vec<_>>>()?;
            let l = model.rbm.n_visible();
            let n = model.extractor.n();
            let mut votes = vec![0usize; l];
            let mut weight = vec![0.0; l];
            for r in &reports {
                for f in &r.flips {
                    let i = f.pattern.index(n);
                    votes[i] += 1;
                    weight[i] -= f.delta_f;
                }
            }
            let mut chosen: Vec<Scored> = (0..l)
                .filter(|&i| 2 * votes[i] >= reports.len())
                .map(|i| Scored {
                    pattern: Pattern::from_index(i, n),
                    importance: weight[i] / reports.len() as f64,
                })
                .collect();
            chosen.sort_by(|a, b| b.importance.total_cmp(&a.importance).then(a.pattern.cmp(&b.pattern)));
            Ok((chosen, reports))
        }
    }
}

fn per_window_s3(model: &NominalModel, vectors: &[Vec<u8>], cfg: &ExperimentConfig) -> Result<Vec<RootCauseReport>> {
    vectors
        .iter()
        .enumerate()
        .map(|(w, v)| {
            let mut r = s3_search(&model.rbm, v, &model.reference, &cfg.s3.search)?;
            r.window = Some(w);
            Ok(r)
        })
        .collect()
}

fn a3_corpus_and_model(cfg: &ExperimentConfig, vectors: &[Vec<u8>], tag: &str) -> Result<(FlipCorpus, MlpModel)> {
    let corpus = a3::generate_flip_corpus(
        vectors,
        &cfg.a3.flip,
        cfg.a3.samples_per_vector,
        cfg.seed_for(&format!("{tag}/a3-corpus")),
    )?;
    let mlp_cfg = a3::MlpConfig {
        seed: cfg.seed_for(&format!("{tag}/a3-train")),
        ..cfg.a3.mlp.clone()
    };
    let model = a3::train_mlp(&corpus, &mlp_cfg)?;
    Ok((corpus, model))
}

/// Lag order for the VAR baseline.
fn var_lag(cfg: &ExperimentConfig, data: &SyntheticDataset) -> Result<usize> {
    if let Some(p) = cfg.var.lag {
        return Ok(p);
    }
    if cfg.var.use_generator_lag && data.meta.model.p > 0 {
        return Ok(data.meta.model.p);
    }
    select_lag(&data.channels, cfg.var.max_lag)
}

/// Provenance stamped into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub recipe: String,
    pub recipe_version: u32,
}

fn provenance(cfg: &ExperimentConfig, recipe: &ModeRecipe) -> Provenance {
    Provenance {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        recipe: recipe.name.clone(),
        recipe_version: recipe.version,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Report {
    pub provenance: Provenance,
    pub training_windows: usize,
    pub a3_training_samples: usize,
    pub a3_validation_samples: usize,
    pub a3_best_epoch: usize,
    pub test_windows: usize,
    pub detection: DetectionSummary,
    pub eval: Report,
}

impl Table1Report {
    pub fn text(&self) -> String {
        format!(
            "pattern anomalies: {} training windows, {} test windows, A3 corpus {} + {}\n{}detection: threshold {:.4}, anomalous flagged {:.2}%, nominal flagged {:.2}%, energy gap {}\n",
            self.training_windows,
            self.test_windows,
            self.a3_training_samples,
            self.a3_validation_samples,
            self.eval.text(),
            self.detection.threshold,
            100.0 * self.detection.anomalous_flag_rate,
            100.0 * self.detection.nominal_flag_rate,
            if self.detection.energy_gap_holds { "holds" } else { "violated" },
        )
    }
}

/// Broken-pattern suite on the six five-node modes, scored for S³ and A³.
pub fn repro_table1(cfg: &ExperimentConfig, jobs: usize) -> Result<Table1Report> {
    cfg.validate()?;
    let tag = "table1";
    let recipe = five_node_recipe();
    let all: Vec<usize> = (0..recipe.modes.len()).collect();
    let train = training_runs(cfg, &recipe, &all, cfg.generator.train_len, tag)?;
    let batch_len = window_count(cfg.generator.test_len, cfg.stpn.window_len, cfg.stpn.stride);
    let calibration = nominal_runs(cfg, &recipe, &all, (1, cfg.generator.calibration_len), "calibration", tag)?;
    let model = train_nominal(cfg, &train, &calibration, batch_len, tag)?;
    log::info!("table1: trained RBM on {} windows", model.vectors.len());
    let (corpus, mlp) = a3_corpus_and_model(cfg, &model.vectors, tag)?;
    log::info!("table1: A3 best epoch {}", mlp.best_epoch);
    let cases = pattern_suite(&recipe, cfg.seed_for(&format!("{tag}/suite")))?;
    let n = recipe.n();
    let per_case = par_map(&cases, jobs, |case| {
        let data = case_run(cfg, &recipe, case, tag)?;
        let vectors = model.extractor.vectors(&data)?;
        let detection = run_detection(&model, &case.case_id, &data, &vectors)?;
        let s3 = per_window_s3(&model, &vectors, cfg)?;
        let s3_windows: Vec<Vec<Pattern>> = s3.iter().map(RootCauseReport::patterns).collect();
        let a3_windows = vectors
            .iter()
            .map(|v| {
                let label = a3::infer(&mlp, v, cfg.a3.threshold)?;
                Ok(a3::anomalous_positions(&label).into_iter().map(|i| Pattern::from_index(i, n)).collect())
            })
            .collect::<Result<Vec<Vec<Pattern>>>>()?;
        let union = |windows: &[Vec<Pattern>]| -> Vec<Scored> {
            let mut all: Vec<Pattern> = windows.iter().flatten().copied().collect();
            all.sort();
            all.dedup();
            all.into_iter()
                .map(|p| Scored {
                    pattern: p,
                    importance: windows.iter().filter(|w| w.contains(&p)).count() as f64,
                })
                .collect()
        };
        let result = |method: &str, windows: Vec<Vec<Pattern>>| CaseResult {
            case_id: case.case_id.clone(),
            method: method.to_string(),
            n,
            truth: data.meta.truth.clone(),
            discovered: union(&windows),
            windows,
        };
        Ok((detection, result("s3", s3_windows), result("a3", a3_windows)))
    })?;
    let heldout = nominal_runs(cfg, &recipe, &all, (cfg.generator.heldout_runs, cfg.generator.test_len), "heldout", tag)?;
    let mut detections: Vec<RunDetection> = per_case.iter().map(|c| c.0.clone()).collect();
    for (i, run) in heldout.iter().enumerate() {
        let vectors = model.extractor.vectors(run)?;
        detections.push(run_detection(&model, &format!("heldout{:02}", i + 1), run, &vectors)?);
    }
    let mut results: Vec<CaseResult> = per_case.iter().map(|c| c.1.clone()).collect();
    results.extend(per_case.iter().map(|c| c.2.clone()));
    let eval = compare_report(&results)?;
    let (n_train, n_val) = a3::split_sizes(corpus.count, cfg.a3.mlp.validation_fraction);
    Ok(Table1Report {
        provenance: provenance(cfg, &recipe),
        training_windows: model.vectors.len(),
        a3_training_samples: n_train,
        a3_validation_samples: n_val,
        a3_best_epoch: mlp.best_epoch,
        test_windows: results.iter().filter(|r| r.method == "s3").map(|r| r.windows.len()).sum(),
        detection: summarize_detection(model.reference.detection_threshold, detections),
        eval,
    })
}

/// Which system the node-delay comparison runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeDataset {
    FiveNode,
    ThirtyNode,
}

impl std::str::FromStr for NodeDataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "5node" | "five-node" => Ok(NodeDataset::FiveNode),
            "30node" | "thirty-node" => Ok(NodeDataset::ThirtyNode),
            other => Err(Error::invalid(format!("unknown dataset '{other}', expected 5node or 30node"))),
        }
    }
}

/// Per-case flags of both methods, for the heat-grid plot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCase {
    pub case_id: String,
    pub fault_node: usize,
    pub s3_top_node: Option<usize>,
    pub var_top_node: Option<usize>,
    pub s3: RootCauseReport,
    pub var_flagged: Vec<Pattern>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Report {
    pub provenance: Provenance,
    pub dataset: NodeDataset,
    pub training_windows: usize,
    pub var_lag: usize,
    pub nominal_fit: VarFit,
    pub detection: DetectionSummary,
    pub cases: Vec<NodeCase>,
    pub eval: Report,
}

impl Table2Report {
    pub fn text(&self) -> String {
        let name = match self.dataset {
            NodeDataset::FiveNode => "5-node",
            NodeDataset::ThirtyNode => "30-node",
        };
        format!(
            "node delays, {name}: {} cases, {} training windows, VAR lag {}\n{}detection: threshold {:.4}, anomalous flagged {:.2}%, nominal flagged {:.2}%, energy gap {}\n",
            self.cases.len(),
            self.training_windows,
            self.var_lag,
            self.eval.text(),
            self.detection.threshold,
            100.0 * self.detection.anomalous_flag_rate,
            100.0 * self.detection.nominal_flag_rate,
            if self.detection.energy_gap_holds { "holds" } else { "violated" },
        )
    }
}

/// Single-mode node-delay suite, S³ against the VAR baseline.
pub fn repro_table2(cfg: &ExperimentConfig, dataset: NodeDataset, jobs: usize) -> Result<Table2Report> {
    cfg.validate()?;
    let g = &cfg.generator;
    let (recipe, mode, train_len, tag) = match dataset {
        NodeDataset::FiveNode => (five_node_recipe(), g.node_mode, g.train_len, "table2-5node"),
        NodeDataset::ThirtyNode => (thirty_node_recipe(), 0, g.thirty_node_train_len, "table2-30node"),
    };
    if mode >= recipe.modes.len() {
        return Err(Error::invalid(format!("node_mode {mode} out of range")));
    }
    let train = training_runs(cfg, &recipe, &[mode], train_len, tag)?;
    let batch_len = window_count(cfg.generator.test_len, cfg.stpn.window_len, cfg.stpn.stride);
    let calibration = nominal_runs(cfg, &recipe, &[mode], (1, cfg.generator.calibration_len), "calibration", tag)?;
    let model = train_nominal(cfg, &train, &calibration, batch_len, tag)?;
    log::info!("{tag}: trained RBM on {} windows", model.vectors.len());
    let p = var_lag(cfg, &train[0])?;
    let nominal_fit = fit_var(&train[0].channels, p)?;
    let cases = node_delay_suite(&recipe, mode, cfg.generator.node_delay);
    let n = recipe.n();
    let per_case = par_map(&cases, jobs, |case| {
        let data = case_run(cfg, &recipe, case, tag)?;
        let vectors = model.extractor.vectors(&data)?;
        let detection = run_detection(&model, &case.case_id, &data, &vectors)?;
        let (s3_set, reports) = s3_case(&model, &vectors, cfg)?;
        let rca = var_rca(&nominal_fit, &fit_var(&data.channels, p)?, cfg.var.flag_fraction)?;
        let var_set: Vec<Scored> = rca
            .flagged
            .iter()
            .map(|&pat| Scored {
                pattern: pat,
                importance: rca.delta[pat.source][pat.target],
            })
            .collect();
        let fault = data.meta.truth.fault_node.expect("node-delay case");
        let result = |method: &str, discovered: Vec<Scored>| CaseResult {
            case_id: case.case_id.clone(),
            method: method.to_string(),
            n,
            truth: data.meta.truth.clone(),
            windows: Vec::new(),
            discovered,
        };
        let top = |s: &[Scored]| crate::eval::attribute_node(s, n).map(|a| a.top());
        let summary_report = reports.into_iter().next().unwrap_or(RootCauseReport {
            method: "s3".into(),
            window: None,
            flips: Vec::new(),
            f_start: 0.0,
            f_end: 0.0,
            f_tilde: model.reference.f_tilde,
            stopped_by: crate::s3::StopReason::NoImprovement,
        });
        let node_case = NodeCase {
            case_id: case.case_id.clone(),
            fault_node: fault,
            s3_top_node: top(&s3_set),
            var_top_node: top(&var_set),
            s3: summary_report,
            var_flagged: rca.flagged.clone(),
        };
        Ok((detection, node_case, result("s3", s3_set), result("var", var_set)))
    })?;
    let heldout = nominal_runs(cfg, &recipe, &[mode], (cfg.generator.heldout_runs, cfg.generator.test_len), "heldout", tag)?;
    let mut detections: Vec<RunDetection> = per_case.iter().map(|c| c.0.clone()).collect();
    for (i, run) in heldout.iter().enumerate() {
        let vectors = model.extractor.vectors(run)?;
        detections.push(run_detection(&model, &format!("heldout{:02}", i + 1), run, &vectors)?);
    }
    let mut results: Vec<CaseResult> = per_case.iter().map(|c| c.2.clone()).collect();
    results.extend(per_case.iter().map(|c| c.3.clone()));
    Ok(Table2Report {
        provenance: provenance(cfg, &recipe),
        dataset,
        training_windows: model.vectors.len(),
        var_lag: p,
        nominal_fit,
        detection: summarize_detection(model.reference.detection_threshold, detections),
        cases: per_case.into_iter().map(|c| c.1).collect(),
        eval: compare_report(&results)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order_and_propagates_errors() {
        let items: Vec<u32> = (0..23).collect();
        let out = par_map(&items, 4, |&x| Ok(x * 2)).unwrap();
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert_eq!(par_map(&items, 1, |&x| Ok(x)).unwrap(), items);
        let err = par_map(&items, 3, |&x| if x == 17 { Err(Error::invalid("boom")) } else { Ok(x) });
        assert!(err.is_err());
        assert!(par_map(&[] as &[u32], 4, |&x| Ok(x)).unwrap().is_empty());
    }

    #[test]
    fn dataset_names_parse() {
        assert_eq!("5node".parse::<NodeDataset>().unwrap(), NodeDataset::FiveNode);
        assert_eq!("30node".parse::<NodeDataset>().unwrap(), NodeDataset::ThirtyNode);
        assert!("7node".parse::<NodeDataset>().is_err());
    }
}
