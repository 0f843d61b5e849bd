use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_stationarity, make_node_delay_anomaly, make_pattern_anomaly, simulate_var, AnomalySpec, Edge, GraphMode,
    SyntheticDataset, Truth,
};
use crate::stpn::{extract_windows, fit_partition, symbolize, PartitionKind};
use crate::error::{Error, Result};
use crate::Pattern;

/// Topology of the six five-node modes, 0-based `(source, target)`. Only
/// mode 3 carries a self-loop (node 4).
pub const FIVE_NODE_TOPOLOGIES: [&[(usize, usize)]; 6] = [
    &[(0, 1), (1, 0), (1, 4), (2, 0), (3, 2), (4, 0), (4, 1)],
    &[(0, 1), (1, 2), (2, 0), (2, 1), (2, 3), (3, 1), (4, 2)],
    &[(0, 2), (1, 0), (1, 2), (2, 1), (2, 4), (3, 1), (3, 3), (4, 3)],
    &[(0, 1), (1, 2), (1, 4), (2, 4), (3, 4), (4, 0), (4, 3)],
    &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 0), (4, 3)],
    &[(1, 2), (1, 3), (2, 1), (3, 0), (3, 1), (3, 2), (3, 4)],
];

/// How coefficients are drawn for a topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawConfig {
    pub p: usize,
    pub coef_low: f64,
    pub coef_high: f64,
    /// Lags beyond the first are drawn only on self-loops, scaled by this.
    pub higher_lag_scale: f64,
    pub radius_cap: f64,
    pub shrink: f64,
    /// Candidate draws per mode; the one whose weakest edge stands furthest
    /// above its strongest non-edge in `Λ` is kept.
    pub screen_candidates: usize,
    /// Series length used to estimate `Λ` while screening.
    pub screen_len: usize,
}

impl Default for DrawConfig {
    fn default() -> Self {
        DrawConfig {
            p: 2,
            coef_low: 0.3,
            coef_high: 0.6,
            higher_lag_scale: 0.5,
            radius_cap: 0.95,
            shrink: 0.98,
            screen_candidates: 100,
            screen_len: 20_000,
        }
    }
}

/// Versioned set of frozen mode realizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRecipe {
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub draw: DrawConfig,
    pub modes: Vec<GraphMode>,
}

impl ModeRecipe {
    pub fn n(&self) -> usize {
        self.modes.first().map_or(0, |m| m.n)
    }

    pub fn p(&self) -> usize {
        self.draw.p
    }

    /// Draw coefficients for each topology, screening candidates by their
    /// `Λ` margin.
    pub fn draw(
        name: &str,
        n: usize,
        topologies: &[Vec<(usize, usize)>],
        draw: DrawConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut modes = Vec::with_capacity(topologies.len());
        for (m, topo) in topologies.iter().enumerate() {
            let mode_id = format!("mode{}", m + 1);
            let mut best: Option<(f64, GraphMode)> = None;
            for _ in 0..draw.screen_candidates.max(1) {
                let mut mode = draw_mode(&mode_id, n, topo, &draw, &mut rng)?;
                mode.edges.sort_by_key(|e| (e.source, e.target));
                let score = if draw.screen_candidates > 1 {
                    lambda_margin(&mode, draw.screen_len, rng.random())?
                } else {
                    0.0
                };
                if best.as_ref().is_none_or(|(s, _)| score > *s) {
                    best = Some((score, mode));
                }
            }
            modes.push(best.expect("at least one candidate").1);
        }
        Ok(ModeRecipe {
            version: 2,
            name: name.to_string(),
            seed,
            draw,
            modes,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let recipe: ModeRecipe = serde_json::from_str(text)?;
        for mode in &recipe.modes {
            if mode.edges.iter().any(|e| e.source >= mode.n || e.target >= mode.n) {
                return Err(Error::invalid(format!("{}: edge out of range", mode.mode_id)));
            }
        }
        Ok(recipe)
    }
}

/// Weakest edge `Λ` minus strongest non-edge `Λ` over all ordered pairs
/// (diagonal included), estimated from one long simulated run.
pub fn lambda_margin(mode: &GraphMode, len: usize, seed: u64) -> Result<f64> {
    let data = simulate_var(&mode.realize(), len, 500, seed)?;
    let symbols = data
        .channels
        .iter()
        .enumerate()
        .map(|(j, c)| symbolize(j, c, &fit_partition(c, 3, PartitionKind::Mep)?))
        .collect::<Result<Vec<_>>>()?;
    let graph = extract_windows(&symbols, len, len, 1)?.remove(0);
    let (mut weakest, mut strongest) = (f64::INFINITY, 0.0f64);
    for s in 0..mode.n {
        for t in 0..mode.n {
            let l = graph.get(s, t);
            if mode.has_edge(s, t) {
                weakest = weakest.min(l);
            } else {
                strongest = strongest.max(l);
            }
        }
    }
    Ok(weakest - strongest)
}

fn draw_mode(
    mode_id: &str,
    n: usize,
    topology: &[(usize, usize)],
    draw: &DrawConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GraphMode> {
    let mut edges = Vec::with_capacity(topology.len());
    for &(source, target) in topology {
        if source >= n || target >= n {
            return Err(Error::invalid(format!("edge {source}->{target} outside n={n}")));
        }
        let mut coefs = vec![0.0; draw.p];
        for (k, c) in coefs.iter_mut().enumerate() {
            if k > 0 && source != target {
                continue;
            }
            let mag = rng.random_range(draw.coef_low..draw.coef_high);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            *c = sign * mag * if k == 0 { 1.0 } else { draw.higher_lag_scale };
        }
        edges.push(Edge {
            source,
            target,
            coefs,
        });
    }
    let mut mode = GraphMode {
        mode_id: mode_id.to_string(),
        n,
        p: draw.p,
        edges,
        noise_var: 1.0,
    };
    let mut guard = 0;
    while check_stationarity(&mode.realize()) > draw.radius_cap {
        for e in mode.edges.iter_mut() {
            for c in e.coefs.iter_mut() {
                *c *= draw.shrink;
            }
        }
        guard += 1;
        if guard > 10_000 {
            return Err(Error::invalid("coefficient rescaling did not converge"));
        }
    }
    Ok(mode)
}

/// Six-mode five-node recipe shipped with the crate.
pub fn five_node_recipe() -> ModeRecipe {
    ModeRecipe::from_json(include_str!("../../recipes/five_node_modes.json"))
        .expect("shipped five-node recipe parses")
}

/// Single-mode thirty-node recipe shipped with the crate.
pub fn thirty_node_recipe() -> ModeRecipe {
    ModeRecipe::from_json(include_str!("../../recipes/thirty_node.json"))
        .expect("shipped thirty-node recipe parses")
}

pub(crate) fn five_node_topologies() -> Vec<Vec<(usize, usize)>> {
    FIVE_NODE_TOPOLOGIES.iter().map(|t| t.to_vec()).collect()
}

/// Random sparse topology: every node gets `in_degree` distinct non-self parents.
pub(crate) fn random_topology(n: usize, in_degree: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for target in 0..n {
        let others: Vec<usize> = (0..n).filter(|&s| s != target).collect();
        let mut parents: Vec<usize> = others
            .choose_multiple(&mut rng, in_degree.min(others.len()))
            .copied()
            .collect();
        parents.sort_unstable();
        edges.extend(parents.into_iter().map(|s| (s, target)));
    }
    edges
}

pub(crate) const FIVE_NODE_SEED: u64 = 20_170_101;
pub(crate) const THIRTY_NODE_SEED: u64 = 20_170_330;
pub(crate) const THIRTY_NODE_IN_DEGREE: usize = 2;

pub fn draw_five_node() -> Result<ModeRecipe> {
    ModeRecipe::draw(
        "five-node-six-mode",
        5,
        &five_node_topologies(),
        DrawConfig::default(),
        FIVE_NODE_SEED,
    )
}

pub fn draw_thirty_node() -> Result<ModeRecipe> {
    let topo = random_topology(30, THIRTY_NODE_IN_DEGREE, THIRTY_NODE_SEED);
    let draw = DrawConfig {
        p: 1,
        screen_candidates: 20,
        ..DrawConfig::default()
    };
    ModeRecipe::draw("thirty-node", 30, &[topo], draw, THIRTY_NODE_SEED + 1)
}

/// One evaluation case: which mode to simulate and what to break.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub case_id: String,
    pub mode_index: usize,
    pub anomaly: AnomalySpec,
}

/// Broken-pattern sizes of the 30-case suite: 5x1, 10x2, 10x3, 5x4.
pub const PATTERN_SUITE_SIZES: [(usize, usize); 4] = [(1, 5), (2, 10), (3, 10), (4, 5)];

/// The 30-case broken-pattern suite. Cases cycle through the modes; each breaks
/// a distinct random subset of that mode's relational edges. Subsets that would
/// make the model non-stationary are redrawn.
pub fn pattern_suite(recipe: &ModeRecipe, seed: u64) -> Result<Vec<CaseSpec>> {
    if recipe.modes.is_empty() {
        return Err(Error::invalid("recipe has no modes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let mut seen: Vec<(usize, Vec<Pattern>)> = Vec::new();
    let mut index = 0;
    for (size, count) in PATTERN_SUITE_SIZES {
        for _ in 0..count {
            let mode_index = index % recipe.modes.len();
            let mode = &recipe.modes[mode_index];
            let pool = mode.relational_edges();
            if pool.len() < size {
                return Err(Error::invalid(format!(
                    "{} has {} relational edges, cannot break {size}",
                    mode.mode_id,
                    pool.len()
                )));
            }
            let mut attempts = 0;
            let broken = loop {
                attempts += 1;
                if attempts > 1000 {
                    return Err(Error::invalid("could not draw a distinct stationary case"));
                }
                let mut pick: Vec<Pattern> = pool.choose_multiple(&mut rng, size).copied().collect();
                pick.sort();
                if seen.iter().any(|(m, p)| *m == mode_index && *p == pick) {
                    continue;
                }
                if check_stationarity(&make_pattern_anomaly(mode, &pick)?) >= 1.0 {
                    continue;
                }
                break pick;
            };
            seen.push((mode_index, broken.clone()));
            cases.push(CaseSpec {
                case_id: format!("case{:02}", index + 1),
                mode_index,
                anomaly: AnomalySpec::PatternBreak {
                    broken_patterns: broken,
                },
            });
            index += 1;
        }
    }
    Ok(cases)
}

/// One delayed-node case per node of mode `mode_index`.
pub fn node_delay_suite(recipe: &ModeRecipe, mode_index: usize, delay: usize) -> Vec<CaseSpec> {
    (0..recipe.n())
        .map(|node| CaseSpec {
            case_id: format!("node{:02}", node + 1),
            mode_index,
            anomaly: AnomalySpec::NodeDelay { node, delay },
        })
        .collect()
}

/// Nominal run of one mode, labeled with its mode id.
pub fn simulate_mode(mode: &GraphMode, len: usize, burn_in: usize, seed: u64) -> Result<SyntheticDataset> {
    let mut data = simulate_var(&mode.realize(), len, burn_in, seed)?;
    data.meta.mode_id = Some(mode.mode_id.clone());
    Ok(data)
}

/// Anomalous run of one case with `len` samples. Node-delay runs simulate
/// `len + delay` samples so the trimmed result still has `len`.
pub fn simulate_case(recipe: &ModeRecipe, case: &CaseSpec, len: usize, burn_in: usize, seed: u64) -> Result<SyntheticDataset> {
    let mode = recipe
        .modes
        .get(case.mode_index)
        .ok_or_else(|| Error::invalid(format!("case {} names missing mode {}", case.case_id, case.mode_index)))?;
    case.anomaly.validate()?;
    match &case.anomaly {
        AnomalySpec::PatternBreak { broken_patterns } => {
            let model = make_pattern_anomaly(mode, broken_patterns)?;
            let mut data = simulate_var(&model, len, burn_in, seed)?;
            data.meta.mode_id = Some(mode.mode_id.clone());
            data.meta.anomaly = Some(case.anomaly.clone());
            data.meta.truth = Truth {
                patterns: broken_patterns.clone(),
                fault_node: None,
            };
            Ok(data)
        }
        AnomalySpec::NodeDelay { node, delay } => {
            let data = simulate_mode(mode, len + delay, burn_in, seed)?;
            make_node_delay_anomaly(&data, *node, *delay)
        }
    }
}
