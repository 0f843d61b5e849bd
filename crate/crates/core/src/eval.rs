//! Accuracy metrics, node attribution and comparison reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::Truth;
use crate::Pattern;

fn check_patterns(sets: &[Vec<Pattern>], n: usize) -> Result<()> {
    for p in sets.iter().flatten() {
        if p.source >= n || p.target >= n {
            return Err(Error::invalid(format!("pattern {p} out of range for n = {n}")));
        }
    }
    Ok(())
}

fn set(ps: &[Pattern]) -> BTreeSet<Pattern> {
    ps.iter().copied().collect()
}

/// Fraction of (window, pattern) cells where the predicted anomalous flag
/// equals the true one, over all `n^2` patterns of every window.
pub fn alpha1(truth: &[Vec<Pattern>], predicted: &[Vec<Pattern>], n: usize) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(Error::shape(format!(
            "{} truth windows vs {} predicted",
            truth.len(),
            predicted.len()
        )));
    }
    if truth.is_empty() || n == 0 {
        return Err(Error::invalid("alpha1 needs at least one window and one node"));
    }
    check_patterns(truth, n)?;
    check_patterns(predicted, n)?;
    let cells = (truth.len() * n * n) as f64;
    let wrong: usize = truth
        .iter()
        .zip(predicted)
        .map(|(t, p)| set(t).symmetric_difference(&set(p)).count())
        .sum();
    Ok(1.0 - wrong as f64 / cells)
}

/// Fraction of windows whose true set is contained in the predicted set.
pub fn alpha2(truth: &[Vec<Pattern>], predicted: &[Vec<Pattern>]) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(Error::shape(format!(
            "{} truth windows vs {} predicted",
            truth.len(),
            predicted.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::invalid("alpha2 needs at least one window"));
    }
    let hits = truth.iter().zip(predicted).filter(|(t, p)| set(t).is_subset(&set(p))).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Fraction of windows whose predicted set equals the true set.
pub fn exact_match(truth: &[Vec<Pattern>], predicted: &[Vec<Pattern>]) -> Result<f64> {
    if truth.len() != predicted.len() || truth.is_empty() {
        return Err(Error::shape("exact match needs equal, non-empty window lists"));
    }
    let hits = truth.iter().zip(predicted).filter(|(t, p)| set(t) == set(p)).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorCount {
    pub discovered: usize,
    pub incorrect: usize,
    pub epsilon: f64,
    /// Nothing was discovered; `epsilon` is 0 by convention.
    pub no_discovery: bool,
}

impl ErrorCount {
    pub fn from_counts(discovered: usize, incorrect: usize) -> Self {
        ErrorCount {
            discovered,
            incorrect,
            epsilon: if discovered == 0 { 0.0 } else { incorrect as f64 / discovered as f64 },
            no_discovery: discovered == 0,
        }
    }

    /// Pooled totals; the ratio is recomputed from the summed counts.
    pub fn total(counts: &[ErrorCount]) -> Self {
        Self::from_counts(
            counts.iter().map(|c| c.discovered).sum(),
            counts.iter().map(|c| c.incorrect).sum(),
        )
    }
}

/// Whether a discovered pattern is explained by the ground truth: incident to
/// the fault node for node faults, in the broken set otherwise.
pub fn is_correct(truth: &Truth, pattern: Pattern) -> bool {
    match truth.fault_node {
        Some(node) => pattern.touches(node),
        None => truth.patterns.contains(&pattern),
    }
}

/// Share of discovered patterns that the ground truth does not explain.
pub fn epsilon(truth: &Truth, predicted: &[Pattern]) -> ErrorCount {
    let unique = set(predicted);
    let incorrect = unique.iter().filter(|&&p| !is_correct(truth, p)).count();
    ErrorCount::from_counts(unique.len(), incorrect)
}

/// A discovered pattern with its importance (for S³, the free-energy drop).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub pattern: Pattern,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub node: usize,
    pub incident: usize,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAttribution {
    /// Best first; ties on incidence go to the larger summed importance, then
    /// to the lower node index.
    pub ranking: Vec<NodeScore>,
    /// Every failed pattern touches the top node.
    pub explains_all: bool,
}

impl NodeAttribution {
    pub fn top(&self) -> usize {
        self.ranking[0].node
    }
}

/// Rank nodes by how many failed patterns touch them, self-loops included.
/// `None` when nothing failed.
pub fn attribute_node(failed: &[Scored], n: usize) -> Option<NodeAttribution> {
    if failed.is_empty() || n == 0 {
        return None;
    }
    let mut ranking: Vec<NodeScore> = (0..n)
        .map(|node| {
            let touching = failed.iter().filter(|s| s.pattern.touches(node));
            NodeScore {
                node,
                incident: touching.clone().count(),
                importance: touching.map(|s| s.importance.abs()).sum(),
            }
        })
        .collect();
    ranking.sort_by(|a, b| {
        b.incident
            .cmp(&a.incident)
            .then(b.importance.total_cmp(&a.importance))
            .then(a.node.cmp(&b.node))
    });
    let top = ranking[0].node;
    Some(NodeAttribution {
        explains_all: failed.iter().all(|s| s.pattern.touches(top)),
        ranking,
    })
}

/// One method's predictions on one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub method: String,
    pub n: usize,
    pub truth: Truth,
    /// Predicted anomalous patterns per scored test window.
    pub windows: Vec<Vec<Pattern>>,
    /// Case-level discovered patterns, strongest first.
    pub discovered: Vec<Scored>,
}

impl CaseResult {
    fn truth_windows(&self) -> Vec<Vec<Pattern>> {
        vec![self.truth.patterns.clone(); self.windows.len()]
    }

    fn discovered_patterns(&self) -> Vec<Pattern> {
        self.discovered.iter().map(|s| s.pattern).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case_id: String,
    pub method: String,
    pub windows: usize,
    pub alpha1: Option<f64>,
    pub alpha2: Option<f64>,
    pub errors: ErrorCount,
    pub top_node: Option<usize>,
    pub explains_all: bool,
}

/// Pooled metrics of one method. Window metrics are `None` when no case had
/// scored windows; node hits count only node-fault cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub method: String,
    pub cases: usize,
    pub windows: usize,
    pub alpha1: Option<f64>,
    pub alpha2: Option<f64>,
    pub exact_match: Option<f64>,
    pub errors: ErrorCount,
    pub node_cases: usize,
    pub node_hits: usize,
}

/// Flags of one case on the `n x n` pattern grid, for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatGrid {
    pub case_id: String,
    pub method: String,
    /// `discovered[source][target]`.
    pub discovered: Vec<Vec<u8>>,
    /// Patterns the truth explains: the broken set, or all patterns touching the fault node.
    pub truth: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub summaries: Vec<MetricSummary>,
    pub cases: Vec<CaseSummary>,
    pub heat: Vec<HeatGrid>,
}

/// Score every case and pool per method, in order of first appearance.
pub fn compare_report(results: &[CaseResult]) -> Result<Report> {
    let mut methods: Vec<String> = Vec::new();
    for r in results {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
        check_patterns(&r.windows, r.n)?;
        check_patterns(&[r.discovered_patterns()], r.n)?;
    }
    let mut cases = Vec::new();
    let mut heat = Vec::new();
    for r in results {
        let has_windows = !r.windows.is_empty();
        let attribution = attribute_node(&r.discovered, r.n);
        cases.push(CaseSummary {
            case_id: r.case_id.clone(),
            method: r.method.clone(),
            windows: r.windows.len(),
            alpha1: has_windows.then(|| alpha1(&r.truth_windows(), &r.windows, r.n)).transpose()?,
            alpha2: has_windows.then(|| alpha2(&r.truth_windows(), &r.windows)).transpose()?,
            errors: epsilon(&r.truth, &r.discovered_patterns()),
            top_node: attribution.as_ref().map(NodeAttribution::top),
            explains_all: attribution.is_some_and(|a| a.explains_all),
        });
        let grid = |f: &dyn Fn(Pattern) -> bool| {
            (0..r.n)
                .map(|s| (0..r.n).map(|t| u8::from(f(Pattern::new(s, t)))).collect())
                .collect()
        };
        let found = set(&r.discovered_patterns());
        heat.push(HeatGrid {
            case_id: r.case_id.clone(),
            method: r.method.clone(),
            discovered: grid(&|p| found.contains(&p)),
            truth: grid(&|p| is_correct(&r.truth, p)),
        });
    }
    let mut summaries = Vec::new();
    for method in &methods {
        let mine: Vec<&CaseResult> = results.iter().filter(|r| &r.method == method).collect();
        let scored: Vec<&CaseResult> = mine.iter().copied().filter(|r| !r.windows.is_empty()).collect();
        let truth: Vec<Vec<Pattern>> = scored.iter().flat_map(|r| r.truth_windows()).collect();
        let pred: Vec<Vec<Pattern>> = scored.iter().flat_map(|r| r.windows.clone()).collect();
        let n = scored.first().map_or(0, |r| r.n);
        let window_metrics = !truth.is_empty();
        if scored.iter().any(|r| r.n != n) {
            return Err(Error::shape(format!("method {method} mixes node counts")));
        }
        let node_cases: Vec<&CaseResult> = mine.iter().copied().filter(|r| r.truth.fault_node.is_some()).collect();
        let node_hits = node_cases
            .iter()
            .filter(|r| attribute_node(&r.discovered, r.n).map(|a| a.top()) == r.truth.fault_node)
            .count();
        let counts: Vec<ErrorCount> = mine.iter().map(|r| epsilon(&r.truth, &r.discovered_patterns())).collect();
        summaries.push(MetricSummary {
            method: method.clone(),
            cases: mine.len(),
            windows: truth.len(),
            alpha1: window_metrics.then(|| alpha1(&truth, &pred, n)).transpose()?,
            alpha2: window_metrics.then(|| alpha2(&truth, &pred)).transpose()?,
            exact_match: window_metrics.then(|| exact_match(&truth, &pred)).transpose()?,
            errors: ErrorCount::total(&counts),
            node_cases: node_cases.len(),
            node_hits,
        });
    }
    Ok(Report {
        summaries,
        cases,
        heat,
    })
}

fn percent(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

impl Report {
    /// Aligned-column summary: accuracy columns, then discovery counts.
    pub fn text(&self) -> String {
        let header = [
            "method", "cases", "windows", "alpha1 %", "alpha2 %", "exact %", "|ano|", "|err|", "eps %", "node hits",
        ];
        let rows: Vec<[String; 10]> = self
            .summaries
            .iter()
            .map(|s| {
                [
                    s.method.clone(),
                    s.cases.to_string(),
                    s.windows.to_string(),
                    percent(s.alpha1),
                    percent(s.alpha2),
                    percent(s.exact_match),
                    s.errors.discovered.to_string(),
                    s.errors.incorrect.to_string(),
                    format!("{:.2}", 100.0 * s.errors.epsilon),
                    if s.node_cases > 0 {
                        format!("{}/{}", s.node_hits, s.node_cases)
                    } else {
                        "-".to_string()
                    },
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |cells: Vec<&str>, out: &mut String| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(header.to_vec(), &mut out);
        for r in &rows {
            line(r.iter().map(String::as_str).collect(), &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(a: usize, b: usize) -> Pattern {
        Pattern::new(a, b)
    }

    fn scored(ps: &[(usize, usize, f64)]) -> Vec<Scored> {
        ps.iter()
            .map(|&(a, b, f)| Scored {
                pattern: p(a, b),
                importance: f,
            })
            .collect()
    }

    #[test]
    fn alpha1_extremes_and_counting() {
        let truth = vec![vec![p(0, 1)], vec![p(1, 0), p(1, 1)]];
        assert_eq!(alpha1(&truth, &truth, 2).unwrap(), 1.0);
        let complement = vec![vec![p(0, 0), p(1, 0), p(1, 1)], vec![p(0, 0), p(0, 1)]];
        assert_eq!(alpha1(&truth, &complement, 2).unwrap(), 0.0);
        // one miss and one false alarm over 8 cells
        let pred = vec![vec![], vec![p(1, 0), p(1, 1), p(0, 0)]];
        assert_eq!(alpha1(&truth, &pred, 2).unwrap(), 0.75);
        assert!(alpha1(&truth, &pred[..1], 2).is_err());
        assert!(alpha1(&[vec![p(2, 0)]], &[vec![]], 2).is_err());
    }

    #[test]
    fn alpha2_and_exact_match() {
        let truth = vec![vec![p(0, 1)], vec![p(0, 1)], vec![p(0, 1), p(1, 2)]];
        let pred = vec![vec![p(0, 1)], vec![p(0, 1), p(2, 2)], vec![]];
        assert!((alpha2(&truth, &pred).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((exact_match(&truth, &pred).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(alpha2(&[vec![p(0, 1)]], &[vec![]]).unwrap(), 0.0);
        assert!(alpha2(&[], &[]).is_err());
    }

    #[test]
    fn epsilon_conventions() {
        let node = Truth {
            patterns: vec![],
            fault_node: Some(0),
        };
        let e = epsilon(&node, &[p(0, 1), p(2, 0), p(0, 0)]);
        assert_eq!((e.discovered, e.incorrect, e.epsilon), (3, 0, 0.0));
        let e = epsilon(&node, &[]);
        assert!(e.no_discovery && e.epsilon == 0.0);
        let broken = Truth {
            patterns: vec![p(1, 2)],
            fault_node: None,
        };
        assert_eq!(epsilon(&broken, &[p(1, 2), p(2, 1)]).incorrect, 1);
        let t = ErrorCount::total(&[ErrorCount::from_counts(5, 1), ErrorCount::from_counts(8, 1)]);
        assert_eq!((t.discovered, t.incorrect), (13, 2));
        assert!((t.epsilon - 0.1538).abs() < 1e-4);
        let t = ErrorCount::from_counts(653, 18);
        assert!((t.epsilon - 0.0276).abs() < 1e-4);
    }

    #[test]
    fn attribution_by_incidence() {
        // node 1 of the one-based example is index 0 here
        let a = attribute_node(&scored(&[(0, 1, -1.0), (0, 2, -1.0), (3, 0, -1.0), (0, 0, -1.0)]), 4).unwrap();
        assert_eq!(a.top(), 0);
        assert_eq!(a.ranking[0].incident, 4);
        assert!(a.explains_all);
        let a = attribute_node(&scored(&[(1, 2, -0.5)]), 4).unwrap();
        assert_eq!(a.top(), 1);
        assert_eq!(a.ranking[1].node, 2);
        let a = attribute_node(&scored(&[(1, 2, -0.5), (2, 3, -0.2), (0, 1, -0.9)]), 4).unwrap();
        assert_eq!(a.top(), 1);
        assert!(!a.explains_all);
        assert!(attribute_node(&[], 4).is_none());
    }

    #[test]
    fn relabeling_leaves_metrics_unchanged() {
        let swap = |q: Pattern| Pattern::new(2 - q.source, 2 - q.target);
        let truth = vec![vec![p(0, 1)], vec![p(1, 2), p(0, 0)]];
        let pred = vec![vec![p(0, 1), p(2, 2)], vec![p(1, 2)]];
        let relabel = |s: &Vec<Vec<Pattern>>| -> Vec<Vec<Pattern>> {
            s.iter().map(|w| w.iter().map(|&q| swap(q)).collect()).collect()
        };
        assert_eq!(alpha1(&truth, &pred, 3).unwrap(), alpha1(&relabel(&truth), &relabel(&pred), 3).unwrap());
        assert_eq!(alpha2(&truth, &pred).unwrap(), alpha2(&relabel(&truth), &relabel(&pred)).unwrap());
    }

    fn case(id: &str, method: &str, truth: Truth, windows: Vec<Vec<Pattern>>, found: &[(usize, usize, f64)]) -> CaseResult {
        CaseResult {
            case_id: id.into(),
            method: method.into(),
            n: 3,
            truth,
            windows,
            discovered: scored(found),
        }
    }

    #[test]
    fn perfect_single_case_report() {
        let truth = Truth {
            patterns: vec![p(0, 1)],
            fault_node: None,
        };
        let r = compare_report(&[case("c1", "s3", truth, vec![vec![p(0, 1)]; 3], &[(0, 1, -2.0)])]).unwrap();
        let s = &r.summaries[0];
        assert_eq!((s.alpha1, s.alpha2, s.errors.epsilon), (Some(1.0), Some(1.0), 0.0));
        assert_eq!(r.heat[0].discovered[0][1], 1);
        assert!(r.text().contains("100.00"));
    }

    #[test]
    fn summary_totals_are_sums_of_cases() {
        let node = |k| Truth {
            patterns: vec![],
            fault_node: Some(k),
        };
        let results = vec![
            case("a", "s3", node(0), vec![], &[(0, 1, -1.0), (0, 2, -0.5), (1, 2, -0.1)]),
            case("b", "s3", node(2), vec![], &[(2, 2, -1.0)]),
            case("a", "var", node(0), vec![], &[(1, 2, 0.3)]),
            case("b", "var", node(2), vec![], &[]),
        ];
        let r = compare_report(&results).unwrap();
        assert_eq!(r.summaries.len(), 2);
        let s3 = &r.summaries[0];
        assert_eq!((s3.errors.discovered, s3.errors.incorrect), (4, 1));
        assert_eq!((s3.node_hits, s3.node_cases), (2, 2));
        assert_eq!(s3.alpha1, None);
        let var = &r.summaries[1];
        assert_eq!((var.errors.discovered, var.errors.incorrect, var.node_hits), (1, 1, 0));
        let per_case: usize = r.cases.iter().filter(|c| c.method == "s3").map(|c| c.errors.discovered).sum();
        assert_eq!(per_case, s3.errors.discovered);
        assert!(r.cases[3].errors.no_discovery);
        assert_eq!(r.heat[1].truth[2].iter().sum::<u8>(), 3);
    }
}
