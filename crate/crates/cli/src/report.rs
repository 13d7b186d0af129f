//! Result tables: per-seed aggregation, rendering and side-by-side comparison.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use bsmall::meta::Algorithm;

use crate::config::ExperimentKind;
use crate::UserError;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959963984540054;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Half-width of the normal-approximation 95% interval; 0 for one value.
    pub ci95: f64,
    pub values: Vec<f64>,
}

/// Mean and normal-approximation 95% half-width (sample standard deviation).
pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            mean: f64::NAN,
            ci95: f64::NAN,
            values: Vec::new(),
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ci95 = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Z95 * (var / n as f64).sqrt()
    } else {
        0.0
    };
    Summary {
        mean,
        ci95,
        values: values.to_vec(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub steps: usize,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: ExperimentKind,
    pub algorithm: Algorithm,
    /// `mse` or `accuracy`.
    pub metric: String,
    pub k_shot: usize,
    pub seeds: Vec<u64>,
    pub table_steps: Vec<usize>,
    /// One row per adaptation step count, `0..=max(table_steps)`.
    pub rows: Vec<Row>,
    pub sparsity: Option<Summary>,
    pub overfit_gap: Option<Summary>,
}

impl Report {
    pub fn load(path: &Path) -> Result<Report, UserError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UserError(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| UserError(format!("{}: not a report: {e}", path.display())))
    }

    /// Rows listed in `table_steps`, in that order.
    pub fn table_rows(&self) -> Vec<&Row> {
        self.table_steps
            .iter()
            .filter_map(|s| self.rows.iter().find(|r| r.steps == *s))
            .collect()
    }

    pub fn row(&self, steps: usize) -> Option<&Row> {
        self.rows.iter().find(|r| r.steps == steps)
    }

    fn higher_is_better(&self) -> bool {
        self.metric == "accuracy"
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{} {} K={} seeds={:?}\n",
            self.experiment.name(),
            self.algorithm.name(),
            self.k_shot,
            self.seeds
        );
        for row in self.table_rows() {
            let _ = writeln!(
                s,
                "  {}@{:<3} {:.4} ± {:.4}",
                self.metric, row.steps, row.summary.mean, row.summary.ci95
            );
        }
        let _ = writeln!(s, "  sparsity  {}", fmt_opt(self.sparsity.as_ref()));
        let _ = writeln!(s, "  gap       {}", fmt_opt(self.overfit_gap.as_ref()));
        s
    }
}

fn fmt_opt(s: Option<&Summary>) -> String {
    match s {
        Some(s) => format!("{:.4} ± {:.4}", s.mean, s.ci95),
        None => "N/A".to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    A,
    B,
    Tie,
    /// No ordering applies (sparsity) or a side is missing.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// `b - a` when both sides exist.
    pub delta: Option<f64>,
    pub winner: Winner,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub experiment: ExperimentKind,
    pub a: String,
    pub b: String,
    pub cells: Vec<Cell>,
}

fn cell(label: String, a: Option<f64>, b: Option<f64>, higher_better: Option<bool>) -> Cell {
    let delta = a.zip(b).map(|(a, b)| b - a);
    let winner = match (a.zip(b), higher_better) {
        (Some((a, b)), Some(hi)) => {
            if a == b {
                Winner::Tie
            } else if (b > a) == hi {
                Winner::B
            } else {
                Winner::A
            }
        }
        _ => Winner::None,
    };
    Cell {
        label,
        a,
        b,
        delta,
        winner,
    }
}

/// Align two reports cell by cell.
pub fn compare(a: &Report, b: &Report) -> Result<Comparison, UserError> {
    if a.experiment != b.experiment {
        return Err(UserError(format!(
            "cannot compare a {} report with a {} report",
            a.experiment.name(),
            b.experiment.name()
        )));
    }
    if a.metric != b.metric {
        return Err(UserError(format!(
            "metric mismatch: {} vs {}",
            a.metric, b.metric
        )));
    }
    let hi = a.higher_is_better();
    let mut steps: Vec<usize> = a.table_steps.clone();
    for s in &b.table_steps {
        if !steps.contains(s) {
            steps.push(*s);
        }
    }
    let mut cells: Vec<Cell> = steps
        .iter()
        .map(|&s| {
            let get = |r: &Report| r.row(s).map(|row| row.summary.mean);
            cell(format!("{}@{s}", a.metric), get(a), get(b), Some(hi))
        })
        .collect();
    let mean = |s: &Option<Summary>| s.as_ref().map(|s| s.mean);
    cells.push(cell(
        "sparsity".into(),
        mean(&a.sparsity),
        mean(&b.sparsity),
        None,
    ));
    cells.push(cell(
        "overfit_gap".into(),
        mean(&a.overfit_gap),
        mean(&b.overfit_gap),
        Some(false),
    ));
    Ok(Comparison {
        experiment: a.experiment,
        a: a.algorithm.name().to_string(),
        b: b.algorithm.name().to_string(),
        cells,
    })
}

impl Comparison {
    pub fn render(&self) -> String {
        let num = |v: Option<f64>| v.map_or_else(|| "N/A".to_string(), |v| format!("{v:.4}"));
        let mut s = format!(
            "{:<14}{:>12}{:>12}{:>12}  winner\n",
            "cell", self.a, self.b, "delta"
        );
        for c in &self.cells {
            let w = match c.winner {
                Winner::A => self.a.as_str(),
                Winner::B => self.b.as_str(),
                Winner::Tie => "tie",
                Winner::None => "-",
            };
            let _ = writeln!(
                s,
                "{:<14}{:>12}{:>12}{:>12}  {w}",
                c.label,
                num(c.a),
                num(c.b),
                num(c.delta)
            );
        }
        s
    }
}

/// Per-seed outcome of a sensor-network run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationSeed {
    pub seed: u64,
    pub total_bytes: usize,
    pub pruned_broadcast_bytes: usize,
    pub final_node_val_loss: Option<Vec<f64>>,
    /// `Some(true)` when the oracle check ran and matched.
    pub oracle_match: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensornetReport {
    pub algorithm: Algorithm,
    pub nodes: usize,
    pub rounds: usize,
    pub seeds: Vec<SimulationSeed>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(alg: Algorithm, mse: &[f64], sparsity: Option<f64>) -> Report {
        Report {
            experiment: ExperimentKind::Sinusoid,
            algorithm: alg,
            metric: "mse".into(),
            k_shot: 10,
            seeds: vec![0],
            table_steps: vec![1, 5, 10],
            rows: mse
                .iter()
                .enumerate()
                .map(|(steps, &m)| Row {
                    steps,
                    summary: summarize(&[m]),
                })
                .collect(),
            sparsity: sparsity.map(|s| summarize(&[s])),
            overfit_gap: None,
        }
    }

    #[test]
    fn ci_matches_hand_value() {
        let s = summarize(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        // sd = 1, ci = 1.96 / sqrt(3)
        assert!((s.ci95 - Z95 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(summarize(&[4.0]).ci95, 0.0);
    }

    #[test]
    fn self_comparison_has_zero_deltas() {
        let r = report(
            Algorithm::Bsmall,
            &(0..=10).map(|i| 1.0 / (i + 1) as f64).collect::<Vec<_>>(),
            Some(0.2),
        );
        let c = compare(&r, &r).unwrap();
        for cell in &c.cells {
            if let Some(d) = cell.delta {
                assert_eq!(d, 0.0);
                assert_eq!(
                    cell.winner,
                    if cell.label == "sparsity" {
                        Winner::None
                    } else {
                        Winner::Tie
                    }
                );
            }
        }
    }

    #[test]
    fn lower_mse_wins_and_missing_sparsity_is_na() {
        let a = report(Algorithm::Maml, &[3.0; 11], None);
        let b = report(Algorithm::Bsmall, &[2.0; 11], Some(0.2));
        let c = compare(&a, &b).unwrap();
        assert!(c
            .cells
            .iter()
            .filter(|c| c.label.starts_with("mse"))
            .all(|c| c.winner == Winner::B));
        let sp = c.cells.iter().find(|c| c.label == "sparsity").unwrap();
        assert_eq!((sp.a, sp.delta), (None, None));
        assert!(c.render().contains("N/A"));
    }

    #[test]
    fn mismatched_kinds_are_rejected() {
        let a = report(Algorithm::Maml, &[1.0; 11], None);
        let mut b = a.clone();
        b.experiment = ExperimentKind::SynthClass;
        assert!(compare(&a, &b).is_err());
    }
}
