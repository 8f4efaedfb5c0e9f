//! Grid of toy training runs over ordering, direction, conv branch and
//! head count.

use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, OrderStrategy};
use super::data::ToyTask;
use super::net::{derive_seed, Model};
use super::train::{train_toy, TrainConfig};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationCell {
    pub strategy: OrderStrategy,
    pub bidirectional: bool,
    pub conv_branch: bool,
    pub heads: usize,
}

impl fmt::Display for AblationCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/h{}",
            self.strategy,
            if self.bidirectional { "bi" } else { "uni" },
            if self.conv_branch { "conv" } else { "noconv" },
            self.heads
        )
    }
}

impl AblationCell {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            serialization: self.strategy,
            bidirectional: self.bidirectional,
            conv_branch: self.conv_branch,
            heads: self.heads,
            ..base.clone()
        }
    }
}

/// Axis values; the grid is their Cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub strategies: Vec<OrderStrategy>,
    pub bidirectional: Vec<bool>,
    pub conv_branch: Vec<bool>,
    pub heads: Vec<usize>,
}

impl AblationGrid {
    /// The full set of axes.
    pub fn full() -> Self {
        AblationGrid {
            strategies: vec![OrderStrategy::Shuffle, OrderStrategy::Sequential, OrderStrategy::None],
            bidirectional: vec![true, false],
            conv_branch: vec![true, false],
            heads: vec![1, 3, 6, 12],
        }
    }

    pub fn cells(&self) -> Vec<AblationCell> {
        let mut out = Vec::new();
        for &strategy in &self.strategies {
            for &bidirectional in &self.bidirectional {
                for &conv_branch in &self.conv_branch {
                    for &heads in &self.heads {
                        out.push(AblationCell {
                            strategy,
                            bidirectional,
                            conv_branch,
                            heads,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub seed: u64,
    /// `None` when the run failed; `error` then says why.
    pub final_test_acc: Option<f64>,
    pub best_test_acc: Option<f64>,
    pub final_train_acc: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

fn run_cell(
    base: &ModelConfig,
    cell: &AblationCell,
    seed: u64,
    task: &ToyTask,
    tc: &TrainConfig,
) -> Result<AblationRow> {
    let cfg = ModelConfig {
        shuffle_seed: seed,
        ..cell.apply(base)
    };
    let mut model = Model::new(cfg, derive_seed(seed, &[0]))?;
    let task = ToyTask {
        seed: derive_seed(task.seed, &[seed]),
        ..*task
    };
    let (train, test) = task.split()?;
    let tc = TrainConfig { seed, ..*tc };
    let report = train_toy(&mut model, &train, &test, &tc, &mut |_| {})?;
    let last = report.final_metrics().copied().expect("at least one epoch");
    Ok(AblationRow {
        cell: *cell,
        seed,
        final_test_acc: Some(last.test_acc),
        best_test_acc: Some(report.best_test_acc),
        final_train_acc: Some(last.train_acc),
        final_loss: Some(last.loss),
        error: None,
    })
}

/// Train every cell once per seed. Seeds pair runs across cells: the same
/// seed gives the same data. A failing run is recorded and the grid goes on.
pub fn ablate(
    base: &ModelConfig,
    cells: &[AblationCell],
    seeds: &[u64],
    task: &ToyTask,
    tc: &TrainConfig,
    on_row: &mut dyn FnMut(&AblationRow),
) -> Vec<AblationRow> {
    let mut rows = Vec::with_capacity(cells.len() * seeds.len());
    for cell in cells {
        for &seed in seeds {
            let row = run_cell(base, cell, seed, task, tc).unwrap_or_else(|e| AblationRow {
                cell: *cell,
                seed,
                final_test_acc: None,
                best_test_acc: None,
                final_train_acc: None,
                final_loss: None,
                error: Some(e.to_string()),
            });
            on_row(&row);
            rows.push(row);
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: AblationCell,
    pub runs: usize,
    pub failed: usize,
    /// Means over successful runs.
    pub mean_final_test_acc: Option<f64>,
    pub mean_best_test_acc: Option<f64>,
}

pub fn summarize(rows: &[AblationRow]) -> Vec<CellSummary> {
    let mut cells: Vec<AblationCell> = Vec::new();
    for r in rows {
        if !cells.contains(&r.cell) {
            cells.push(r.cell);
        }
    }
    cells
        .into_iter()
        .map(|cell| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.cell == cell).collect();
            let mean = |f: fn(&AblationRow) -> Option<f64>| {
                let v: Vec<f64> = mine.iter().filter_map(|r| f(r)).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            CellSummary {
                cell,
                runs: mine.len(),
                failed: mine.iter().filter(|r| r.error.is_some()).count(),
                mean_final_test_acc: mean(|r| r.final_test_acc),
                mean_best_test_acc: mean(|r| r.best_test_acc),
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

pub const ROW_HEADER: &str = "strategy\tbidirectional\tconv_branch\theads\tseed\tstatus\tfinal_test_acc\tbest_test_acc\tfinal_train_acc\tfinal_loss";

/// One tab-separated line per run, header first.
pub fn rows_tsv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ROW_HEADER);
    s.push('\n');
    for r in rows {
        let status = match &r.error {
            None => "ok".to_string(),
            Some(e) => format!("failed: {}", e.replace(['\t', '\n'], " ")),
        };
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.cell.strategy,
            r.cell.bidirectional,
            r.cell.conv_branch,
            r.cell.heads,
            r.seed,
            status,
            opt(r.final_test_acc),
            opt(r.best_test_acc),
            opt(r.final_train_acc),
            opt(r.final_loss)
        );
    }
    s
}

pub const SUMMARY_HEADER: &str =
    "strategy\tbidirectional\tconv_branch\theads\truns\tfailed\tmean_final_test_acc\tmean_best_test_acc";

pub fn summary_tsv(summary: &[CellSummary]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for c in summary {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            c.cell.strategy,
            c.cell.bidirectional,
            c.cell.conv_branch,
            c.cell.heads,
            c.runs,
            c.failed,
            opt(c.mean_final_test_acc),
            opt(c.mean_best_test_acc)
        );
    }
    s
}
