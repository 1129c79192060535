//! The per-run metrics table and its CSV form. Cells that were not
//! measured stay empty; floats are written with Rust's shortest
//! round-trip formatting, so equal runs produce byte-equal files.

use crate::error::{Result, UniregError};

pub const METRIC_COLUMNS: [&str; 12] = [
    "step",
    "task_loss",
    "uniformity_loss",
    "disc_loss",
    "disc_accuracy",
    "eval_accuracy",
    "recall_at_1",
    "nmi",
    "max_ks",
    "occupancy",
    "entropy",
    "probe_accuracy",
];

/// One evaluation row. `step` counts completed training steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub task_loss: Option<f64>,
    pub uniformity_loss: Option<f64>,
    pub disc_loss: Option<f64>,
    pub disc_accuracy: Option<f64>,
    pub eval_accuracy: Option<f64>,
    pub recall_at_1: Option<f64>,
    pub nmi: Option<f64>,
    pub max_ks: Option<f64>,
    pub occupancy: Option<f64>,
    pub entropy: Option<f64>,
    pub probe_accuracy: Option<f64>,
}

impl MetricsRow {
    pub fn cells(&self) -> [Option<f64>; 11] {
        [
            self.task_loss,
            self.uniformity_loss,
            self.disc_loss,
            self.disc_accuracy,
            self.eval_accuracy,
            self.recall_at_1,
            self.nmi,
            self.max_ks,
            self.occupancy,
            self.entropy,
            self.probe_accuracy,
        ]
    }

    pub fn cells_mut(&mut self) -> [&mut Option<f64>; 11] {
        [
            &mut self.task_loss,
            &mut self.uniformity_loss,
            &mut self.disc_loss,
            &mut self.disc_accuracy,
            &mut self.eval_accuracy,
            &mut self.recall_at_1,
            &mut self.nmi,
            &mut self.max_ks,
            &mut self.occupancy,
            &mut self.entropy,
            &mut self.probe_accuracy,
        ]
    }

    /// (column name, value) for every filled cell.
    pub fn filled(&self) -> Vec<(&'static str, f64)> {
        METRIC_COLUMNS[1..]
            .iter()
            .zip(self.cells())
            .filter_map(|(name, v)| v.map(|v| (*name, v)))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn new() -> MetricsTable {
        MetricsTable::default()
    }

    /// Append a row; steps must be strictly increasing.
    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(UniregError::Contract(format!(
                    "metrics steps must strictly increase, got {} after {}",
                    row.step, last.step
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = METRIC_COLUMNS.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.step.to_string());
            for cell in row.cells() {
                out.push(',');
                if let Some(v) = cell {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<MetricsTable> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| UniregError::Format("metrics csv is empty".into()))?;
        if header != METRIC_COLUMNS.join(",") {
            return Err(UniregError::Format(format!(
                "unexpected metrics header `{header}`"
            )));
        }
        let mut table = MetricsTable::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != METRIC_COLUMNS.len() {
                return Err(UniregError::Format(format!(
                    "metrics row {} has {} fields, expected {}",
                    i + 1,
                    fields.len(),
                    METRIC_COLUMNS.len()
                )));
            }
            let mut row = MetricsRow {
                step: fields[0].parse().map_err(|_| {
                    UniregError::Format(format!("bad step `{}` in metrics row {}", fields[0], i + 1))
                })?,
                ..MetricsRow::default()
            };
            for (cell, field) in row.cells_mut().into_iter().zip(&fields[1..]) {
                if !field.is_empty() {
                    *cell = Some(field.parse().map_err(|_| {
                        UniregError::Format(format!(
                            "bad value `{field}` in metrics row {}",
                            i + 1
                        ))
                    })?);
                }
            }
            table.push(row)?;
        }
        Ok(table)
    }
}
