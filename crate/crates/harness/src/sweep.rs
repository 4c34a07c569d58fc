//! One-parameter sweeps over the sparsity weight or the interval width.

use std::fmt::{self, Write as _};
use std::fs;

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{HarnessError, Result};
use crate::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Lambda,
    S,
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "sparsity.lambda",
            SweepAxis::S => "sparsity.s",
        }
    }

    fn label(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::S => "s",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub accuracy: f64,
    /// Reductions are in percent, as in [`softprune::PruneReport`].
    pub channel_reduction: f64,
    pub param_reduction: f64,
    pub flops_reduction: f64,
    pub flops_after: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl fmt::Display for SweepTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8} | {:>8} | {:>12} | {:>10} | {:>9}", self.axis.label(), "Acc. (%)", "Channels ↓ (%)", "Params ↓ (%)", "FLOPs ↓ (%)")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>8} | {:>8.2} | {:>14.2} | {:>12.2} | {:>11.2}",
                r.value,
                100.0 * r.accuracy,
                r.channel_reduction,
                r.param_reduction,
                r.flops_reduction
            )?;
        }
        Ok(())
    }
}

impl SweepTable {
    pub fn csv(&self) -> String {
        let mut s = format!("{},accuracy,channels_reduction_pct,params_reduction_pct,flops_reduction_pct,flops_after\n", self.axis.label());
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.value, r.accuracy, r.channel_reduction, r.param_reduction, r.flops_reduction, r.flops_after);
        }
        s
    }
}

/// Parses a comma-separated list such as `0,1e-6,5e-6`.
pub fn parse_list(text: &str) -> Result<Vec<String>> {
    let values: Vec<String> = text.split(',').map(|v| v.trim().to_string()).collect();
    for v in &values {
        if v.parse::<f32>().map(|x| !x.is_finite()).unwrap_or(true) {
            return Err(HarnessError::InvalidConfig(format!("sweep value {v:?} is not a number")));
        }
    }
    Ok(values)
}

/// Trains one model per value. Run `i` writes to `<output.dir>/<axis>-<value>/`
/// and the table goes to `<output.dir>/sweep.csv`.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String], train_set: &Dataset, test_set: &Dataset) -> Result<SweepTable> {
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let run_dir = cfg.output_dir.join(format!("{}-{v}", axis.label()));
        let run_cfg = cfg.with(axis.key(), v)?.with("output.dir", run_dir.display())?;
        log::info!("sweep {}={v}", axis.label());
        let outcome = train::train(&run_cfg, train_set, test_set)?;
        let r = &outcome.summary.report;
        rows.push(SweepRow {
            value: v.clone(),
            accuracy: outcome.summary.accuracy,
            channel_reduction: r.channel_reduction(),
            param_reduction: r.param_reduction(),
            flops_reduction: r.flops_reduction(),
            flops_after: r.flops_after,
        });
    }
    let table = SweepTable { axis, rows };
    fs::create_dir_all(&cfg.output_dir).map_err(|e| HarnessError::io(&cfg.output_dir, e))?;
    let path = cfg.output_dir.join("sweep.csv");
    fs::write(&path, table.csv()).map_err(|e| HarnessError::io(&path, e))?;
    Ok(table)
}

pub fn sweep_from_config(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<SweepTable> {
    let (train_set, test_set) = cfg.load_datasets()?;
    sweep(cfg, axis, values, &train_set, &test_set)
}
