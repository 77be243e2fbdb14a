//! Multi-run experiments: strategy comparison, cache-size sweep and the
//! deduplication traffic report. Each returns plain rows that can be written
//! as CSV; every value is recomputable from the underlying run records.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::comm::param_state_bytes;
use crate::config::{SimConfig, Strategy};
use crate::error::Result;
use crate::pipeline::Simulator;
use crate::report::{RunReport, StepRecord};

/// Loss traces of the three strategies over the same data stream.
#[derive(Debug, Clone)]
pub struct StrategyComparison {
    pub host: RunReport,
    pub prefetch: RunReport,
    pub cache: RunReport,
}

impl StrategyComparison {
    /// First step where the prefetch loss differs from the cache loss.
    pub fn prefetch_divergence(&self) -> Option<u64> {
        first_divergence(&self.cache.loss_trace(), &self.prefetch.loss_trace())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,loss_host,loss_prefetch,loss_cache")?;
        for ((h, p), c) in self.host.records.iter().zip(&self.prefetch.records).zip(&self.cache.records) {
            writeln!(out, "{},{},{},{}", h.step, h.loss, p.loss, c.loss)?;
        }
        Ok(())
    }
}

/// Index of the first position where the traces differ.
pub fn first_divergence(a: &[f64], b: &[f64]) -> Option<u64> {
    a.iter()
        .zip(b)
        .position(|(x, y)| x.to_bits() != y.to_bits())
        .map(|p| p as u64)
}

fn with_strategy(base: &SimConfig, strategy: Strategy) -> SimConfig {
    SimConfig {
        strategy,
        ..base.clone()
    }
}

/// Runs the host, prefetch and cache strategies with one seed.
pub fn compare_strategies(base: &SimConfig, num_steps: u64) -> Result<StrategyComparison> {
    let run = |s| Simulator::new(with_strategy(base, s))?.run(num_steps);
    Ok(StrategyComparison {
        host: run(Strategy::Host)?,
        prefetch: run(Strategy::Prefetch)?,
        cache: run(Strategy::Cache)?,
    })
}

/// Features each worker owns on average over the whole vocabulary; the unit
/// in which sweep capacities are expressed.
pub fn working_set_scale(config: &SimConfig) -> usize {
    config.vocabulary_size.div_ceil(config.num_workers as u64) as usize
}

/// One row of the cache-size sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub capacity: usize,
    /// First step that evicted anything, `None` if nothing was ever evicted.
    pub first_eviction_step: Option<u64>,
    pub mean_swap_ratio: f64,
}

/// Bytes moved between host and buffers in `record` relative to moving the
/// whole working set of the batch both ways.
pub fn swap_ratio(record: &StepRecord, dim: usize) -> f64 {
    let full = 2 * param_state_bytes(record.unique_features, dim);
    if full == 0 {
        0.0
    } else {
        (record.host_to_worker_bytes + record.worker_to_host_bytes) as f64 / full as f64
    }
}

/// Sweep metrics of a finished cache-strategy run.
pub fn sweep_row(report: &RunReport) -> SweepRow {
    let dim = report.config.embedding_dim;
    let recs = &report.records;
    SweepRow {
        capacity: report.config.cache_capacity,
        first_eviction_step: recs.iter().find(|r| r.swap_events > 0).map(|r| r.step),
        mean_swap_ratio: if recs.is_empty() {
            0.0
        } else {
            recs.iter().map(|r| swap_ratio(r, dim)).sum::<f64>() / recs.len() as f64
        },
    }
}

/// One cache-strategy run per capacity, all with the same seed.
pub fn cache_sweep(base: &SimConfig, capacities: &[usize], num_steps: u64) -> Result<Vec<SweepRow>> {
    capacities
        .iter()
        .map(|&capacity| {
            let config = SimConfig {
                cache_capacity: capacity,
                ..with_strategy(base, Strategy::Cache)
            };
            Ok(sweep_row(&Simulator::new(config)?.run(num_steps)?))
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "capacity,first_eviction_step,mean_swap_ratio")?;
    for r in rows {
        let first = r.first_eviction_step.map(|s| s.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{}", r.capacity, first, r.mean_swap_ratio)?;
    }
    Ok(())
}

/// Per-step traffic with and without deduplication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VsiRow {
    pub step: u64,
    pub raw_features: u64,
    pub unique_features: u64,
    pub bytes_with_vsi: u64,
    pub bytes_without_vsi: u64,
}

impl VsiRow {
    /// Fraction of traffic saved by deduplication.
    pub fn reduction(&self) -> f64 {
        if self.bytes_without_vsi == 0 {
            0.0
        } else {
            1.0 - self.bytes_with_vsi as f64 / self.bytes_without_vsi as f64
        }
    }
}

pub fn vsi_rows(report: &RunReport) -> Vec<VsiRow> {
    report
        .records
        .iter()
        .map(|r| VsiRow {
            step: r.step,
            raw_features: r.raw_features,
            unique_features: r.unique_features,
            bytes_with_vsi: r.traffic().total_bytes(),
            bytes_without_vsi: r
                .no_vsi
                .expect("run was configured to track traffic without deduplication")
                .total_bytes(),
        })
        .collect()
}

/// Runs `base` with the no-deduplication shadow ledger enabled.
pub fn vsi_report(base: &SimConfig, num_steps: u64) -> Result<Vec<VsiRow>> {
    let config = SimConfig {
        track_no_vsi: true,
        ..base.clone()
    };
    Ok(vsi_rows(&Simulator::new(config)?.run(num_steps)?))
}

pub fn write_vsi_csv<W: Write>(rows: &[VsiRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "step,raw_features,unique_features,bytes_with_vsi,bytes_without_vsi")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.step, r.raw_features, r.unique_features, r.bytes_with_vsi, r.bytes_without_vsi
        )?;
    }
    Ok(())
}
