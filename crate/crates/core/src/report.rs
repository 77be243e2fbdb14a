//! Per-step run records and their JSON form.
//!
//! Every summary value is recomputed from the records, so a report read back
//! from disk can be checked for consistency with [`RunReport::recompute`].

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::comm::LedgerSnapshot;
use crate::config::{Mode, SimConfig};

/// Everything measured for one global batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub host_to_worker_bytes: u64,
    pub worker_to_host_bytes: u64,
    pub interworker_bytes: u64,
    pub swap_events: u64,
    /// Feature entries in the batch (`B * F`).
    pub raw_features: u64,
    /// Distinct features in the batch.
    pub unique_features: u64,
    /// Traffic the same step would have caused without deduplication.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub no_vsi: Option<LedgerSnapshot>,
    pub load_secs: f64,
    pub manage_secs: f64,
    pub train_secs: f64,
}

impl StepRecord {
    pub fn traffic(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            host_to_worker_bytes: self.host_to_worker_bytes,
            worker_to_host_bytes: self.worker_to_host_bytes,
            interworker_bytes: self.interworker_bytes,
            swap_events: self.swap_events,
        }
    }

    pub fn dedup_ratio(&self) -> f64 {
        if self.raw_features == 0 {
            1.0
        } else {
            self.unique_features as f64 / self.raw_features as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Training rows per wall-clock second.
    pub throughput_rows_per_sec: f64,
    pub dedup_ratio_mean: f64,
    pub totals: LedgerSnapshot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub no_vsi_totals: Option<LedgerSnapshot>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: SimConfig,
    pub num_steps: u64,
    pub mode: Mode,
    pub records: Vec<StepRecord>,
    pub summary: Summary,
    pub wall_secs: f64,
}

/// Stage durations of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTimings {
    pub load_secs: Vec<f64>,
    pub manage_secs: Vec<f64>,
    pub train_secs: Vec<f64>,
    pub wall_secs: f64,
    pub mode: Mode,
}

impl StageTimings {
    /// Sum of each stage's durations, in load/manage/train order.
    pub fn stage_totals(&self) -> [f64; 3] {
        [
            self.load_secs.iter().sum(),
            self.manage_secs.iter().sum(),
            self.train_secs.iter().sum(),
        ]
    }
}

impl RunReport {
    pub fn new(config: SimConfig, records: Vec<StepRecord>, wall_secs: f64) -> Self {
        let summary = summarize(&config, &records, wall_secs);
        Self {
            mode: config.mode,
            num_steps: records.len() as u64,
            config,
            records,
            summary,
            wall_secs,
        }
    }

    /// Summary rebuilt from the records.
    pub fn recompute(&self) -> Summary {
        summarize(&self.config, &self.records, self.wall_secs)
    }

    pub fn loss_trace(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn timings(&self) -> StageTimings {
        StageTimings {
            load_secs: self.records.iter().map(|r| r.load_secs).collect(),
            manage_secs: self.records.iter().map(|r| r.manage_secs).collect(),
            train_secs: self.records.iter().map(|r| r.train_secs).collect(),
            wall_secs: self.wall_secs,
            mode: self.mode,
        }
    }

    /// Copy with every wall-clock derived field zeroed. Two runs with the
    /// same configuration are equal after this.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.wall_secs = 0.0;
        r.summary.throughput_rows_per_sec = 0.0;
        for rec in &mut r.records {
            rec.load_secs = 0.0;
            rec.manage_secs = 0.0;
            rec.train_secs = 0.0;
        }
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Writes the per-step records as CSV.
    pub fn write_steps_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "step,loss,host_to_worker_bytes,worker_to_host_bytes,interworker_bytes,swap_events,raw_features,unique_features"
        )?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.step,
                r.loss,
                r.host_to_worker_bytes,
                r.worker_to_host_bytes,
                r.interworker_bytes,
                r.swap_events,
                r.raw_features,
                r.unique_features
            )?;
        }
        Ok(())
    }
}

fn summarize(config: &SimConfig, records: &[StepRecord], wall_secs: f64) -> Summary {
    let mut totals = LedgerSnapshot::default();
    let mut no_vsi: Option<LedgerSnapshot> = None;
    for r in records {
        totals += r.traffic();
        if let Some(n) = r.no_vsi {
            *no_vsi.get_or_insert_with(LedgerSnapshot::default) += n;
        }
    }
    let rows = (records.len() * config.global_batch_size()) as f64;
    let dedup_ratio_mean = if records.is_empty() {
        0.0
    } else {
        records.iter().map(StepRecord::dedup_ratio).sum::<f64>() / records.len() as f64
    };
    Summary {
        throughput_rows_per_sec: if wall_secs > 0.0 { rows / wall_secs } else { 0.0 },
        dedup_ratio_mean,
        totals,
        no_vsi_totals: no_vsi,
        final_loss: records.last().map(|r| r.loss),
    }
}
