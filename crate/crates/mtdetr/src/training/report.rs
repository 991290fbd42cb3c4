//! Per-epoch training records, written as line-delimited JSON plus a
//! summary file.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub domain: String,
    pub det_loss: f64,
    pub cls_loss: f64,
    pub l1_loss: f64,
    pub giou_loss: f64,
    pub adv_enc_dqfa: Option<f64>,
    pub adv_dec_dqfa: Option<f64>,
    pub adv_bgpa: Option<f64>,
    pub adv_tifa: Option<f64>,
    /// Weighted sum of the head log-likelihoods (the discriminators maximize
    /// this; the reporting objective subtracts it).
    pub adv_total: f64,
    /// det_src + det_tgt - adv bookkeeping total.
    pub objective_total: f64,
    pub lr: f64,
    pub pseudo_count: Option<usize>,
    pub pseudo_mean_score: Option<f64>,
    /// Set when an entire target epoch produced zero pseudo labels.
    pub pseudo_empty_epoch: Option<bool>,
    pub teacher_pseudo_precision: Option<f64>,
    pub student_pseudo_precision: Option<f64>,
    pub map50_student_val: Option<f64>,
    pub map50_teacher_val: Option<f64>,
    pub queries_bitequal: Option<bool>,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportSummary {
    pub n_epochs: usize,
    pub final_map50_student_val: Option<f64>,
    pub final_map50_teacher_val: Option<f64>,
    pub total_wall_clock_s: f64,
    pub warnings: Vec<String>,
}

impl TrainReport {
    pub fn push(&mut self, record: EpochRecord) {
        self.records.push(record);
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        self.warnings.push(message.into());
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            n_epochs: self.records.len(),
            final_map50_student_val: self.records.last().and_then(|r| r.map50_student_val),
            final_map50_teacher_val: self.records.last().and_then(|r| r.map50_teacher_val),
            total_wall_clock_s: self.records.iter().map(|r| r.wall_clock_s).sum(),
            warnings: self.warnings.clone(),
        }
    }

    /// One JSON object per epoch.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r)
                .map_err(|e| Error::Format(format!("report record: {e}")))?;
            writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.summary())
            .map_err(|e| Error::Format(format!("report summary: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(line)
                    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
            );
        }
        Ok(Self { records, warnings: Vec::new() })
    }
}
