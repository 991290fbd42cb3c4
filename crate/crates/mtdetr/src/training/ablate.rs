//! Ablation sweep: train each configuration end to end (fresh model per
//! arm), evaluate target-val mAP@0.5, and report a comparison table.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{burn_in, init_transfer, transfer_train, TrainContext};
use crate::checkpoint::Checkpoint;
use crate::config::{Components, TrainConfig};
use crate::data::{Dataset, Domain};
use crate::detector::Detector;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmResult {
    pub configuration: String,
    pub seed: u64,
    pub map50_student_val: f64,
    pub map50_teacher_val: Option<f64>,
    /// Teacher/student pseudo-label precision at the transfer midpoint.
    pub teacher_pseudo_precision: Option<f64>,
    pub student_pseudo_precision: Option<f64>,
    /// All per-epoch query bit-equality observations (transfer arms).
    pub queries_bitequal_all_epochs: Option<bool>,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub configuration: String,
    pub per_seed: Vec<ArmResult>,
    pub median_map50: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    pub fn median_of(&self, configuration: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.configuration == configuration)
            .map(|r| r.median_map50)
    }

    /// Text table, one row per configuration.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<24} {:>16} {:>8}\n", "configuration", "target-val mAP50", "seeds"));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<24} {:>16.4} {:>8}\n",
                row.configuration,
                row.median_map50,
                row.per_seed.len()
            ));
        }
        out
    }
}

pub struct ArmSpec {
    pub components: Components,
    pub seed: u64,
}

/// Everything loaded once and shared by all arms.
pub struct AblationData {
    pub source: Dataset,
    pub target: Dataset,
    pub val: Dataset,
}

impl AblationData {
    pub fn load(data_root: &Path) -> Result<Self> {
        let source = Dataset::load(&data_root.join("source-train"), Domain::Source)?;
        let target = Dataset::load(&data_root.join("target-train"), Domain::Target)?;
        let val = Dataset::load(&data_root.join("target-val"), Domain::Target)?;
        Ok(Self { source, target, val })
    }
}

/// Train one configuration end to end. Source-only runs burn-in only; mean
/// teacher configurations continue into transfer. Artifacts are written
/// under `out_dir` when given.
pub fn run_arm(
    detector: &Detector,
    base_config: &TrainConfig,
    spec: &ArmSpec,
    data: &AblationData,
    out_dir: Option<&Path>,
) -> Result<ArmResult> {
    let t0 = std::time::Instant::now();
    let mut config = base_config.clone();
    config.seed = spec.seed;
    let ctx = TrainContext {
        detector,
        config: &config,
        components: spec.components,
        source: &data.source,
        target: &data.target,
        val: Some(&data.val),
    };
    let (state, burn_report) = burn_in(&ctx)?;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        burn_report.write_jsonl(&dir.join("burn_in_report.jsonl"))?;
        Checkpoint::new(
            state.params.clone(),
            "burn_in",
            config.seed,
            state.next_epoch,
            config.clone(),
            detector.cfg.clone(),
        )
        .with_optimizer(&state.adam)
        .save(&dir.join("burn_in.ckpt"))?;
    }

    let label = spec.components.label();
    if !spec.components.mean_teacher {
        let map = burn_report
            .records
            .last()
            .and_then(|r| r.map50_student_val)
            .ok_or_else(|| Error::Eval("burn-in produced no validation mAP".into()))?;
        if let Some(dir) = out_dir {
            burn_report.write_summary(&dir.join("burn_in_summary.json"))?;
        }
        return Ok(ArmResult {
            configuration: label,
            seed: spec.seed,
            map50_student_val: map,
            map50_teacher_val: None,
            teacher_pseudo_precision: None,
            student_pseudo_precision: None,
            queries_bitequal_all_epochs: None,
            wall_clock_s: t0.elapsed().as_secs_f64(),
        });
    }

    let mut tstate = init_transfer(&ctx, state.params)?;
    let transfer_report = transfer_train(&ctx, &mut tstate)?;
    if let Some(dir) = out_dir {
        transfer_report.write_jsonl(&dir.join("transfer_report.jsonl"))?;
        transfer_report.write_summary(&dir.join("transfer_summary.json"))?;
        Checkpoint::new(
            tstate.pair.student.clone(),
            "transfer_student",
            config.seed,
            tstate.next_epoch,
            config.clone(),
            detector.cfg.clone(),
        )
        .with_optimizer(&tstate.adam)
        .save(&dir.join("student.ckpt"))?;
        Checkpoint::new(
            tstate.pair.teacher_snapshot(),
            "transfer_teacher",
            config.seed,
            tstate.next_epoch,
            config.clone(),
            detector.cfg.clone(),
        )
        .save(&dir.join("teacher.ckpt"))?;
    }
    let last = transfer_report
        .records
        .last()
        .ok_or_else(|| Error::Eval("transfer produced no epochs".into()))?;
    let map = last
        .map50_student_val
        .ok_or_else(|| Error::Eval("transfer produced no validation mAP".into()))?;
    let midpoint = transfer_report
        .records
        .iter()
        .find(|r| r.teacher_pseudo_precision.is_some());
    Ok(ArmResult {
        configuration: label,
        seed: spec.seed,
        map50_student_val: map,
        map50_teacher_val: last.map50_teacher_val,
        teacher_pseudo_precision: midpoint.and_then(|r| r.teacher_pseudo_precision),
        student_pseudo_precision: midpoint.and_then(|r| r.student_pseudo_precision),
        queries_bitequal_all_epochs: Some(
            transfer_report
                .records
                .iter()
                .all(|r| r.queries_bitequal.unwrap_or(false)),
        ),
        wall_clock_s: t0.elapsed().as_secs_f64(),
    })
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Run every (configuration, seed) arm and aggregate per-configuration
/// medians. Seeds are `base seed, base+1, ..`. Sequential by default; with
/// `parallel` each arm trains on its own thread (arms stay internally
/// deterministic because every arm owns its seeds).
pub fn run_ablation(
    detector: &Detector,
    base_config: &TrainConfig,
    configurations: &[Components],
    n_seeds: usize,
    data: &AblationData,
    out_dir: Option<&Path>,
    parallel: bool,
) -> Result<AblationResult> {
    if configurations.is_empty() {
        return Err(Error::Usage("no ablation configurations given".into()));
    }
    if n_seeds == 0 {
        return Err(Error::Usage("need at least one seed".into()));
    }
    let mut specs: Vec<(usize, ArmSpec, Option<PathBuf>)> = Vec::new();
    for (ci, &components) in configurations.iter().enumerate() {
        for k in 0..n_seeds {
            let seed = base_config.seed + k as u64;
            let dir = out_dir.map(|d| d.join(format!("{}-seed{}", components.label(), seed)));
            specs.push((ci, ArmSpec { components, seed }, dir));
        }
    }

    let mut results: Vec<(usize, ArmResult)> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = specs
                .iter()
                .map(|(ci, spec, dir)| {
                    let ci = *ci;
                    scope.spawn(move || -> Result<(usize, ArmResult)> {
                        let r = run_arm(detector, base_config, spec, data, dir.as_deref())?;
                        Ok((ci, r))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation arm thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        let mut out = Vec::new();
        for (ci, spec, dir) in &specs {
            out.push((*ci, run_arm(detector, base_config, spec, data, dir.as_deref())?));
        }
        out
    };
    results.sort_by_key(|(ci, r)| (*ci, r.seed));

    let mut rows = Vec::new();
    for (ci, &components) in configurations.iter().enumerate() {
        let per_seed: Vec<ArmResult> = results
            .iter()
            .filter(|(i, _)| *i == ci)
            .map(|(_, r)| r.clone())
            .collect();
        let mut maps: Vec<f64> = per_seed.iter().map(|r| r.map50_student_val).collect();
        rows.push(AblationRow {
            configuration: components.label(),
            median_map50: median(&mut maps),
            per_seed,
        });
    }
    let result = AblationResult { rows };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(&result)
            .map_err(|e| Error::Format(format!("ablation result: {e}")))?;
        std::fs::write(dir.join("ablation.json"), json)
            .map_err(|e| Error::io(dir.join("ablation.json"), e))?;
        std::fs::write(dir.join("ablation_table.txt"), result.table())
            .map_err(|e| Error::io(dir.join("ablation_table.txt"), e))?;
    }
    Ok(result)
}
