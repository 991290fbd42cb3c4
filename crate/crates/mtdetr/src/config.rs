//! Training configuration (TOML-loadable) and ablation component sets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentWeights;
use crate::error::{Error, Result};

/// Gradient clipping at this global norm, the usual stabilization for this
/// detector family.
pub const GRAD_CLIP_NORM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub burn_in_epochs: usize,
    pub transfer_epochs: usize,
    pub lr_burn_in: f64,
    pub lr_transfer: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epoch_burn_in: usize,
    pub lr_decay_epoch_transfer: usize,
    pub batch_size_burn_in: usize,
    pub batch_size_transfer: usize,
    /// EMA smoothing coefficient.
    pub alpha: f64,
    /// Pseudo-label confidence threshold.
    pub tau: f64,
    pub lambda_enc_dqfa: f64,
    pub lambda_dec_dqfa: f64,
    pub lambda_bgpa: f64,
    pub lambda_tifa: f64,
    pub lambda_grl: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            burn_in_epochs: 12,
            transfer_epochs: 8,
            lr_burn_in: 2e-4,
            lr_transfer: 2e-6,
            lr_decay_factor: 0.1,
            lr_decay_epoch_burn_in: 10,
            lr_decay_epoch_transfer: 4,
            batch_size_burn_in: 4,
            batch_size_transfer: 2,
            alpha: crate::mean_teacher::DEFAULT_ALPHA,
            tau: crate::mean_teacher::DEFAULT_TAU,
            lambda_enc_dqfa: 1.0,
            lambda_dec_dqfa: 1.0,
            lambda_bgpa: 1.0,
            lambda_tifa: 1.0,
            lambda_grl: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_burn_in <= 0.0 || self.lr_transfer <= 0.0 || self.lr_decay_factor <= 0.0 {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau {} outside (0,1)", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if self.batch_size_burn_in == 0 || self.batch_size_transfer == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        self.alignment_weights().validate()?;
        if !(self.lambda_grl.is_finite() && self.lambda_grl >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_grl must be finite and >= 0, got {}",
                self.lambda_grl
            )));
        }
        Ok(())
    }

    pub fn alignment_weights(&self) -> AlignmentWeights {
        AlignmentWeights {
            enc_dqfa: self.lambda_enc_dqfa,
            dec_dqfa: self.lambda_dec_dqfa,
            bgpa: self.lambda_bgpa,
            tifa: self.lambda_tifa,
        }
    }

    /// Learning rate for a 1-based epoch within a phase: decayed once after
    /// the configured decay epoch.
    pub fn lr_at(&self, base: f64, decay_epoch: usize, epoch: usize) -> f64 {
        if epoch > decay_epoch {
            base * self.lr_decay_factor
        } else {
            base
        }
    }
}

/// Which parts of the method a training run carries. One value of this type
/// describes one row of the ablation sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub mean_teacher: bool,
    pub shared_queries: bool,
    pub dqfa_enc: bool,
    pub dqfa_dec: bool,
    pub bgpa: bool,
    pub tifa: bool,
}

impl Components {
    /// Plain supervised source training, no transfer machinery at all.
    pub fn source_only() -> Self {
        Self {
            mean_teacher: false,
            shared_queries: false,
            dqfa_enc: false,
            dqfa_dec: false,
            bgpa: false,
            tifa: false,
        }
    }

    /// Mean teacher with shared queries, no feature alignment.
    pub fn mt_only() -> Self {
        Self {
            mean_teacher: true,
            shared_queries: true,
            dqfa_enc: false,
            dqfa_dec: false,
            bgpa: false,
            tifa: false,
        }
    }

    /// Everything on.
    pub fn full() -> Self {
        Self {
            mean_teacher: true,
            shared_queries: true,
            dqfa_enc: true,
            dqfa_dec: true,
            bgpa: true,
            tifa: true,
        }
    }

    /// Full minus query sharing.
    pub fn no_shared_queries() -> Self {
        Self { shared_queries: false, ..Self::full() }
    }

    pub fn any_alignment(&self) -> bool {
        self.dqfa_enc || self.dqfa_dec || self.bgpa || self.tifa
    }

    /// Parse a preset name or a `+`-joined component list
    /// (tokens: mt, shared-qe, dqfa-enc, dqfa-dec, bgpa, tifa).
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source-only" => return Ok(Self::source_only()),
            "mt-only" => return Ok(Self::mt_only()),
            "full" => return Ok(Self::full()),
            "no-shared-qe" => return Ok(Self::no_shared_queries()),
            _ => {}
        }
        let mut c = Self::source_only();
        for token in s.split('+') {
            match token.trim() {
                "mt" => c.mean_teacher = true,
                "shared-qe" => c.shared_queries = true,
                "dqfa-enc" => c.dqfa_enc = true,
                "dqfa-dec" => c.dqfa_dec = true,
                "bgpa" => c.bgpa = true,
                "tifa" => c.tifa = true,
                other => {
                    return Err(Error::Usage(format!(
                        "unknown component '{other}' (expected mt, shared-qe, dqfa-enc, dqfa-dec, bgpa, tifa, or a preset)"
                    )))
                }
            }
        }
        Ok(c)
    }

    pub fn label(&self) -> String {
        if *self == Self::source_only() {
            return "source-only".into();
        }
        if *self == Self::mt_only() {
            return "mt-only".into();
        }
        if *self == Self::full() {
            return "full".into();
        }
        if *self == Self::no_shared_queries() {
            return "no-shared-qe".into();
        }
        let mut parts = Vec::new();
        if self.mean_teacher {
            parts.push("mt");
        }
        if self.shared_queries {
            parts.push("shared-qe");
        }
        if self.dqfa_enc {
            parts.push("dqfa-enc");
        }
        if self.dqfa_dec {
            parts.push("dqfa-dec");
        }
        if self.bgpa {
            parts.push("bgpa");
        }
        if self.tifa {
            parts.push("tifa");
        }
        if parts.is_empty() {
            "source-only".into()
        } else {
            parts.join("+")
        }
    }

    /// Alignment weights with disabled heads zeroed out.
    pub fn effective_weights(&self, w: AlignmentWeights) -> AlignmentWeights {
        AlignmentWeights {
            enc_dqfa: if self.dqfa_enc { w.enc_dqfa } else { 0.0 },
            dec_dqfa: if self.dqfa_dec { w.dec_dqfa } else { 0.0 },
            bgpa: if self.bgpa { w.bgpa } else { 0.0 },
            tifa: if self.tifa { w.tifa } else { 0.0 },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = TrainConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        // partial files fill in defaults
        let partial: TrainConfig = toml::from_str("tau = 0.7\nseed = 9").unwrap();
        assert_eq!(partial.tau, 0.7);
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.burn_in_epochs, cfg.burn_in_epochs);
    }

    #[test]
    fn unknown_key_is_named_in_error() {
        let err = toml::from_str::<TrainConfig>("bogus_key = 1").unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.tau = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.lr_burn_in = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.alpha = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn component_presets_and_parsing() {
        assert_eq!(Components::parse("full").unwrap(), Components::full());
        assert_eq!(Components::parse("source-only").unwrap(), Components::source_only());
        let c = Components::parse("mt+shared-qe+tifa").unwrap();
        assert!(c.mean_teacher && c.shared_queries && c.tifa);
        assert!(!c.bgpa && !c.dqfa_enc && !c.dqfa_dec);
        assert!(Components::parse("mt+warp-drive").is_err());
        assert_eq!(Components::parse(&c.label()).unwrap(), c);
    }

    #[test]
    fn lr_schedule_decays_after_epoch() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(2e-4, 10, 10), 2e-4);
        assert!((cfg.lr_at(2e-4, 10, 11) - 2e-5).abs() < 1e-12);
    }
}
