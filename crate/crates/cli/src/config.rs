//! Run configuration and content hashes.

use std::path::{Path, PathBuf};

use clipq_core::calib::{BitConfig, CalibConfig};
use clipq_core::clip::{PretrainConfig, Variant};
use clipq_core::synth::{Components, Method, SynthesisConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    /// Omitted: the variant's default (the ViT needs more data).
    pub n_train: Option<usize>,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: None,
            n_test: 320,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagConfig {
    /// Images per source for patch-similarity and cluster statistics.
    pub samples: usize,
    pub grid: usize,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self { samples: 32, grid: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives synthesis and calibration; data and pretraining have their own seeds.
    pub seed: u64,
    pub variant: Variant,
    pub method: Method,
    pub data: DataConfig,
    /// Omitted: the variant's default schedule.
    pub pretrain: Option<PretrainConfig>,
    pub synthesis: SynthesisConfig,
    pub calibration: CalibConfig,
    /// Overrides the method's prompt-guided components (ablations).
    pub ablation: Option<Components>,
    pub diagnostics: DiagConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: Variant::Cnn,
            method: Method::D4c,
            data: DataConfig::default(),
            pretrain: None,
            synthesis: SynthesisConfig::default(),
            calibration: CalibConfig::default(),
            ablation: None,
            diagnostics: DiagConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Pretraining schedule that reaches the accuracy gate for each encoder.
pub fn default_pretrain(variant: Variant) -> PretrainConfig {
    match variant {
        Variant::Cnn => PretrainConfig {
            epochs: 8,
            lr: 3e-3,
            seed: 0,
        },
        Variant::Vit => PretrainConfig {
            epochs: 6,
            lr: 2e-3,
            seed: 0,
        },
    }
}

/// Training-set size; the ViT overfits 2048 images.
pub fn default_n_train(variant: Variant) -> usize {
    match variant {
        Variant::Cnn => 2048,
        Variant::Vit => 6144,
    }
}

/// Parses a method name; `baseline` selects the variant's prior-based baseline.
pub fn parse_method(s: &str, variant: Variant) -> Result<Method> {
    if s == "baseline" {
        return Ok(Method::prior_baseline(variant));
    }
    s.parse::<Method>().map_err(CliError::from)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthesis.validate()?;
        self.calibration.validate()?;
        if self.n_train() < 16 || self.data.n_test == 0 {
            return Err(CliError::Config("data needs n_train >= 16 and n_test >= 1".into()));
        }
        if self.diagnostics.grid == 0 || 64 % self.diagnostics.grid != 0 {
            return Err(CliError::Config("diagnostics.grid must divide 64".into()));
        }
        match (self.method, self.variant) {
            (Method::Bns, Variant::Vit) | (Method::Pse, Variant::Cnn) => Err(CliError::Config(format!(
                "method {} does not apply to the {:?} encoder",
                self.method.name(),
                self.variant
            ))),
            _ => Ok(()),
        }
    }

    pub fn n_train(&self) -> usize {
        self.data.n_train.unwrap_or_else(|| default_n_train(self.variant))
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        self.pretrain.clone().unwrap_or_else(|| default_pretrain(self.variant))
    }

    /// Synthesis settings with the run seed applied.
    pub fn synthesis_config(&self) -> SynthesisConfig {
        SynthesisConfig {
            seed: self.seed,
            ..self.synthesis.clone()
        }
    }

    pub fn calibration_config(&self) -> CalibConfig {
        CalibConfig {
            seed: self.seed,
            ..self.calibration.clone()
        }
    }

    pub fn bits(&self) -> BitConfig {
        self.calibration.bits
    }

    pub fn components(&self) -> Option<Components> {
        self.ablation.or_else(|| self.method.components())
    }

    /// Hash of the whole config except `out_dir`, recorded in every artifact.
    pub fn config_hash(&self) -> String {
        let located = RunConfig {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        hash_json("run", &serde_json::to_value(&located).expect("config serializes"))
    }

    pub fn data_hash(&self) -> String {
        hash_json("data", &serde_json::json!([self.data.seed, self.n_train(), self.data.n_test]))
    }

    pub fn pretrain_hash(&self) -> String {
        hash_json(
            "pretrain",
            &serde_json::json!([self.data_hash(), self.variant, self.pretrain_config()]),
        )
    }

    pub fn synth_hash(&self) -> String {
        hash_json(
            "synth",
            &serde_json::json!([
                self.pretrain_hash(),
                self.method,
                self.components(),
                self.synthesis_config(),
                self.calibration.n_images
            ]),
        )
    }

    pub fn quant_hash(&self) -> String {
        hash_json("quant", &serde_json::json!([self.synth_hash(), self.calibration_config()]))
    }

    /// Label of the synthesis run, e.g. `d4c_s0`.
    pub fn synth_tag(&self) -> String {
        let mut t = format!("{}_s{}", self.method.name(), self.seed);
        if let Some(c) = self.ablation {
            t.push_str(&format!("_abl{}{}{}", c.pgsi as u8, c.scg as u8, c.pae as u8));
        }
        t
    }

    /// Method name for tables; ablations list their active components.
    pub fn method_label(&self) -> String {
        match self.ablation {
            None => self.method.name().to_string(),
            Some(c) => {
                let on: Vec<&str> = [("pgsi", c.pgsi), ("scg", c.scg), ("pae", c.pae)]
                    .into_iter()
                    .filter(|x| x.1)
                    .map(|x| x.0)
                    .collect();
                if on.is_empty() {
                    "none".into()
                } else {
                    on.join("+")
                }
            }
        }
    }

    pub fn quant_tag(&self) -> String {
        format!("{}_{}", self.synth_tag(), self.bits().label())
    }
}

/// Short SHA-256 over a domain tag and canonical JSON.
pub fn hash_json(domain: &str, v: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(v.to_string().as_bytes());
    hex::encode(&h.finalize()[..8])
}
