// SPDX-License-Identifier: Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};
use sgg_core::assembly::AssemblyConfig;
use sgg_core::dataset::WorldConfig;
use sgg_core::decoder::{DecoderConfig, ModelConfig};
use sgg_core::detector::DetectorConfig;
use sgg_core::encoder::EncoderConfig;
use sgg_core::metrics::DEFAULT_KS;
use sgg_core::motif::MotifConfig;
use sgg_tensor::optim::StepDecay;

use crate::error::{CliError, Result};

/// Environment variable overriding the run seed.
pub const SEED_ENV: &str = "SGG_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    TripleDecoder,
    MotifAug,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub world: WorldConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { world: WorldConfig::default(), n_train: 2000, n_val: 300, n_test: 300 }
    }
}

/// Recurrent baseline settings; sizes that follow from the world are filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotifSettings {
    pub label_dim: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub n_steps: usize,
    pub enable_cas: bool,
    pub detector: DetectorConfig,
}

impl Default for MotifSettings {
    fn default() -> Self {
        Self { label_dim: 16, n_heads: 4, ffn_hidden: 64, n_steps: 3, enable_cas: true, detector: DetectorConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub family: Family,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub motif: MotifSettings,
    pub assembly: AssemblyConfig,
    pub alpha: f64,
    pub beta: f64,
    /// One assignment shared by all layers; otherwise each layer matches alone.
    pub joint_loss: bool,
    pub ks: Vec<usize>,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: StepDecay,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            family: Family::TripleDecoder,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            motif: MotifSettings::default(),
            assembly: AssemblyConfig::default(),
            alpha: 0.0,
            beta: 0.75,
            joint_loss: true,
            ks: DEFAULT_KS.to_vec(),
            seed: 1,
            epochs: 15,
            batch_size: 12,
            lr: StepDecay { base_lr: 1e-3, every_epochs: 10, gamma: 0.3 },
            weight_decay: 0.0,
            grad_clip: 5.0,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let cfg: Self = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies the seed override from the environment, if set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| CliError::Config(format!("{SEED_ENV}={v} is not an integer")))?;
        }
        Ok(self)
    }

    /// The K at which model selection happens.
    pub fn max_k(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(DEFAULT_KS[2])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.data.world.validate()?;
        self.model_config().validate()?;
        self.motif_config().validate()?;
        self.assembly.validate()?;
        let need = self.data.world.max_triplets();
        if self.family == Family::TripleDecoder && self.decoder.n_queries < need {
            return bad(format!("{} queries cannot hold up to {need} triplets per scene", self.decoder.n_queries));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("ks must be a non-empty list of positive values".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.alpha >= 0.0) || (self.alpha > 0.0 && !(self.beta > 0.0)) {
            return bad(format!("need alpha >= 0 and beta > 0 when alpha > 0, got ({}, {})", self.alpha, self.beta));
        }
        if !(self.lr.base_lr > 0.0) {
            return bad("learning rate must be positive".into());
        }
        if self.data.n_train == 0 || self.data.n_val == 0 || self.data.n_test == 0 {
            return bad("every split needs at least one scene".into());
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let w = &self.data.world;
        ModelConfig {
            channels: w.channels(),
            grid_h: w.grid_h,
            grid_w: w.grid_w,
            eta: w.eta,
            upsilon: w.upsilon,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub fn motif_config(&self) -> MotifConfig {
        let m = &self.motif;
        MotifConfig {
            eta: self.data.world.eta,
            upsilon: self.data.world.upsilon,
            d_r: m.detector.feature_dim,
            label_dim: m.label_dim,
            n_heads: m.n_heads,
            ffn_hidden: m.ffn_hidden,
            n_steps: m.n_steps,
            enable_cas: m.enable_cas,
        }
    }

    pub fn n_layers(&self) -> usize {
        match self.family {
            Family::TripleDecoder => self.decoder.n_layers,
            Family::MotifAug => self.motif.n_steps,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
