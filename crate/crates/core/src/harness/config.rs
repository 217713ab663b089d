use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::TOPK_PCTS;
use crate::error::{Error, Result};
use crate::lm::{LmConfig, PretrainConfig};
use crate::pref::{BaselineConfig, DataSpec, SimpoConfig};
use crate::sae::SaeTrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// A feature joins a category when its mean activation there exceeds this
    /// multiple of its mean activation elsewhere.
    pub mask_ratio: f64,
    pub bootstrap_resamples: usize,
    pub topk_pcts: Vec<f64>,
    pub theory_trials: usize,
    pub theory_d: usize,
    pub theory_d_sae: usize,
    /// Points sampled around each reference input by the affine check.
    pub theory_perturbations: usize,
    pub grad_check_instances: usize,
    pub sweep_alphas: Vec<f64>,
    pub sweep_epochs: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 2.0,
            bootstrap_resamples: 1000,
            topk_pcts: TOPK_PCTS.iter().copied().chain([100.0]).collect(),
            theory_trials: 100,
            theory_d: 16,
            theory_d_sae: 64,
            theory_perturbations: 8,
            grad_check_instances: 100,
            sweep_alphas: vec![0.01, 0.1, 1.0],
            sweep_epochs: 1,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio >= 1.0) {
            return Err(Error::InvalidConfig("analysis.mask_ratio must be at least 1".into()));
        }
        if self.bootstrap_resamples == 0 {
            return Err(Error::InvalidConfig("analysis.bootstrap_resamples must be at least 1".into()));
        }
        if self.topk_pcts.iter().any(|&k| !(k > 0.0 && k <= 100.0)) {
            return Err(Error::InvalidConfig("analysis.topk_pcts must lie in (0, 100]".into()));
        }
        if self.theory_trials == 0 || self.theory_d == 0 || self.theory_d_sae <= self.theory_d {
            return Err(Error::InvalidConfig(
                "analysis.theory_trials must be positive and theory_d_sae must exceed theory_d".into(),
            ));
        }
        if self.grad_check_instances == 0 {
            return Err(Error::InvalidConfig("analysis.grad_check_instances must be at least 1".into()));
        }
        if self.sweep_alphas.iter().any(|&a| !(a >= 0.0)) || self.sweep_epochs == 0 {
            return Err(Error::InvalidConfig(
                "analysis.sweep_alphas must be non-negative and sweep_epochs positive".into(),
            ));
        }
        Ok(())
    }
}

/// Everything a pipeline run depends on. Missing sections and keys take their
/// defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSpec,
    pub lm: LmConfig,
    pub lm_train: PretrainConfig,
    pub sae: SaeTrainConfig,
    pub simpo: SimpoConfig,
    pub baseline: BaselineConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataSpec::default(),
            lm: LmConfig::default(),
            lm_train: PretrainConfig::default(),
            sae: SaeTrainConfig::default(),
            simpo: SimpoConfig::default(),
            baseline: BaselineConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.lm.validate()?;
        self.lm_train.validate()?;
        self.sae.validate()?;
        self.simpo.validate()?;
        self.baseline.validate()?;
        self.analysis.validate()?;
        if self.lm.vocab_size != crate::lm::vocab_size() {
            return Err(Error::InvalidConfig(format!(
                "lm.vocab_size {} does not match the tokenizer's {}",
                self.lm.vocab_size,
                crate::lm::vocab_size()
            )));
        }
        if self.sae.d_sae <= self.lm.d_model {
            return Err(Error::InvalidConfig(format!(
                "sae.d_sae {} must exceed lm.d_model {}",
                self.sae.d_sae, self.lm.d_model
            )));
        }
        Ok(())
    }

    /// The configuration as a JSON value, as embedded in artifacts.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
