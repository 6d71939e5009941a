use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use super::{generate_synthetic, HarnessError, SyntheticParams};
use crate::audit::ComparisonMode;
use crate::faults::FaultSpec;
use crate::pipeline::{CostModel, DEFAULT_MAX_BLOCKS};
use crate::protocol::{load_csv, AlignedDataset, FeatureManifest, ModelDims, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "kind")]
pub enum DatasetSource {
    Synthetic(SyntheticParams),
    #[serde(rename_all = "camelCase")]
    Csv { path: PathBuf, manifest: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticParams::default())
    }
}

/// Fractions of the shuffled ids used for training and validation; the
/// remainder forms the inference query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.1,
        }
    }
}

impl SplitFractions {
    /// `(train, validation, query)` counts for `n` samples.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = (self.train * n as f64).round() as usize;
        let val = ((self.validation * n as f64).round() as usize).min(n - train.min(n));
        let train = train.min(n);
        (train, val, n - train - val)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub split: SplitFractions,
    pub model_dims: ModelDims,
    pub train: TrainConfig,
    pub lambda_sweep: Vec<f64>,
    pub cost: CostModel,
    pub audit_target_dsr: f64,
    /// Validation accuracy the trained model must reach before its hashes
    /// are sealed.
    pub acceptance_threshold: f64,
    pub comparison: ComparisonMode,
    pub faults: Vec<FaultSpec>,
    pub party_counts: Vec<usize>,
    pub max_blocks: usize,
    pub seed: u64,
    /// Seeds the enclave's confidential selection.
    pub plan_seed: u64,
    /// Where outputs go; not part of the digest.
    #[serde(skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            split: SplitFractions::default(),
            model_dims: ModelDims::default(),
            train: TrainConfig::default(),
            lambda_sweep: vec![0.0, 0.01, 0.1, 1.0, 10.0],
            cost: CostModel::default(),
            audit_target_dsr: 0.9999,
            acceptance_threshold: 0.6,
            comparison: ComparisonMode::Exact,
            faults: Vec::new(),
            party_counts: vec![1, 3, 5, 7, 9],
            max_blocks: DEFAULT_MAX_BLOCKS,
            seed: 1,
            plan_seed: 2,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Small data-party inputs and representations so the histogram MI
    /// oracle applies; used for λ sweeps.
    pub fn privacy_sweep() -> Self {
        let mut cfg = Self::default();
        cfg.dataset = DatasetSource::Synthetic(SyntheticParams {
            data_features: vec![2],
            ..SyntheticParams::default()
        });
        cfg.model_dims.shallow = vec![2];
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse and validate; relative dataset paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        if let (DatasetSource::Csv { path: csv, manifest }, Some(dir)) = (&mut cfg.dataset, path.parent()) {
            for p in [csv, manifest] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if let DatasetSource::Csv { path, manifest } = &self.dataset {
            for p in [path, manifest] {
                if !p.is_file() {
                    return bad(format!("{} does not exist", p.display()));
                }
            }
        }
        let s = self.split;
        if !(s.train > 0.0 && s.validation > 0.0 && s.train + s.validation < 1.0) {
            return bad(format!("split {}/{} leaves no query", s.train, s.validation));
        }
        if self.lambda_sweep.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("lambda values must be finite and non-negative".into());
        }
        if !(self.audit_target_dsr > 0.0 && self.audit_target_dsr < 1.0) {
            return bad(format!("audit target {} outside (0, 1)", self.audit_target_dsr));
        }
        if !(0.0..=1.0).contains(&self.acceptance_threshold) {
            return bad(format!("acceptance threshold {} outside [0, 1]", self.acceptance_threshold));
        }
        if self.party_counts.iter().any(|c| !(1..=9).contains(c)) {
            return bad("party counts must lie in [1, 9]".into());
        }
        if self.max_blocks == 0 {
            return bad("maxBlocks must be at least 1".into());
        }
        self.cost.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        for f in &self.faults {
            f.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Serialized form the digest is taken over.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_bytes()))
    }

    pub fn load_dataset(&self) -> Result<AlignedDataset, HarnessError> {
        match &self.dataset {
            DatasetSource::Synthetic(p) => generate_synthetic(p, self.seed),
            DatasetSource::Csv { path, manifest } => {
                let manifest = FeatureManifest::from_json_file(manifest)?;
                Ok(load_csv(path, &manifest)?)
            }
        }
    }
}
