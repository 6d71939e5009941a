use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::nn::Tensor2;
use crate::protocol::AlignedDataset;
use crate::rng;

/// Gaussian class-conditional features with unit noise. Class means are
/// drawn per feature from `N(0, separation²)`, with a separate scale for
/// the task party's and the data parties' features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SyntheticParams {
    pub samples: usize,
    pub task_features: usize,
    /// Feature count per data party.
    pub data_features: Vec<usize>,
    pub classes: usize,
    pub task_separation: f64,
    pub data_separation: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            samples: 20_000,
            task_features: 15,
            data_features: vec![15],
            classes: 2,
            task_separation: 0.5,
            data_separation: 0.5,
        }
    }
}

pub fn generate_synthetic(params: &SyntheticParams, seed: u64) -> Result<AlignedDataset, HarnessError> {
    if params.task_features == 0 || params.data_features.is_empty() || params.data_features.contains(&0) {
        return Err(HarnessError::Config("every party needs at least one feature".into()));
    }
    if params.classes < 2 {
        return Err(HarnessError::Config("at least two classes are required".into()));
    }
    let seps = [params.task_separation, params.data_separation];
    if seps.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(HarnessError::Config("separations must be finite and non-negative".into()));
    }
    let mut r = rng::stream(seed, rng::STREAM_SYNTH);
    let widths: Vec<usize> = std::iter::once(params.task_features)
        .chain(params.data_features.iter().copied())
        .collect();
    let means: Vec<Vec<Vec<f64>>> = widths
        .iter()
        .enumerate()
        .map(|(block, &w)| {
            let sep = if block == 0 { params.task_separation } else { params.data_separation };
            let dist = Normal::new(0.0, sep).expect("validated separation");
            (0..params.classes)
                .map(|_| (0..w).map(|_| dist.sample(&mut r)).collect())
                .collect()
        })
        .collect();
    let n = params.samples;
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..params.classes)).collect();
    let blocks: Vec<Tensor2> = widths
        .iter()
        .zip(&means)
        .map(|(&w, m)| {
            let data = labels
                .iter()
                .flat_map(|&y| (0..w).map(|j| m[y][j]).collect::<Vec<_>>())
                .map(|mu| mu + Distribution::<f64>::sample(&StandardNormal, &mut r))
                .collect::<Vec<f64>>();
            Tensor2::from_vec(n, w, data)
        })
        .collect::<Result<_, _>>()?;
    let mut blocks = blocks.into_iter();
    let task = blocks.next().unwrap();
    Ok(AlignedDataset::new(
        (0..n as u64).collect(),
        task,
        blocks.collect(),
        labels,
        params.classes,
    )?)
}
