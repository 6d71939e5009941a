//! Injectors that make a data party's untrusted execution deviate from the
//! accepted model and data on a controlled fraction of inferences.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::round_count;
use crate::nn::{FcnnModel, NnError};
use crate::protocol::{DataParty, ModelArtifact, ProtocolError};
use crate::rng;

pub const DEFAULT_MAGNITUDE: f64 = 1e-7;
/// Noise scenarios stay strictly below this bound.
pub const NOISE_BOUND: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum FaultScenario {
    ModelNoise,
    StaleCheckpoint,
    FeatureSwap,
    DataNoise,
    EmbeddingTrigger,
}

impl FaultScenario {
    pub const ALL: [FaultScenario; 5] = [
        FaultScenario::ModelNoise,
        FaultScenario::StaleCheckpoint,
        FaultScenario::FeatureSwap,
        FaultScenario::DataNoise,
        FaultScenario::EmbeddingTrigger,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FaultScenario::ModelNoise => "modelNoise",
            FaultScenario::StaleCheckpoint => "staleCheckpoint",
            FaultScenario::FeatureSwap => "featureSwap",
            FaultScenario::DataNoise => "dataNoise",
            FaultScenario::EmbeddingTrigger => "embeddingTrigger",
        }
    }

    fn is_noise(self) -> bool {
        matches!(self, FaultScenario::ModelNoise | FaultScenario::DataNoise)
    }
}

fn default_magnitude() -> f64 {
    DEFAULT_MAGNITUDE
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FaultSpec {
    pub scenario: FaultScenario,
    /// Fraction of the queried inferences that run abnormally.
    pub k: f64,
    #[serde(default = "default_magnitude")]
    pub magnitude: f64,
    #[serde(default)]
    pub seed: u64,
    /// Index of the data party to tamper with.
    #[serde(default)]
    pub party: usize,
}

impl FaultSpec {
    pub fn new(scenario: FaultScenario, k: f64, seed: u64) -> Self {
        Self {
            scenario,
            k,
            magnitude: DEFAULT_MAGNITUDE,
            seed,
            party: 0,
        }
    }

    pub fn validate(&self) -> Result<(), FaultError> {
        if !(0.0..=1.0).contains(&self.k) {
            return Err(FaultError::Input(format!("k={} outside [0, 1]", self.k)));
        }
        if !self.magnitude.is_finite() || self.magnitude < 0.0 {
            return Err(FaultError::Input("magnitude must be finite and non-negative".into()));
        }
        if self.scenario.is_noise() && self.magnitude >= NOISE_BOUND {
            return Err(FaultError::Input(format!(
                "{} magnitude {} must stay below {NOISE_BOUND}",
                self.scenario.name(),
                self.magnitude
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FaultError {
    #[error("invalid fault: {0}")]
    Input(String),
    #[error("fault left the representation of id {0} unchanged")]
    NoEffect(u64),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug)]
pub struct FaultOutcome {
    pub party: DataParty,
    /// Ids whose untrusted inference is abnormal. For labelling metrics only.
    pub fault_ids: BTreeSet<u64>,
    /// The wrong model served to `fault_ids`, for model-level scenarios.
    pub tampered_artifact: Option<ModelArtifact>,
}

fn perturb_model(model: &FcnnModel, magnitude: f64, r: &mut rng::Rng) -> FcnnModel {
    let mut m = model.clone();
    for layer in m.layers_mut() {
        for w in layer.weight.data_mut() {
            *w += r.random_range(-magnitude..=magnitude);
        }
        for b in &mut layer.bias {
            *b += r.random_range(-magnitude..=magnitude);
        }
    }
    m
}

/// Scenario state shared by every tampered id.
enum Tamper {
    Model(ModelArtifact),
    FeatureSwap,
    DataNoise,
    Trigger(Vec<f64>),
}

impl Tamper {
    fn prepare(party: &DataParty, spec: &FaultSpec, r: &mut rng::Rng) -> Result<Self, FaultError> {
        Ok(match spec.scenario {
            FaultScenario::ModelNoise => {
                let a = &party.artifact;
                Tamper::Model(ModelArtifact::new(
                    format!("{}+noise", a.version),
                    perturb_model(&a.shallow, spec.magnitude, r),
                    a.sigma.clone(),
                    perturb_model(&a.deep, spec.magnitude, r),
                )?)
            }
            FaultScenario::StaleCheckpoint => {
                let current = party.artifact.canonical_bytes();
                Tamper::Model(
                    party
                        .checkpoints
                        .iter()
                        .rev()
                        .find(|c| c.canonical_bytes() != current)
                        .ok_or_else(|| FaultError::Input("no earlier checkpoint differs from the deployed model".into()))?
                        .clone(),
                )
            }
            FaultScenario::FeatureSwap => {
                if party.data.ids().len() < 2 {
                    return Err(FaultError::Input("feature swap needs at least two samples".into()));
                }
                Tamper::FeatureSwap
            }
            FaultScenario::DataNoise => Tamper::DataNoise,
            FaultScenario::EmbeddingTrigger => Tamper::Trigger(
                (0..party.representation_width())
                    .map(|_| if r.random_bool(0.5) { spec.magnitude } else { -spec.magnitude })
                    .collect(),
            ),
        })
    }

    fn add(&self, tampered: &mut DataParty, id: u64, magnitude: f64, r: &mut rng::Rng) -> Result<(), FaultError> {
        let runtime = &mut tampered.runtime;
        match self {
            Tamper::Model(a) => {
                runtime
                    .model_override
                    .get_or_insert_with(|| (BTreeSet::new(), a.clone()))
                    .0
                    .insert(id);
            }
            Tamper::FeatureSwap => {
                let all = tampered.data.ids();
                let own = tampered.data.row(id)?;
                let donor = loop {
                    let other = all[r.random_range(0..all.len())];
                    let row = tampered.data.row(other)?;
                    if other != id && row.iter().zip(own).any(|(a, b)| a.to_bits() != b.to_bits()) {
                        break row.to_vec();
                    }
                };
                runtime.feature_overrides.insert(id, donor);
            }
            Tamper::DataNoise => {
                let row: Vec<f64> = tampered
                    .data
                    .row(id)?
                    .iter()
                    .map(|v| v + r.random_range(-magnitude..=magnitude))
                    .collect();
                runtime.feature_overrides.insert(id, row);
            }
            Tamper::Trigger(t) => {
                if !tampered.data.contains(id) {
                    return Err(ProtocolError::UnknownId(id).into());
                }
                runtime.embedding_triggers.insert(id, t.clone());
            }
        }
        Ok(())
    }

    fn remove(&self, tampered: &mut DataParty, id: u64) {
        let runtime = &mut tampered.runtime;
        if let Some((set, _)) = &mut runtime.model_override {
            set.remove(&id);
        }
        runtime.feature_overrides.remove(&id);
        runtime.embedding_triggers.remove(&id);
    }
}

/// Tamper with `party`'s untrusted runtime for exactly `round(k·N)` of the
/// `query` ids. The accepted artifact and stored data are left intact, so
/// the trusted path keeps computing the reference function. Ids are taken
/// in a seeded random order; an id the fault leaves bitwise unchanged (a
/// dead ReLU can absorb small noise) is replaced by the next candidate.
pub fn apply_fault(party: &DataParty, query: &[u64], spec: &FaultSpec) -> Result<FaultOutcome, FaultError> {
    spec.validate()?;
    let count = round_count(spec.k, query.len());
    if count == 0 || (spec.magnitude == 0.0 && spec.scenario != FaultScenario::StaleCheckpoint) {
        return Ok(FaultOutcome {
            party: party.clone(),
            fault_ids: BTreeSet::new(),
            tampered_artifact: None,
        });
    }
    let reference = party.untrusted_forward(query)?;
    let row_of: std::collections::HashMap<u64, usize> = query.iter().enumerate().map(|(r, &id)| (id, r)).collect();
    let mut r = rng::stream(spec.seed, rng::STREAM_FAULT);
    let tamper = Tamper::prepare(party, spec, &mut r)?;
    let mut candidates = index::sample(&mut r, query.len(), query.len()).into_iter().map(|i| query[i]);
    let mut tampered = party.clone();
    let mut fault_ids = BTreeSet::new();
    let mut pending: Vec<u64> = candidates.by_ref().take(count).collect();
    while !pending.is_empty() {
        for &id in &pending {
            tamper.add(&mut tampered, id, spec.magnitude, &mut r)?;
        }
        let out = tampered.untrusted_forward(&pending)?;
        let mut missing = 0;
        for (i, &id) in pending.iter().enumerate() {
            let before = reference.row(row_of[&id]);
            if out.row(i).iter().zip(before).all(|(a, b)| a.to_bits() == b.to_bits()) {
                log::debug!("fault on id {id} had no effect; drawing another id");
                tamper.remove(&mut tampered, id);
                missing += 1;
            } else {
                fault_ids.insert(id);
            }
        }
        let last = *pending.last().unwrap();
        pending = candidates.by_ref().take(missing).collect();
        if pending.len() < missing {
            return Err(FaultError::NoEffect(last));
        }
    }
    let tampered_artifact = match tamper {
        Tamper::Model(a) => Some(a),
        _ => None,
    };
    Ok(FaultOutcome {
        party: tampered,
        fault_ids,
        tampered_artifact,
    })
}

/// Add `trigger` to the transmitted h_d of every id in `targets`.
pub fn embedding_trigger(party: &DataParty, targets: &BTreeSet<u64>, trigger: &[f64]) -> Result<DataParty, FaultError> {
    if trigger.len() != party.representation_width() {
        return Err(NnError::Shape {
            op: "embedding_trigger",
            detail: format!("trigger width {} vs representation {}", trigger.len(), party.representation_width()),
        }
        .into());
    }
    let mut tampered = party.clone();
    if trigger.iter().all(|&t| t == 0.0) {
        return Ok(tampered);
    }
    for &id in targets {
        if !party.data.contains(id) {
            return Err(ProtocolError::UnknownId(id).into());
        }
        tampered.runtime.embedding_triggers.insert(id, trigger.to_vec());
    }
    Ok(tampered)
}
