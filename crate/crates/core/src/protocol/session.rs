use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{AlignedDataset, Message, MessageKind, ModelArtifact, PartyData, PartyId, Payload, ProtocolError, Transport};
use crate::enclave::{Enclave, EnclaveError};
use crate::nn::{argmax_rows, cross_entropy_loss, init_model, Activation, FcnnModel, Tensor2};
use crate::pipeline::{CostModel, Operation, PipelineSchedule};
use crate::privacy::{binned_mi, CriticTrainer, MIN_MINE_BATCH, MiCritic, Perturbation, PrivacyConfig, PrivacyError};
use crate::rng;

/// Layer widths after each party's input. Every data party uses the same
/// shape; the last `shallow` width is the representation width ẑ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ModelDims {
    pub task_bottom: Vec<usize>,
    pub shallow: Vec<usize>,
    pub deep: Vec<usize>,
    pub top_hidden: Vec<usize>,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            task_bottom: vec![16, 8],
            shallow: vec![8],
            deep: vec![16, 8],
            top_hidden: vec![16],
        }
    }
}

impl ModelDims {
    fn validate(&self) -> Result<(), ProtocolError> {
        if self.task_bottom.is_empty() || self.shallow.is_empty() || self.deep.is_empty() {
            return Err(ProtocolError::Dataset("bottom, shallow and deep models need at least one layer".into()));
        }
        if [&self.task_bottom, &self.shallow, &self.deep, &self.top_hidden]
            .iter()
            .any(|v| v.contains(&0))
        {
            return Err(ProtocolError::Dataset("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// `None` disables the MI term and its critic entirely.
    pub privacy: Option<PrivacyConfig>,
    /// Bins per dimension for the per-epoch histogram MI, when dims allow.
    pub binned_mi_bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 0.05,
            seed: 0,
            privacy: Some(PrivacyConfig::default()),
            binned_mi_bins: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpochLog {
    pub epoch: usize,
    pub task_loss: f64,
    /// Mean MINE objective over the epoch's batches, averaged over parties.
    pub mi_estimate: Option<f64>,
    /// Histogram MI between x_d and ẑ_d on the validation ids, averaged
    /// over parties; absent when the widths are too large for the oracle.
    pub binned_mi: Option<f64>,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "taskLoss", "miEstimate", "binnedMi", "valAccuracy"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.task_loss.to_string(),
                opt(e.mi_estimate),
                opt(e.binned_mi),
                e.val_accuracy.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBatch {
    pub ids: Vec<u64>,
    pub logits: Tensor2,
    pub predicted: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TaskParty {
    pub data: PartyData,
    labels: HashMap<u64, usize>,
    pub bottom: FcnnModel,
    pub top: FcnnModel,
}

impl TaskParty {
    pub fn label(&self, id: u64) -> Result<usize, ProtocolError> {
        self.labels.get(&id).copied().ok_or(ProtocolError::UnknownId(id))
    }

    /// `g([h_t | h_d0 | h_d1 | …])`.
    pub fn joint_predict(&self, ids: &[u64], h_t: &Tensor2, h_d: &[&Tensor2]) -> Result<PredictionBatch, ProtocolError> {
        if h_d.iter().any(|h| h.rows() != h_t.rows()) || ids.len() != h_t.rows() {
            return Err(ProtocolError::Dataset("representation row counts differ".into()));
        }
        let parts: Vec<&Tensor2> = std::iter::once(h_t).chain(h_d.iter().copied()).collect();
        let logits = self.top.forward(&Tensor2::hconcat(&parts)?)?;
        let predicted = argmax_rows(&logits);
        Ok(PredictionBatch {
            ids: ids.to_vec(),
            logits,
            predicted,
        })
    }
}

/// Behaviour of a data party's own (unaudited) execution environment.
/// Empty by default; fault injectors populate it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UntrustedRuntime {
    /// A different model serves exactly these ids.
    pub model_override: Option<(BTreeSet<u64>, ModelArtifact)>,
    /// Feature rows read in place of the stored ones.
    pub feature_overrides: BTreeMap<u64, Vec<f64>>,
    /// Added to the transmitted representation of these ids.
    pub embedding_triggers: BTreeMap<u64, Vec<f64>>,
}

impl UntrustedRuntime {
    pub fn is_clean(&self) -> bool {
        self.model_override.is_none() && self.feature_overrides.is_empty() && self.embedding_triggers.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct DataParty {
    pub index: usize,
    pub data: PartyData,
    /// The accepted, deployed model.
    pub artifact: ModelArtifact,
    /// Snapshot at the end of each training epoch, oldest first.
    pub checkpoints: Vec<ModelArtifact>,
    pub runtime: UntrustedRuntime,
}

impl DataParty {
    pub fn id(&self) -> PartyId {
        PartyId::Data(self.index)
    }

    pub fn representation_width(&self) -> usize {
        self.artifact.deep.out_dim()
    }

    /// `h_d = f_dm(f_sm(x_d) + σ)` as executed by the party itself.
    pub fn untrusted_forward(&self, ids: &[u64]) -> Result<Tensor2, ProtocolError> {
        let mut x = self.data.rows_for(ids)?;
        for (r, id) in ids.iter().enumerate() {
            if let Some(v) = self.runtime.feature_overrides.get(id) {
                x.row_mut(r).copy_from_slice(v);
            }
        }
        let mut h = self.artifact.full_forward(&x)?;
        if let Some((set, alt)) = &self.runtime.model_override {
            let rows: Vec<usize> = (0..ids.len()).filter(|&r| set.contains(&ids[r])).collect();
            if !rows.is_empty() {
                let alt_h = alt.full_forward(&x.select_rows(&rows))?;
                for (i, &r) in rows.iter().enumerate() {
                    h.row_mut(r).copy_from_slice(alt_h.row(i));
                }
            }
        }
        for (r, id) in ids.iter().enumerate() {
            if let Some(t) = self.runtime.embedding_triggers.get(id) {
                for (v, d) in h.row_mut(r).iter_mut().zip(t) {
                    *v += d;
                }
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct Coordinator {
    /// Deep model per data party, by party index.
    pub deep: Vec<FcnnModel>,
}

/// Timing of one inference path on the virtual clock.
#[derive(Clone, Debug, PartialEq)]
pub struct PathResult {
    pub ids: Vec<u64>,
    pub representations: Tensor2,
    /// Virtual seconds from path start to the last result being produced.
    pub elapsed: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub critics: Vec<MiCritic>,
}

fn shallow_model(dims: &[usize], seed: u64) -> Result<FcnnModel, ProtocolError> {
    Ok(FcnnModel::init(dims, Activation::Relu, Activation::Relu, seed)?)
}

pub struct VflSession {
    pub task: TaskParty,
    pub data_parties: Vec<DataParty>,
    pub coordinator: Coordinator,
    pub transport: Transport,
    pub cost: CostModel,
    pub dims: ModelDims,
    pub classes: usize,
    clock: f64,
    seed: u64,
}

impl VflSession {
    /// Parties with freshly initialized models over the full aligned dataset.
    pub fn new(dataset: &AlignedDataset, dims: ModelDims, cost: CostModel, seed: u64) -> Result<Self, ProtocolError> {
        dims.validate()?;
        if !dataset.has_labels() {
            return Err(ProtocolError::Dataset("the task party needs labels".into()));
        }
        let chain = |input: usize, rest: &[usize]| -> Vec<usize> { std::iter::once(input).chain(rest.iter().copied()).collect() };
        let bottom = init_model(&chain(dataset.task_features.cols(), &dims.task_bottom), rng::derive(seed, 1))?;
        let h_t = *dims.task_bottom.last().unwrap();
        let z = *dims.shallow.last().unwrap();
        let h_d = *dims.deep.last().unwrap();
        let mut top_dims = vec![h_t + h_d * dataset.party_count()];
        top_dims.extend(&dims.top_hidden);
        top_dims.push(dataset.classes);
        let top = init_model(&top_dims, rng::derive(seed, 2))?;

        let mut data_parties = Vec::new();
        let mut deep_models = Vec::new();
        for p in 0..dataset.party_count() {
            let width = dataset.data_features[p].cols();
            let shallow = shallow_model(&chain(width, &dims.shallow), rng::derive(seed, 100 + p as u64))?;
            let deep = init_model(&chain(z, &dims.deep), rng::derive(seed, 200 + p as u64))?;
            deep_models.push(deep.clone());
            let artifact = ModelArtifact::new("init", shallow, Perturbation::zeros(z), deep)?;
            data_parties.push(DataParty {
                index: p,
                data: dataset.party_data(p),
                artifact,
                checkpoints: Vec::new(),
                runtime: UntrustedRuntime::default(),
            });
        }
        let task = TaskParty {
            data: PartyData::new(dataset.ids.clone(), dataset.task_features.clone())?,
            labels: dataset.ids.iter().copied().zip(dataset.labels.iter().copied()).collect(),
            bottom,
            top,
        };
        cost.validate().map_err(|e| ProtocolError::Dataset(e.to_string()))?;
        Ok(Self {
            task,
            data_parties,
            coordinator: Coordinator { deep: deep_models },
            transport: Transport::new(cost.comm_constant_seconds),
            cost,
            dims,
            classes: dataset.classes,
            clock: 0.0,
            seed,
        })
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn party_count(&self) -> usize {
        self.data_parties.len()
    }

    fn send(&mut self, from: PartyId, to: PartyId, kind: MessageKind, payload: &Payload, at: f64) -> Result<(), ProtocolError> {
        self.transport.send(Message::new(from, to, kind, payload, at)?);
        Ok(())
    }

    fn recv_batch(&mut self, to: PartyId, from: PartyId, kind: MessageKind, now: &mut f64) -> Result<(u64, Vec<u64>, Tensor2), ProtocolError> {
        let (msg, at) = self.transport.receive_one(to, from, kind, *now)?;
        *now = at;
        match msg.decode()? {
            Payload::Batch { tag, ids, tensor } => Ok((tag, ids, tensor)),
            _ => Err(ProtocolError::Message("expected a tensor batch".into())),
        }
    }

    /// Local evaluation of the current models (no messages): predictions
    /// for `ids` as the deployed system would produce them.
    pub fn predict(&self, ids: &[u64]) -> Result<PredictionBatch, ProtocolError> {
        let h_t = self.task.bottom.forward(&self.task.data.rows_for(ids)?)?;
        let h_d = self
            .data_parties
            .iter()
            .enumerate()
            .map(|(p, party)| {
                let z = party.artifact.perturbed_shallow(&party.data.rows_for(ids)?)?;
                Ok(self.coordinator.deep[p].forward(&z)?)
            })
            .collect::<Result<Vec<_>, ProtocolError>>()?;
        self.task.joint_predict(ids, &h_t, &h_d.iter().collect::<Vec<_>>())
    }

    pub fn accuracy(&self, ids: &[u64]) -> Result<f64, ProtocolError> {
        if ids.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(ids)?;
        let mut correct = 0usize;
        for (id, p) in ids.iter().zip(&pred.predicted) {
            correct += usize::from(self.task.label(*id)? == *p);
        }
        Ok(correct as f64 / ids.len() as f64)
    }

    /// Split training with message-level dataflow. Deep models live on the
    /// coordinator; shallow models and σ on their data parties; bottom and
    /// top on the task party. With privacy enabled each data party adds
    /// `λ · ∂I/∂ẑ` from its own MINE critic to the gradient it receives.
    pub fn train_stage2(&mut self, train_ids: &[u64], val_ids: &[u64], cfg: &TrainConfig) -> Result<TrainOutcome, ProtocolError> {
        if cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.lr > 0.0) {
            return Err(ProtocolError::Dataset("epochs, batch size and learning rate must be positive".into()));
        }
        if let Some(p) = &cfg.privacy {
            if !(p.lambda >= 0.0) || !p.lambda.is_finite() {
                return Err(ProtocolError::Dataset("lambda must be finite and non-negative".into()));
            }
        }
        let n_parties = self.party_count();
        let mut critics: Vec<CriticTrainer> = Vec::new();
        if let Some(p) = &cfg.privacy {
            for (i, party) in self.data_parties.iter().enumerate() {
                let critic = MiCritic::new(party.data.width(), party.artifact.sigma.width(), rng::derive(self.seed, 300 + i as u64))
                    .map_err(privacy_err(0))?;
                critics.push(CriticTrainer::new(critic, p.critic_lr, rng::derive(cfg.seed, 400 + i as u64)));
            }
        }
        let mut order: Vec<u64> = train_ids.to_vec();
        let mut shuffle = rng::stream(cfg.seed, rng::STREAM_SHUFFLE);
        let mut log = TrainLog::default();

        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut shuffle);
            let mut loss_sum = 0.0;
            let mut mi_sum = 0.0;
            let mut batches = 0usize;
            for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
                let (loss, mi) = self.train_batch(batch, b as u64, cfg, &mut critics, epoch)?;
                if !loss.is_finite() {
                    return Err(ProtocolError::Divergence {
                        epoch,
                        detail: format!("task loss {loss} in batch {b}"),
                    });
                }
                loss_sum += loss * batch.len() as f64;
                mi_sum += mi;
                batches += 1;
            }
            for (p, party) in self.data_parties.iter_mut().enumerate() {
                party.artifact.deep = self.coordinator.deep[p].clone();
                party.artifact.version = format!("epoch-{epoch}");
                party.checkpoints.push(party.artifact.clone());
            }
            let binned = self.binned_mi_on(val_ids, cfg.binned_mi_bins);
            log.epochs.push(EpochLog {
                epoch,
                task_loss: loss_sum / order.len().max(1) as f64,
                mi_estimate: cfg.privacy.map(|_| mi_sum / (batches * n_parties).max(1) as f64),
                binned_mi: binned,
                val_accuracy: self.accuracy(val_ids)?,
            });
            log::debug!("epoch {epoch}: {:?}", log.epochs.last().unwrap());
        }
        Ok(TrainOutcome {
            log,
            critics: critics.into_iter().map(|c| c.critic).collect(),
        })
    }

    /// Mean histogram MI between each party's x_d and ẑ_d over `ids`.
    pub fn binned_mi_on(&self, ids: &[u64], bins: usize) -> Option<f64> {
        if ids.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for party in &self.data_parties {
            let x = party.data.rows_for(ids).ok()?;
            let z = party.artifact.perturbed_shallow(&x).ok()?;
            total += binned_mi(&x, &z, bins).ok()?.value;
        }
        Some(total / self.party_count() as f64)
    }

    fn train_batch(
        &mut self,
        ids: &[u64],
        tag: u64,
        cfg: &TrainConfig,
        critics: &mut [CriticTrainer],
        epoch: usize,
    ) -> Result<(f64, f64), ProtocolError> {
        let mut now = self.clock;
        let n_parties = self.party_count();

        // Task party announces the batch.
        for p in 0..n_parties {
            self.send(PartyId::Task, PartyId::Data(p), MessageKind::IdBatch, &Payload::Ids(ids.to_vec()), now)?;
        }

        // Data parties: shallow forward plus σ, to the coordinator.
        let mut shallow_state = Vec::with_capacity(n_parties);
        for p in 0..n_parties {
            let (msg, at) = self.transport.receive_one(PartyId::Data(p), PartyId::Task, MessageKind::IdBatch, now)?;
            let Payload::Ids(batch_ids) = msg.decode()? else {
                return Err(ProtocolError::Message("expected ids".into()));
            };
            let party = &self.data_parties[p];
            let x = party.data.rows_for(&batch_ids)?;
            let (z, cache) = party.artifact.shallow.forward_cached(&x)?;
            let z_hat = party.artifact.sigma.apply(&z)?;
            self.send(
                PartyId::Data(p),
                PartyId::Coordinator,
                MessageKind::Representation,
                &Payload::Batch { tag, ids: Vec::new(), tensor: z_hat.clone() },
                at,
            )?;
            now = now.max(at);
            shallow_state.push((x, z_hat, cache));
        }

        // Coordinator: deep forward, results to the task party.
        let mut deep_caches = Vec::with_capacity(n_parties);
        for p in 0..n_parties {
            let (_, _, z_hat) = self.recv_batch(PartyId::Coordinator, PartyId::Data(p), MessageKind::Representation, &mut now)?;
            let (h_d, cache) = self.coordinator.deep[p].forward_cached(&z_hat)?;
            self.send(
                PartyId::Coordinator,
                PartyId::Task,
                MessageKind::JointRepresentation,
                &Payload::Batch { tag: p as u64, ids: Vec::new(), tensor: h_d },
                now,
            )?;
            deep_caches.push(cache);
        }

        // Task party: bottom + top, loss, backward.
        let x_t = self.task.data.rows_for(ids)?;
        let labels = ids.iter().map(|id| self.task.label(*id)).collect::<Result<Vec<_>, _>>()?;
        let (h_t, bottom_cache) = self.task.bottom.forward_cached(&x_t)?;
        let mut h_ds = Vec::with_capacity(n_parties);
        for p in 0..n_parties {
            let (from, _, h_d) = self.recv_batch(PartyId::Task, PartyId::Coordinator, MessageKind::JointRepresentation, &mut now)?;
            if from != p as u64 {
                return Err(ProtocolError::Message(format!("representation for party {from} arrived out of order")));
            }
            h_ds.push(h_d);
        }
        let mut parts = vec![&h_t];
        parts.extend(h_ds.iter());
        let (logits, top_cache) = self.task.top.forward_cached(&Tensor2::hconcat(&parts)?)?;
        let (loss, dlogits) = cross_entropy_loss(&logits, &labels)?;
        if !loss.is_finite() {
            return Ok((loss, 0.0));
        }
        let (top_grads, dh) = self.task.top.backward(&top_cache, &dlogits)?;
        let mut widths = vec![h_t.cols()];
        widths.extend(h_ds.iter().map(|h| h.cols()));
        let dparts = dh.split_cols(&widths)?;
        let (bottom_grads, _) = self.task.bottom.backward(&bottom_cache, &dparts[0])?;
        self.task.top.sgd_step(&top_grads, cfg.lr)?;
        self.task.bottom.sgd_step(&bottom_grads, cfg.lr)?;
        for (p, d) in dparts[1..].iter().enumerate() {
            self.send(
                PartyId::Task,
                PartyId::Coordinator,
                MessageKind::GradientShare,
                &Payload::Batch { tag: p as u64, ids: Vec::new(), tensor: d.clone() },
                now,
            )?;
        }

        // Coordinator: deep backward, gradient to each data party.
        for p in 0..n_parties {
            let (_, _, dh_d) = self.recv_batch(PartyId::Coordinator, PartyId::Task, MessageKind::GradientShare, &mut now)?;
            let (deep_grads, dz_hat) = self.coordinator.deep[p].backward(&deep_caches[p], &dh_d)?;
            self.coordinator.deep[p].sgd_step(&deep_grads, cfg.lr)?;
            self.send(
                PartyId::Coordinator,
                PartyId::Data(p),
                MessageKind::GradientShare,
                &Payload::Batch { tag, ids: Vec::new(), tensor: dz_hat },
                now,
            )?;
        }

        // Data parties: optional MI penalty, then shallow and σ updates.
        let mut mi_total = 0.0;
        for (p, (x, z_hat, cache)) in shallow_state.into_iter().enumerate() {
            let (_, _, mut dz) = self.recv_batch(PartyId::Data(p), PartyId::Coordinator, MessageKind::GradientShare, &mut now)?;
            // Batches too small for a MINE estimate train on the task loss alone.
            if let Some(privacy) = cfg.privacy.as_ref().filter(|_| x.rows() >= MIN_MINE_BATCH) {
                let trainer = &mut critics[p];
                trainer.ascend(&x, &z_hat, privacy.inner_critic_steps).map_err(privacy_err(epoch))?;
                let terms = trainer.z_gradient(&x, &z_hat, privacy.z_gradient).map_err(privacy_err(epoch))?;
                mi_total += terms.value;
                if privacy.lambda > 0.0 {
                    let mut g = terms.z_grad;
                    g.scale(privacy.lambda);
                    dz.add_assign(&g)?;
                }
            }
            let party = &mut self.data_parties[p];
            let dsigma = dz.col_sums();
            let (shallow_grads, _) = party.artifact.shallow.backward(&cache, &dz)?;
            party.artifact.shallow.sgd_step(&shallow_grads, cfg.lr)?;
            party.artifact.sigma.sgd_step(&dsigma, cfg.lr)?;
        }
        self.clock = now;
        Ok((loss, mi_total))
    }

    /// Untrusted path: the data party runs its whole model and returns h_d
    /// to the task party. Starts at `start` on the virtual clock.
    pub fn untrusted_inference(&mut self, party: usize, ids: &[u64], start: f64) -> Result<PathResult, ProtocolError> {
        if party >= self.party_count() {
            return Err(ProtocolError::Dataset(format!("no data party {party}")));
        }
        let width = self.data_parties[party].representation_width();
        if ids.is_empty() {
            return Ok(PathResult {
                ids: Vec::new(),
                representations: Tensor2::zeros(0, width),
                elapsed: 0.0,
            });
        }
        self.send(PartyId::Task, PartyId::Data(party), MessageKind::IdBatch, &Payload::Ids(ids.to_vec()), start)?;
        let (msg, at) = self.transport.receive_one(PartyId::Data(party), PartyId::Task, MessageKind::IdBatch, start)?;
        let Payload::Ids(query) = msg.decode()? else {
            return Err(ProtocolError::Message("expected ids".into()));
        };
        let h = self.data_parties[party].untrusted_forward(&query)?;
        let elapsed = self.cost.untrusted_time(query.len());
        self.send(
            PartyId::Data(party),
            PartyId::Task,
            MessageKind::Representation,
            &Payload::Batch { tag: 0, ids: query, tensor: h },
            at + elapsed,
        )?;
        let mut now = at + elapsed;
        let (_, got_ids, h) = self.recv_batch(PartyId::Task, PartyId::Data(party), MessageKind::Representation, &mut now)?;
        if got_ids != ids {
            return Err(ProtocolError::Message("untrusted result ids do not match the request".into()));
        }
        self.clock = self.clock.max(now);
        Ok(PathResult {
            ids: got_ids,
            representations: h,
            elapsed,
        })
    }

    /// Trusted path over the secret `ids` (already chosen by the enclave and
    /// known to the task party). The data party hands its deployed artifact
    /// and dataset to the enclave, which validates both; the coordinator
    /// takes its deep model from the same validated bytes. Blocks follow
    /// `schedule`; messages to the coordinator carry no ids.
    pub fn trusted_inference(
        &mut self,
        party: usize,
        enclave: &mut Enclave,
        ids: &[u64],
        schedule: &PipelineSchedule,
        start: f64,
    ) -> Result<PathResult, TrustedPathError> {
        let dp = self
            .data_parties
            .get(party)
            .ok_or_else(|| ProtocolError::Dataset(format!("no data party {party}")))?;
        if schedule.block_sizes.iter().sum::<usize>() != ids.len() {
            return Err(ProtocolError::Dataset("schedule does not cover the sampled ids".into()).into());
        }
        let bytes = dp.artifact.canonical_bytes();
        enclave.load_model(&bytes)?;
        enclave.validate_data(&dp.data, ids)?;
        let validated = ModelArtifact::from_canonical_bytes(&bytes, dp.artifact.version.clone())?;
        self.coordinator.deep[party] = validated.deep;
        let att = enclave.attest();

        let offsets = schedule.block_offsets();
        for (b, (&off, &size)) in offsets.iter().zip(&schedule.block_sizes).enumerate() {
            let block_ids = &ids[off..off + size];
            let x = self.data_parties[party].data.rows_for(block_ids)?;
            let z_hat = enclave.enclave_forward(&att, &x)?;
            let sent = start + schedule.entry(Operation::Comm, b).start;
            self.send(
                PartyId::Data(party),
                PartyId::Coordinator,
                MessageKind::Representation,
                &Payload::Batch { tag: b as u64, ids: Vec::new(), tensor: z_hat },
                sent,
            )?;
        }
        let width = self.data_parties[party].representation_width();
        let mut out = Tensor2::zeros(ids.len(), width);
        for b in 0..schedule.block_count {
            let mut now = start + schedule.entry(Operation::Coord, b).start;
            let (tag, _, z_hat) = self.recv_batch(PartyId::Coordinator, PartyId::Data(party), MessageKind::Representation, &mut now)?;
            let h = self.coordinator.deep[party].forward(&z_hat).map_err(ProtocolError::from)?;
            let done = start + schedule.entry(Operation::Coord, b).end;
            self.send(
                PartyId::Coordinator,
                PartyId::Task,
                MessageKind::TrustedResult,
                &Payload::Batch { tag, ids: Vec::new(), tensor: h },
                done,
            )?;
            let mut now = done;
            let (tag, _, h) = self.recv_batch(PartyId::Task, PartyId::Coordinator, MessageKind::TrustedResult, &mut now)?;
            let off = offsets[tag as usize];
            for r in 0..h.rows() {
                out.row_mut(off + r).copy_from_slice(h.row(r));
            }
            self.clock = self.clock.max(now);
        }
        Ok(PathResult {
            ids: ids.to_vec(),
            representations: out,
            elapsed: schedule.makespan,
        })
    }
}

fn privacy_err(epoch: usize) -> impl Fn(PrivacyError) -> ProtocolError {
    move |e| ProtocolError::Divergence {
        epoch,
        detail: e.to_string(),
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TrustedPathError {
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}
