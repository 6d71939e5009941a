use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, HarnessError, SplitFractions};
use crate::audit::{
    compare_and_report, dsr_counts, min_detectable_k, optimal_w, round_count, AuditReport, InferenceRecord,
    KThreshold, LatencyStats,
};
use crate::enclave::{AcceptanceReport, ArtifactDigest, Enclave, EnclaveError};
use crate::faults::{apply_fault, FaultScenario, FaultSpec};
use crate::nn::Tensor2;
use crate::pipeline::{optimize_blocks, simulate_parties, PipelineSchedule};
use crate::privacy::PrivacyConfig;
use crate::protocol::{
    Message, MessageKind, PartyId, Payload, TrainLog, TranscriptRecord, Transport, VflSession,
};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
    pub query: Vec<u64>,
}

/// Seeded shuffle of `ids` cut into train, validation and query; each part
/// is returned in ascending order.
pub fn split_ids(ids: &[u64], split: &SplitFractions, seed: u64) -> Splits {
    let mut order = ids.to_vec();
    order.shuffle(&mut rng::stream(rng::derive(seed, 600), rng::STREAM_SHUFFLE));
    let (t, v, _) = split.sizes(order.len());
    let sorted = |s: &[u64]| {
        let mut s = s.to_vec();
        s.sort_unstable();
        s
    };
    Splits {
        train: sorted(&order[..t]),
        validation: sorted(&order[t..t + v]),
        query: sorted(&order[t + v..]),
    }
}

/// A trained session whose enclaves hold sealed baselines.
pub struct TrainedSystem {
    pub session: VflSession,
    pub splits: Splits,
    pub train_log: TrainLog,
    pub enclaves: Vec<Enclave>,
    pub acceptance_accuracy: f64,
    pub sealed: Vec<(ArtifactDigest, ArtifactDigest)>,
    /// Virtual seconds spent in training.
    pub training_seconds: f64,
}

/// Train with privacy, run the acceptance test on the validation split and
/// provision one enclave per data party.
pub fn train_system(cfg: &ExperimentConfig) -> Result<TrainedSystem, HarnessError> {
    cfg.validate()?;
    let dataset = cfg.load_dataset()?;
    let splits = split_ids(&dataset.ids, &cfg.split, cfg.seed);
    let mut session = VflSession::new(&dataset, cfg.model_dims.clone(), cfg.cost, cfg.seed)?;
    let outcome = session
        .train_stage2(&splits.train, &splits.validation, &cfg.train)
        .map_err(HarnessError::stage("training"))?;
    let acceptance_accuracy = session.accuracy(&splits.validation)?;
    let mut enclaves = Vec::new();
    let mut sealed = Vec::new();
    for (p, party) in session.data_parties.iter().enumerate() {
        let mut enclave = Enclave::new(cfg.cost.epc_bytes, cfg.acceptance_threshold, rng::derive(cfg.seed, 500 + p as u64));
        let digests = enclave
            .provision_baseline(
                &party.data.canonical_bytes(),
                &party.artifact.canonical_bytes(),
                &party.artifact.version,
                AcceptanceReport {
                    validation_accuracy: acceptance_accuracy,
                },
            )
            .map_err(HarnessError::stage("provisioning"))?;
        enclaves.push(enclave);
        sealed.push(digests);
    }
    Ok(TrainedSystem {
        training_seconds: session.clock(),
        session,
        splits,
        train_log: outcome.log,
        enclaves,
        acceptance_accuracy,
        sealed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PartyAudit {
    pub party: usize,
    pub sealed_dataset: String,
    pub sealed_model: String,
    pub w_star: f64,
    pub sampled: usize,
    pub blocks: usize,
    /// Makespan of the sampled trusted path as scheduled.
    pub t_tr_sampled: f64,
    /// Smallest abnormal ratio detected with the configured target rate.
    pub min_detectable: Option<KThreshold>,
    pub fault_scenarios: Vec<FaultScenario>,
    pub abnormal: usize,
    /// Outcome of validating each tampered model artifact in the enclave.
    pub tampered_model_checks: Vec<String>,
    pub report: AuditReport,
    pub schedule: PipelineSchedule,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StageTimings {
    pub training: f64,
    pub untrusted: f64,
    pub trusted_full: f64,
    pub trusted_sampled: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OutputFiles {
    pub config: String,
    pub report: String,
    pub metrics: String,
    pub transcript: String,
    pub train_log: String,
    pub schedules: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunSummary {
    pub config_digest: String,
    pub query_size: usize,
    pub acceptance_accuracy: f64,
    /// Accuracy of the predictions served on the query.
    pub query_accuracy: f64,
    pub timings: StageTimings,
    pub flagged: bool,
    pub parties: Vec<PartyAudit>,
    pub train_log: TrainLog,
    pub files: OutputFiles,
    #[serde(skip)]
    pub transcript: Vec<TranscriptRecord>,
}

impl RunSummary {
    pub const METRICS_HEADER: [&'static str; 15] = [
        "party", "sampled", "tp", "fp", "tn", "fn", "ppv", "tpr", "npv", "flagged", "tUn", "tTrScaled", "wStar",
        "blocks", "tTrSampled",
    ];

    pub fn write_metrics<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::METRICS_HEADER)?;
        for p in &self.parties {
            let mut row = vec![p.party.to_string()];
            row.extend(p.report.metrics_row());
            row.extend([p.w_star.to_string(), p.blocks.to_string(), p.t_tr_sampled.to_string()]);
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn records(ids: &[u64], reps: &Tensor2) -> Vec<InferenceRecord> {
    ids.iter()
        .enumerate()
        .map(|(r, &id)| InferenceRecord {
            id,
            representation: reps.row(r).to_vec(),
        })
        .collect()
}

/// Latency-neutral sampling ratio for a query of `n` inferences, with the
/// full-query untrusted time and optimized trusted makespan.
pub fn plan_ratio(cfg: &ExperimentConfig, n: usize) -> Result<(f64, f64, f64), HarnessError> {
    let t_un = cfg.cost.untrusted_time(n);
    let (_, full) = optimize_blocks(&cfg.cost, n, cfg.max_blocks)?;
    Ok((optimal_w(t_un, full.makespan)?, t_un, full.makespan))
}

/// Apply `faults` to the data parties for the duration of `f`, then put
/// the untampered parties back. Returns the abnormal ids, scenarios and
/// tampered-model validation outcomes per party.
type FaultLabels = Vec<(BTreeSet<u64>, Vec<FaultScenario>, Vec<String>)>;

fn with_faults<T>(
    sys: &mut TrainedSystem,
    faults: &[FaultSpec],
    f: impl FnOnce(&mut TrainedSystem, &FaultLabels) -> Result<T, HarnessError>,
) -> Result<T, HarnessError> {
    let original = sys.session.data_parties.clone();
    let mut labels: FaultLabels = vec![Default::default(); original.len()];
    let result = (|| {
        for spec in faults {
            let p = spec.party;
            if p >= labels.len() {
                return Err(HarnessError::Config(format!("fault targets missing data party {p}")));
            }
            let out = apply_fault(&sys.session.data_parties[p], &sys.splits.query, spec)
                .map_err(HarnessError::stage("fault injection"))?;
            if let Some(a) = &out.tampered_artifact {
                let check = match sys.enclaves[p].validate_model(&a.canonical_bytes()) {
                    Ok(()) => "accepted".to_string(),
                    Err(EnclaveError::ArtifactMismatch { .. }) => "artifactMismatch".to_string(),
                    Err(e) => e.to_string(),
                };
                labels[p].2.push(check);
            }
            labels[p].0.extend(out.fault_ids);
            labels[p].1.push(spec.scenario);
            sys.session.data_parties[p] = out.party;
        }
        f(sys, &labels)
    })();
    sys.session.data_parties = original;
    result
}

/// One audited inference round over the query: both paths for every data
/// party, comparison on the enclave's sample, verdict messages and the
/// served predictions.
pub fn audit_query(
    sys: &mut TrainedSystem,
    cfg: &ExperimentConfig,
    faults: &[FaultSpec],
    plan_seed: u64,
) -> Result<RunSummary, HarnessError> {
    sys.session.transport = Transport::new(cfg.cost.comm_constant_seconds);
    let query = sys.splits.query.clone();
    let n = query.len();
    let (w, _, t_tr_full) = plan_ratio(cfg, n)?;
    let min_detectable = min_detectable_k(n, w, cfg.audit_target_dsr).ok();
    with_faults(sys, faults, |sys, labels| {
        let start = sys.session.clock();
        let mut parties = Vec::new();
        let mut h_ds = Vec::new();
        let mut timings = StageTimings {
            training: sys.training_seconds,
            trusted_full: t_tr_full,
            ..StageTimings::default()
        };
        for p in 0..sys.session.party_count() {
            let enclave = &mut sys.enclaves[p];
            let att = enclave.attest();
            let sampled = enclave.confidential_select(&att, &query, w, rng::derive(plan_seed, p as u64))?;
            let sampled_ids: Vec<u64> = sampled.iter().copied().collect();
            let (blocks, schedule) = optimize_blocks(&cfg.cost, sampled_ids.len(), cfg.max_blocks)?;

            let un = sys.session.untrusted_inference(p, &query, start)?;
            let tr = sys.session.trusted_inference(p, &mut sys.enclaves[p], &sampled_ids, &schedule, start)?;
            let mut report = compare_and_report(
                &records(&un.ids, &un.representations),
                &records(&tr.ids, &tr.representations),
                &sampled,
                &labels[p].0,
                cfg.comparison,
            )?;
            report.latency = LatencyStats {
                t_un: un.elapsed,
                t_tr_scaled: w * t_tr_full,
            };
            let verdict = Payload::Verdict {
                flagged: report.flagged,
                inconsistent: report.inconsistent_count() as u64,
                sampled: sampled.len() as u64,
            };
            let at = start + un.elapsed.max(tr.elapsed);
            sys.session
                .transport
                .send(Message::new(PartyId::Task, PartyId::Data(p), MessageKind::AuditVerdict, &verdict, at)?);
            timings.untrusted = timings.untrusted.max(un.elapsed);
            timings.trusted_sampled = timings.trusted_sampled.max(tr.elapsed);
            let (data_digest, model_digest) = &sys.sealed[p];
            parties.push(PartyAudit {
                party: p,
                sealed_dataset: data_digest.digest.to_hex(),
                sealed_model: model_digest.digest.to_hex(),
                w_star: w,
                sampled: sampled.len(),
                blocks,
                t_tr_sampled: tr.elapsed,
                min_detectable,
                fault_scenarios: labels[p].1.clone(),
                abnormal: labels[p].0.len(),
                tampered_model_checks: labels[p].2.clone(),
                report,
                schedule,
            });
            h_ds.push(un.representations);
        }
        let task = &sys.session.task;
        let h_t = task.bottom.forward(&task.data.rows_for(&query)?)?;
        let served = task.joint_predict(&query, &h_t, &h_ds.iter().collect::<Vec<_>>())?;
        let mut correct = 0usize;
        for (id, y) in query.iter().zip(&served.predicted) {
            correct += usize::from(task.label(*id)? == *y);
        }
        let party_count = parties.len();
        Ok(RunSummary {
            config_digest: cfg.digest(),
            query_size: n,
            acceptance_accuracy: sys.acceptance_accuracy,
            query_accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            timings,
            flagged: parties.iter().any(|p| p.report.flagged),
            parties,
            train_log: sys.train_log.clone(),
            files: OutputFiles {
                config: "config.json".into(),
                report: "report.json".into(),
                metrics: "metrics.csv".into(),
                transcript: "transcript.jsonl".into(),
                train_log: "trainlog.csv".into(),
                schedules: (0..party_count).map(|p| format!("schedule-{p}.csv")).collect(),
            },
            transcript: sys.session.transport.transcript(),
        })
    })
}

/// Train, provision, inject the configured faults, audit the query and
/// write every output file when an output directory is set.
pub fn run_end_to_end(cfg: &ExperimentConfig) -> Result<RunSummary, HarnessError> {
    let wall = std::time::Instant::now();
    let mut sys = train_system(cfg)?;
    let summary = audit_query(&mut sys, cfg, &cfg.faults, cfg.plan_seed)?;
    if let Some(dir) = &cfg.output_dir {
        write_outputs(dir, cfg, &summary)?;
    }
    log::info!("run finished in {:.2?} wall time", wall.elapsed());
    Ok(summary)
}

pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, summary: &RunSummary) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    let files = &summary.files;
    std::fs::write(dir.join(&files.config), cfg.canonical_bytes())?;
    let report = serde_json::to_vec_pretty(summary).map_err(|e| HarnessError::Config(e.to_string()))?;
    std::fs::write(dir.join(&files.report), report)?;
    let csv_err = HarnessError::stage("writing outputs");
    summary.write_metrics(File::create(dir.join(&files.metrics))?).map_err(&csv_err)?;
    summary.train_log.write_csv(File::create(dir.join(&files.train_log))?).map_err(&csv_err)?;
    for (p, name) in summary.parties.iter().zip(&files.schedules) {
        p.schedule.write_csv(File::create(dir.join(name))?).map_err(&csv_err)?;
    }
    let mut out = BufWriter::new(File::create(dir.join(&files.transcript))?);
    for r in &summary.transcript {
        serde_json::to_writer(&mut out, r).map_err(|e| HarnessError::Config(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DetectionEstimate {
    pub n: usize,
    pub sampled: usize,
    pub abnormal: usize,
    pub analytic_dsr: f64,
    pub plans: usize,
    pub flagged: usize,
    pub frequency: f64,
}

/// Batch-flag frequency of `fault` over many confidential plans. Verdicts
/// are per inference, so each id's verdict comes from one full comparison
/// of both paths and every plan then reads off its own sample.
pub fn empirical_detection(
    sys: &mut TrainedSystem,
    cfg: &ExperimentConfig,
    fault: &FaultSpec,
    plan_seeds: Range<u64>,
) -> Result<DetectionEstimate, HarnessError> {
    sys.session.transport = Transport::new(cfg.cost.comm_constant_seconds);
    let query = sys.splits.query.clone();
    let n = query.len();
    let (w, _, _) = plan_ratio(cfg, n)?;
    let p = fault.party;
    with_faults(sys, std::slice::from_ref(fault), |sys, labels| {
        let start = sys.session.clock();
        let (_, schedule) = optimize_blocks(&cfg.cost, n, cfg.max_blocks)?;
        let un = sys.session.untrusted_inference(p, &query, start)?;
        let tr = sys.session.trusted_inference(p, &mut sys.enclaves[p], &query, &schedule, start)?;
        let all: BTreeSet<u64> = query.iter().copied().collect();
        let full = compare_and_report(
            &records(&un.ids, &un.representations),
            &records(&tr.ids, &tr.representations),
            &all,
            &labels[p].0,
            cfg.comparison,
        )?;
        let bad: BTreeSet<u64> = full.inconsistent_ids().collect();
        let enclave = &sys.enclaves[p];
        let att = enclave.attest();
        let mut flagged = 0usize;
        let mut sampled = 0usize;
        let plans = plan_seeds.clone().count();
        for seed in plan_seeds {
            let sel = enclave.confidential_select(&att, &query, w, rng::derive(seed, p as u64))?;
            sampled = sel.len();
            flagged += usize::from(sel.iter().any(|id| bad.contains(id)));
        }
        Ok(DetectionEstimate {
            n,
            sampled,
            abnormal: bad.len(),
            analytic_dsr: dsr_counts(n, round_count(w, n), bad.len()),
            plans,
            flagged,
            frequency: if plans == 0 { 0.0 } else { flagged as f64 / plans as f64 },
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepRow {
    pub lambda: f64,
    pub binned_mi: Option<f64>,
    pub mi_estimate: Option<f64>,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Train once per λ from the same initialization and record the histogram
/// MI between each data party's input and perturbed representation on the
/// validation split, with validation accuracy. Cells run on their own
/// threads; a failed cell is recorded and the others continue.
pub fn sweep_lambda(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, HarnessError> {
    cfg.validate()?;
    if cfg.lambda_sweep.is_empty() {
        return Err(HarnessError::Config("lambda sweep is empty".into()));
    }
    let dataset = cfg.load_dataset()?;
    let splits = split_ids(&dataset.ids, &cfg.split, cfg.seed);
    let cell = |lambda: f64| -> Result<SweepRow, HarnessError> {
        let mut session = VflSession::new(&dataset, cfg.model_dims.clone(), cfg.cost, cfg.seed)?;
        let mut train = cfg.train.clone();
        train.privacy = Some(PrivacyConfig {
            lambda,
            ..cfg.train.privacy.unwrap_or_default()
        });
        let out = session.train_stage2(&splits.train, &splits.validation, &train)?;
        let last = out.log.last().copied();
        Ok(SweepRow {
            lambda,
            binned_mi: session.binned_mi_on(&splits.validation, train.binned_mi_bins),
            mi_estimate: last.and_then(|e| e.mi_estimate),
            accuracy: last.map(|e| e.val_accuracy),
            error: None,
        })
    };
    let rows = std::thread::scope(|s| {
        let handles: Vec<_> = cfg.lambda_sweep.iter().map(|&l| (l, s.spawn(move || cell(l)))).collect();
        handles
            .into_iter()
            .map(|(lambda, h)| {
                let result = h.join().unwrap_or_else(|_| Err(HarnessError::Config("sweep cell panicked".into())));
                result.unwrap_or_else(|e| SweepRow {
                    lambda,
                    binned_mi: None,
                    mi_estimate: None,
                    accuracy: None,
                    error: Some(e.to_string()),
                })
            })
            .collect()
    });
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda", "binnedMi", "miEstimate", "accuracy", "error"])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        w.write_record([
            r.lambda.to_string(),
            opt(r.binned_mi),
            opt(r.mi_estimate),
            opt(r.accuracy),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScaleRow {
    pub party_count: usize,
    /// Mean trusted-path completion time over the parties.
    pub audit_time: f64,
    pub relative_audit_time: f64,
}

/// Every party audits a query of `n` inferences at the latency-neutral
/// ratio, on its own enclave and link, sharing one coordinator. Times are
/// normalized to a single party doing the same.
pub fn scale_parties_for(cfg: &ExperimentConfig, n: usize, counts: &[usize]) -> Result<Vec<ScaleRow>, HarnessError> {
    if counts.iter().any(|c| !(1..=9).contains(c)) {
        return Err(HarnessError::Config("party counts must lie in [1, 9]".into()));
    }
    let (w, _, _) = plan_ratio(cfg, n)?;
    let s = round_count(w, n);
    let (b, _) = optimize_blocks(&cfg.cost, s, cfg.max_blocks)?;
    let mean_time = |c: usize| -> Result<f64, HarnessError> {
        let done = simulate_parties(&vec![cfg.cost; c], &vec![s; c], &vec![b; c])?;
        Ok(done.iter().sum::<f64>() / c as f64)
    };
    let baseline = mean_time(1)?;
    counts
        .iter()
        .map(|&c| {
            let t = mean_time(c)?;
            Ok(ScaleRow {
                party_count: c,
                audit_time: t,
                relative_audit_time: t / baseline,
            })
        })
        .collect()
}

/// [`scale_parties_for`] with the query size implied by the configured
/// dataset and split.
pub fn scale_parties(cfg: &ExperimentConfig, counts: &[usize]) -> Result<Vec<ScaleRow>, HarnessError> {
    cfg.validate()?;
    let n = match &cfg.dataset {
        super::DatasetSource::Synthetic(p) => p.samples,
        super::DatasetSource::Csv { .. } => cfg.load_dataset()?.len(),
    };
    scale_parties_for(cfg, cfg.split.sizes(n).2, counts)
}

pub fn write_scale_csv<W: Write>(rows: &[ScaleRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["partyCount", "auditTime", "relativeAuditTime"])?;
    for r in rows {
        w.write_record([r.party_count.to_string(), r.audit_time.to_string(), r.relative_audit_time.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
