use std::collections::BTreeSet;

use vefia_core::enclave::{AcceptanceReport, Enclave};
use vefia_core::harness::{generate_synthetic, split_ids, SplitFractions, SyntheticParams};
use vefia_core::nn::{Activation, Tensor2};
use vefia_core::pipeline::{optimize_blocks, simulate_schedule, CostModel};
use vefia_core::privacy::PrivacyConfig;
use vefia_core::protocol::{
    AlignedDataset, MessageKind, ModelDims, PartyId, Payload, ProtocolError, TrainConfig, VflSession,
};

fn dataset(n: usize, sep: f64, seed: u64) -> AlignedDataset {
    let params = SyntheticParams {
        samples: n,
        task_features: 4,
        data_features: vec![3, 2],
        classes: 2,
        task_separation: sep,
        data_separation: sep,
    };
    generate_synthetic(&params, seed).unwrap()
}

fn small_dims() -> ModelDims {
    ModelDims {
        task_bottom: vec![6],
        shallow: vec![4],
        deep: vec![5],
        top_hidden: vec![6],
    }
}

fn train_cfg(epochs: usize, lambda: Option<f64>) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        lr: 0.05,
        seed: 3,
        privacy: lambda.map(|l| PrivacyConfig {
            lambda: l,
            ..PrivacyConfig::default()
        }),
        binned_mi_bins: 8,
    }
}

struct Fixture {
    session: VflSession,
    query: Vec<u64>,
    enclaves: Vec<Enclave>,
}

fn trained(n: usize, epochs: usize, lambda: Option<f64>) -> Fixture {
    let data = dataset(n, 1.0, 7);
    let splits = split_ids(&data.ids, &SplitFractions::default(), 7);
    let mut session = VflSession::new(&data, small_dims(), CostModel::default(), 11).unwrap();
    session
        .train_stage2(&splits.train, &splits.validation, &train_cfg(epochs, lambda))
        .unwrap();
    let enclaves = session
        .data_parties
        .iter()
        .enumerate()
        .map(|(p, party)| {
            let mut e = Enclave::new(1 << 27, 0.0, 40 + p as u64);
            e.provision_baseline(
                &party.data.canonical_bytes(),
                &party.artifact.canonical_bytes(),
                &party.artifact.version,
                AcceptanceReport {
                    validation_accuracy: 1.0,
                },
            )
            .unwrap();
            e
        })
        .collect();
    Fixture {
        session,
        query: splits.query,
        enclaves,
    }
}

fn bits(t: &Tensor2) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn trusted_and_untrusted_paths_agree_bitwise() {
    let mut f = trained(600, 2, Some(0.1));
    let cost = f.session.cost;
    for p in 0..2 {
        let un = f.session.untrusted_inference(p, &f.query, 0.0).unwrap();
        let (_, schedule) = optimize_blocks(&cost, f.query.len(), 64).unwrap();
        let tr = f
            .session
            .trusted_inference(p, &mut f.enclaves[p], &f.query, &schedule, 0.0)
            .unwrap();
        assert_eq!(un.ids, tr.ids);
        assert_eq!(bits(&un.representations), bits(&tr.representations));
    }
}

#[test]
fn trusted_output_does_not_depend_on_block_count() {
    let mut f = trained(400, 1, None);
    let cost = f.session.cost;
    let ids: Vec<u64> = f.query.iter().copied().step_by(2).collect();
    let mut reference = None;
    for blocks in [1, 3, 7, 40] {
        let schedule = simulate_schedule(&cost, ids.len(), blocks).unwrap();
        let out = f
            .session
            .trusted_inference(0, &mut f.enclaves[0], &ids, &schedule, 0.0)
            .unwrap();
        let b = bits(&out.representations);
        match &reference {
            None => reference = Some(b),
            Some(r) => assert_eq!(r, &b, "B={blocks}"),
        }
    }
}

#[test]
fn zero_perturbation_single_block_is_plain_composition() {
    let data = dataset(100, 1.0, 2);
    let mut session = VflSession::new(&data, small_dims(), CostModel::default(), 5).unwrap();
    let party = &session.data_parties[1];
    assert!(party.artifact.sigma.values().iter().all(|&s| s == 0.0));
    let mut enclave = Enclave::new(1 << 27, 0.0, 1);
    enclave
        .provision_baseline(
            &party.data.canonical_bytes(),
            &party.artifact.canonical_bytes(),
            "init",
            AcceptanceReport {
                validation_accuracy: 1.0,
            },
        )
        .unwrap();
    let ids: Vec<u64> = (10..30).collect();
    let x = party.data.rows_for(&ids).unwrap();
    // Layer by layer by hand: relu(x·W + b) through shallow then deep.
    let mut h = x;
    for layer in party.artifact.shallow.layers().iter().chain(party.artifact.deep.layers()) {
        let mut out = Tensor2::zeros(h.rows(), layer.out_dim());
        for r in 0..h.rows() {
            for j in 0..layer.out_dim() {
                let mut acc = 0.0;
                for i in 0..layer.in_dim() {
                    acc += h.get(r, i) * layer.weight.get(i, j);
                }
                out.set(r, j, acc + layer.bias[j]);
            }
        }
        if layer.activation == Activation::Relu {
            for v in out.data_mut() {
                *v = v.max(0.0);
            }
        }
        h = out;
    }
    let schedule = simulate_schedule(&session.cost, ids.len(), 1).unwrap();
    let tr = session.trusted_inference(1, &mut enclave, &ids, &schedule, 0.0).unwrap();
    for (a, b) in tr.representations.data().iter().zip(h.data()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn empty_query_returns_empty_batch() {
    let mut f = trained(200, 1, None);
    let before = f.session.transport.len();
    let out = f.session.untrusted_inference(0, &[], 0.0).unwrap();
    assert_eq!(out.representations.shape(), (0, 5));
    assert_eq!(out.elapsed, 0.0);
    assert_eq!(f.session.transport.len(), before);
}

#[test]
fn unknown_id_is_rejected() {
    let mut f = trained(200, 1, None);
    let err = f.session.untrusted_inference(0, &[3, 1_000_000], 0.0).unwrap_err();
    assert_eq!(err, ProtocolError::UnknownId(1_000_000));
    let schedule = simulate_schedule(&f.session.cost, 1, 1).unwrap();
    assert!(f
        .session
        .trusted_inference(0, &mut f.enclaves[0], &[1_000_000], &schedule, 0.0)
        .is_err());
}

#[test]
fn zero_lambda_matches_disabled_privacy() {
    let a = trained(300, 2, Some(0.0));
    let b = trained(300, 2, None);
    for (pa, pb) in a.session.data_parties.iter().zip(&b.session.data_parties) {
        assert_eq!(pa.artifact.canonical_bytes(), pb.artifact.canonical_bytes());
    }
}

#[test]
fn training_is_deterministic() {
    let a = trained(300, 2, Some(0.5));
    let b = trained(300, 2, Some(0.5));
    for (pa, pb) in a.session.data_parties.iter().zip(&b.session.data_parties) {
        assert_eq!(pa.artifact.canonical_bytes(), pb.artifact.canonical_bytes());
    }
    assert_eq!(a.session.transport.transcript(), b.session.transport.transcript());
}

/// Logistic regression on all features by full-batch gradient descent.
fn logistic_oracle(data: &AlignedDataset, train: &[usize], test: &[usize]) -> f64 {
    let parts: Vec<&Tensor2> = std::iter::once(&data.task_features).chain(data.data_features.iter()).collect();
    let x = Tensor2::hconcat(&parts).unwrap();
    let d = x.cols();
    let mut w = vec![0.0; d + 1];
    for _ in 0..300 {
        let mut g = vec![0.0; d + 1];
        for &r in train {
            let z: f64 = w[d] + (0..d).map(|j| w[j] * x.get(r, j)).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - data.labels[r] as f64;
            for j in 0..d {
                g[j] += err * x.get(r, j);
            }
            g[d] += err;
        }
        for j in 0..=d {
            w[j] -= 0.5 * g[j] / train.len() as f64;
        }
    }
    let correct = test
        .iter()
        .filter(|&&r| {
            let z: f64 = w[d] + (0..d).map(|j| w[j] * x.get(r, j)).sum::<f64>();
            usize::from(z > 0.0) == data.labels[r]
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn separable_data_is_learned() {
    let data = dataset(2000, 1.5, 19);
    let train: Vec<usize> = (0..1600).collect();
    let test: Vec<usize> = (1600..2000).collect();
    let oracle = logistic_oracle(&data, &train, &test);
    assert!(oracle >= 0.95, "oracle {oracle}");
    let mut session = VflSession::new(&data, small_dims(), CostModel::default(), 4).unwrap();
    let ids = |rows: &[usize]| rows.iter().map(|&r| data.ids[r]).collect::<Vec<u64>>();
    let log = session
        .train_stage2(&ids(&train), &ids(&test), &train_cfg(8, Some(0.0)))
        .unwrap()
        .log;
    let acc = log.last().unwrap().val_accuracy;
    assert!(acc >= 0.95, "model {acc}, oracle {oracle}");
    assert!(log.epochs.iter().all(|e| e.task_loss.is_finite()));
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let data = dataset(300, 1.0, 1);
    let mut session = VflSession::new(&data, small_dims(), CostModel::default(), 4).unwrap();
    let mut cfg = train_cfg(20, None);
    cfg.lr = f64::MAX;
    let ids: Vec<u64> = data.ids.clone();
    let err = session.train_stage2(&ids, &ids[..50], &cfg).unwrap_err();
    assert!(matches!(err, ProtocolError::Divergence { .. }), "{err:?}");
}

#[test]
fn labels_and_raw_features_stay_local() {
    let f = trained(300, 1, Some(0.1));
    let raw: Vec<BTreeSet<u64>> = f
        .session
        .data_parties
        .iter()
        .map(|p| p.data.features().data().iter().map(|v| v.to_bits()).collect())
        .collect();
    let task_raw: BTreeSet<u64> = f.session.task.data.features().data().iter().map(|v| v.to_bits()).collect();
    for m in f.session.transport.messages() {
        let payload = m.decode().unwrap();
        // The task party only ever sends ids and gradients.
        if m.from == PartyId::Task {
            assert!(matches!(m.kind, MessageKind::IdBatch | MessageKind::GradientShare | MessageKind::AuditVerdict));
        }
        if let Payload::Batch { ids, tensor, .. } = &payload {
            if m.to == PartyId::Coordinator {
                assert!(ids.is_empty(), "ids sent to the coordinator");
            }
            for v in tensor.data() {
                assert!(!task_raw.contains(&v.to_bits()));
                for set in &raw {
                    assert!(!set.contains(&v.to_bits()) || *v == 0.0);
                }
            }
        }
    }
}

#[test]
fn messages_are_delivered_after_link_latency() {
    let mut f = trained(300, 1, None);
    let cost = f.session.cost;
    let schedule = optimize_blocks(&cost, 30, 8).unwrap().1;
    let ids = f.query[..30].to_vec();
    f.session.untrusted_inference(0, &f.query, 5.0).unwrap();
    f.session
        .trusted_inference(0, &mut f.enclaves[0], &ids, &schedule, 5.0)
        .unwrap();
    let latency = f.session.transport.link_latency();
    let transcript = f.session.transport.transcript();
    assert!(!transcript.is_empty());
    for r in transcript {
        assert_eq!(r.deliver_time, r.send_time + latency);
        let at = r.received_at.expect("every message is consumed");
        assert!(at >= r.deliver_time, "{r:?}");
    }
}

#[test]
fn sampled_ids_never_reach_the_data_party() {
    let mut f = trained(300, 1, None);
    let query = f.query.clone();
    let sampled: Vec<u64> = query.iter().copied().skip(3).step_by(7).collect();
    let start = f.session.transport.len();
    let schedule = optimize_blocks(&f.session.cost, sampled.len(), 8).unwrap().1;
    f.session.untrusted_inference(0, &query, 0.0).unwrap();
    f.session
        .trusted_inference(0, &mut f.enclaves[0], &sampled, &schedule, 0.0)
        .unwrap();
    for m in f.session.transport.messages().skip(start) {
        if m.to != PartyId::Data(0) {
            if let Payload::Batch { ids, .. } = m.decode().unwrap() {
                assert!(ids.is_empty() || ids == query);
            }
            continue;
        }
        match m.decode().unwrap() {
            Payload::Ids(ids) => assert_eq!(ids, query),
            Payload::Batch { ids, .. } => assert!(ids.is_empty() || ids == query),
            Payload::Verdict { .. } => {}
        }
    }
}

#[test]
fn joint_predict_orders_task_first_and_checks_rows() {
    let f = trained(200, 1, None);
    let task = &f.session.task;
    let ids = &f.query[..4];
    let h_t = task.bottom.forward(&task.data.rows_for(ids).unwrap()).unwrap();
    let h0 = Tensor2::from_vec(4, 5, (0..20).map(|i| i as f64 * 0.1).collect()).unwrap();
    let h1 = Tensor2::from_vec(4, 5, (0..20).map(|i| -(i as f64) * 0.05).collect()).unwrap();
    let out = task.joint_predict(ids, &h_t, &[&h0, &h1]).unwrap();
    let expected = task.top.forward(&Tensor2::hconcat(&[&h_t, &h0, &h1]).unwrap()).unwrap();
    assert_eq!(bits(&out.logits), bits(&expected));
    assert_eq!(out.ids, ids);
    let swapped = task.joint_predict(ids, &h_t, &[&h1, &h0]).unwrap();
    assert_ne!(bits(&swapped.logits), bits(&out.logits));
    let short = Tensor2::zeros(3, 5);
    assert!(task.joint_predict(ids, &h_t, &[&h0, &short]).is_err());
    assert!(task.joint_predict(&ids[..3], &h_t, &[&h0, &h1]).is_err());
}
