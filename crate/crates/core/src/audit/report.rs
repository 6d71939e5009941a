use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::AuditError;

/// One data-party representation as received by the task party.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub id: u64,
    pub representation: Vec<f64>,
}

/// How two representations are compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ComparisonMode {
    /// Byte equality of the binary64 encodings.
    #[default]
    Exact,
    /// Byte equality after rounding to a 2^-32 fixed-point grid.
    Quantized,
}

impl ComparisonMode {
    fn encode(self, values: &[f64]) -> Vec<u8> {
        match self {
            ComparisonMode::Exact => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ComparisonMode::Quantized => values
                .iter()
                .flat_map(|v| ((v * 4_294_967_296.0).round() as i64).to_le_bytes())
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Verdict {
    Consistent,
    Inconsistent,
}

/// Virtual-clock latencies of the two paths for one query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LatencyStats {
    pub t_un: f64,
    pub t_tr_scaled: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditReport {
    pub verdicts: BTreeMap<u64, Verdict>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ppv: Option<f64>,
    pub tpr: Option<f64>,
    pub npv: Option<f64>,
    /// Batch-level decision: any inconsistent verdict flags the data party.
    pub flagged: bool,
    pub empirical_dsr: Option<f64>,
    pub latency: LatencyStats,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl AuditReport {
    pub fn inconsistent_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.verdicts
            .iter()
            .filter(|(_, v)| **v == Verdict::Inconsistent)
            .map(|(id, _)| *id)
    }

    pub fn inconsistent_count(&self) -> usize {
        self.inconsistent_ids().count()
    }

    pub const METRICS_HEADER: [&'static str; 11] = [
        "sampled", "tp", "fp", "tn", "fn", "ppv", "tpr", "npv", "flagged", "tUn", "tTrScaled",
    ];

    /// One CSV metrics row; undefined ratios are left empty.
    pub fn metrics_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.verdicts.len().to_string(),
            self.tp.to_string(),
            self.fp.to_string(),
            self.tn.to_string(),
            self.fn_.to_string(),
            opt(self.ppv),
            opt(self.tpr),
            opt(self.npv),
            self.flagged.to_string(),
            self.latency.t_un.to_string(),
            self.latency.t_tr_scaled.to_string(),
        ]
    }
}

fn index(records: &[InferenceRecord]) -> Result<HashMap<u64, &[f64]>, AuditError> {
    let mut map = HashMap::with_capacity(records.len());
    for r in records {
        if map.insert(r.id, r.representation.as_slice()).is_some() {
            return Err(AuditError::DuplicateRecord(r.id));
        }
    }
    Ok(map)
}

/// Compare both paths on every sampled id and tally detection metrics.
///
/// `ground_truth` only labels the metrics; verdicts never look at it.
pub fn compare_and_report(
    untrusted: &[InferenceRecord],
    trusted: &[InferenceRecord],
    sampled: &BTreeSet<u64>,
    ground_truth: &BTreeSet<u64>,
    mode: ComparisonMode,
) -> Result<AuditReport, AuditError> {
    let un = index(untrusted)?;
    let tr = index(trusted)?;
    let mut report = AuditReport {
        verdicts: BTreeMap::new(),
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
        ppv: None,
        tpr: None,
        npv: None,
        flagged: false,
        empirical_dsr: None,
        latency: LatencyStats::default(),
    };
    for &id in sampled {
        let a = un.get(&id).ok_or(AuditError::Coverage(id, "untrusted"))?;
        let b = tr.get(&id).ok_or(AuditError::Coverage(id, "trusted"))?;
        let verdict = if mode.encode(a) == mode.encode(b) {
            Verdict::Consistent
        } else {
            Verdict::Inconsistent
        };
        let faulty = ground_truth.contains(&id);
        match (verdict, faulty) {
            (Verdict::Inconsistent, true) => report.tp += 1,
            (Verdict::Inconsistent, false) => report.fp += 1,
            (Verdict::Consistent, false) => report.tn += 1,
            (Verdict::Consistent, true) => report.fn_ += 1,
        }
        report.verdicts.insert(id, verdict);
    }
    report.ppv = ratio(report.tp, report.tp + report.fp);
    report.tpr = ratio(report.tp, report.tp + report.fn_);
    report.npv = ratio(report.tn, report.tn + report.fn_);
    report.flagged = report.tp + report.fp > 0;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(vals: &[(u64, f64)]) -> Vec<InferenceRecord> {
        vals.iter()
            .map(|&(id, v)| InferenceRecord {
                id,
                representation: vec![v, 1.0],
            })
            .collect()
    }

    fn ids(v: &[u64]) -> BTreeSet<u64> {
        v.iter().copied().collect()
    }

    #[test]
    fn clean_run_is_all_consistent() {
        let r = recs(&[(1, 0.5), (2, 0.25), (3, -1.0)]);
        let rep = compare_and_report(&r, &r, &ids(&[1, 3]), &BTreeSet::new(), ComparisonMode::Exact)
            .unwrap();
        assert_eq!((rep.tp, rep.fp, rep.tn, rep.fn_), (0, 0, 2, 0));
        assert_eq!(rep.ppv, None);
        assert_eq!(rep.tpr, None);
        assert_eq!(rep.npv, Some(1.0));
        assert!(!rep.flagged);
    }

    #[test]
    fn single_tampered_sample_is_the_only_inconsistency() {
        let trusted = recs(&[(1, 0.5), (2, 0.25), (3, -1.0)]);
        let mut untrusted = trusted.clone();
        untrusted[1].representation[0] += 1e-9;
        let rep = compare_and_report(
            &untrusted,
            &trusted,
            &ids(&[1, 2, 3]),
            &ids(&[2]),
            ComparisonMode::Exact,
        )
        .unwrap();
        assert_eq!(rep.inconsistent_ids().collect::<Vec<_>>(), vec![2]);
        assert_eq!((rep.ppv, rep.tpr, rep.npv), (Some(1.0), Some(1.0), Some(1.0)));
        assert!(rep.flagged);
    }

    #[test]
    fn verdicts_are_symmetric() {
        let a = recs(&[(1, 0.5), (2, 0.25), (3, -1.0)]);
        let b = recs(&[(1, 0.5), (2, 0.26), (3, -1.0)]);
        let s = ids(&[1, 2, 3]);
        let ab = compare_and_report(&a, &b, &s, &BTreeSet::new(), ComparisonMode::Exact).unwrap();
        let ba = compare_and_report(&b, &a, &s, &BTreeSet::new(), ComparisonMode::Exact).unwrap();
        assert_eq!(ab.verdicts, ba.verdicts);
    }

    #[test]
    fn missing_trusted_record_is_coverage_error() {
        let a = recs(&[(1, 0.5), (2, 0.25)]);
        let b = recs(&[(1, 0.5)]);
        let err = compare_and_report(&a, &b, &ids(&[1, 2]), &BTreeSet::new(), ComparisonMode::Exact)
            .unwrap_err();
        assert_eq!(err, AuditError::Coverage(2, "trusted"));
    }

    #[test]
    fn quantized_mode_absorbs_tiny_differences() {
        let a = recs(&[(1, 0.5)]);
        let b = recs(&[(1, 0.5 + 1e-13)]);
        let s = ids(&[1]);
        let exact = compare_and_report(&a, &b, &s, &BTreeSet::new(), ComparisonMode::Exact).unwrap();
        let quant = compare_and_report(&a, &b, &s, &BTreeSet::new(), ComparisonMode::Quantized).unwrap();
        assert!(exact.flagged);
        assert!(!quant.flagged);
    }

    #[test]
    fn negative_zero_differs_bitwise() {
        let a = vec![InferenceRecord { id: 1, representation: vec![0.0] }];
        let b = vec![InferenceRecord { id: 1, representation: vec![-0.0] }];
        let rep = compare_and_report(&a, &b, &ids(&[1]), &BTreeSet::new(), ComparisonMode::Exact).unwrap();
        assert!(rep.flagged);
    }
}
