use std::collections::BTreeSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use super::AuditError;
use crate::rng;

/// Convert a ratio of `n` into a count: nearest integer, at least one when the
/// ratio is positive, never more than `n`.
pub fn round_count(ratio: f64, n: usize) -> usize {
    if ratio <= 0.0 || n == 0 {
        return 0;
    }
    ((ratio * n as f64).round() as usize).clamp(1, n)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditParams {
    /// Inferences in the query.
    pub n: usize,
    /// Sampling ratio.
    pub w: f64,
    /// Abnormal-inference ratio.
    pub k: f64,
}

impl AuditParams {
    pub fn new(n: usize, w: f64, k: f64) -> Result<Self, AuditError> {
        if n == 0 {
            return Err(AuditError::InvalidParams("N must be positive".into()));
        }
        if !(0.0..=1.0).contains(&w) || !w.is_finite() {
            return Err(AuditError::InvalidParams(format!("W={w} outside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&k) || !k.is_finite() {
            return Err(AuditError::InvalidParams(format!("K={k} outside [0, 1]")));
        }
        Ok(Self { n, w, k })
    }

    pub fn sample_count(&self) -> usize {
        round_count(self.w, self.n)
    }

    pub fn abnormal_count(&self) -> usize {
        round_count(self.k, self.n)
    }
}

/// Probability that a uniform `sampled`-subset of `n` hits at least one of
/// `abnormal` marked items: `1 − C(n−a, s) / C(n, s)`, via log-factorials.
pub fn dsr_counts(n: usize, sampled: usize, abnormal: usize) -> f64 {
    if abnormal == 0 || sampled == 0 {
        return 0.0;
    }
    if sampled > n - abnormal.min(n) {
        return 1.0;
    }
    let clean = (n - abnormal) as u64;
    let (n, s) = (n as u64, sampled as u64);
    let log_ratio = ln_factorial(clean) - ln_factorial(clean - s) - ln_factorial(n)
        + ln_factorial(n - s);
    (-log_ratio.exp_m1()).clamp(0.0, 1.0)
}

pub fn dsr(params: &AuditParams) -> f64 {
    if params.w == 0.0 {
        log::warn!("W = 0: no inference is audited, detection rate is 0");
    }
    dsr_counts(params.n, params.sample_count(), params.abnormal_count())
}

/// Continuous minimiser of `|T_un − W·T_tr|`, clamped to `(0, 1]`.
pub fn optimal_w(t_un: f64, t_tr_full: f64) -> Result<f64, AuditError> {
    if !(t_un > 0.0 && t_un.is_finite()) || !(t_tr_full > 0.0 && t_tr_full.is_finite()) {
        return Err(AuditError::InvalidParams(format!(
            "times must be positive, got T_un={t_un}, T_tr={t_tr_full}"
        )));
    }
    Ok((t_un / t_tr_full).min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KThreshold {
    /// Smallest number of abnormal inferences reaching the target.
    pub count: usize,
    /// `count / n`.
    pub k: f64,
    /// Detection rate at `count`.
    pub dsr: f64,
}

/// Smallest `K = m/N` with `dsr ≥ target`. Binary search relies on `dsr`
/// being nondecreasing in the abnormal count.
pub fn min_detectable_k(n: usize, w: f64, target: f64) -> Result<KThreshold, AuditError> {
    if !(target > 0.0 && target < 1.0) {
        return Err(AuditError::InvalidParams(format!("target {target} outside (0, 1)")));
    }
    let params = AuditParams::new(n, w, 0.0)?;
    let s = params.sample_count();
    if dsr_counts(n, s, n) < target {
        return Err(AuditError::NoFeasibleK { n, w, target });
    }
    let (mut lo, mut hi) = (1usize, n);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if dsr_counts(n, s, mid) >= target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(KThreshold {
        count: lo,
        k: lo as f64 / n as f64,
        dsr: dsr_counts(n, s, lo),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub probability: f64,
    pub std_error: f64,
    pub trials: usize,
}

/// Empirical detection rate: each trial draws a fresh audit sample and a fresh
/// placement of the abnormal inferences, and records whether they intersect.
pub fn monte_carlo_dsr(
    params: &AuditParams,
    trials: usize,
    seed: u64,
) -> Result<MonteCarloEstimate, AuditError> {
    if trials < 1000 {
        return Err(AuditError::InvalidParams(format!(
            "need at least 1000 trials, got {trials}"
        )));
    }
    let n = params.n;
    let s = params.sample_count();
    let a = params.abnormal_count();
    let mut rng = rng::stream(seed, rng::STREAM_MONTE_CARLO);
    let mut hits = 0usize;
    let mut marked = vec![false; n];
    for _ in 0..trials {
        if s == 0 || a == 0 {
            continue;
        }
        let abnormal = index::sample(&mut rng, n, a);
        for i in abnormal.iter() {
            marked[i] = true;
        }
        if index::sample(&mut rng, n, s).iter().any(|i| marked[i]) {
            hits += 1;
        }
        for i in abnormal.iter() {
            marked[i] = false;
        }
    }
    let p = hits as f64 / trials as f64;
    Ok(MonteCarloEstimate {
        probability: p,
        std_error: (p * (1.0 - p) / trials as f64).sqrt(),
        trials,
    })
}

/// The secret set of inferences re-executed on the trusted path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditPlan {
    pub params: AuditParams,
    pub sampled_ids: BTreeSet<u64>,
    pub seed: u64,
}

impl AuditPlan {
    pub fn new(params: AuditParams, sampled_ids: BTreeSet<u64>, seed: u64) -> Result<Self, AuditError> {
        if sampled_ids.len() != params.sample_count() {
            return Err(AuditError::InvalidParams(format!(
                "plan holds {} ids, W·N rounds to {}",
                sampled_ids.len(),
                params.sample_count()
            )));
        }
        Ok(Self {
            params,
            sampled_ids,
            seed,
        })
    }
}
