//! Learned additive perturbation, a MINE critic for I(x_d; ẑ_d) and a
//! histogram MI estimator used as an independent check.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{init_model, Adam, FcnnModel, GradientSet, NnError, Tensor2};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("critic diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Input-independent vector added to every row of the shallow output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    sigma: Vec<f64>,
}

impl Perturbation {
    pub fn new(sigma: Vec<f64>) -> Result<Self, NnError> {
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(NnError::Input("perturbation entries must be finite".into()));
        }
        Ok(Self { sigma })
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            sigma: vec![0.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.sigma.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.sigma
    }

    /// `ẑ = z + σ`, broadcast over rows.
    pub fn apply(&self, z: &Tensor2) -> Result<Tensor2, NnError> {
        let mut out = z.clone();
        out.add_row_broadcast(&self.sigma)?;
        Ok(out)
    }

    /// `σ ← σ − lr · grad`.
    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) -> Result<(), NnError> {
        if grad.len() != self.sigma.len() {
            return Err(NnError::Shape {
                op: "Perturbation::sgd_step",
                detail: format!("{} gradients for width {}", grad.len(), self.sigma.len()),
            });
        }
        for (s, g) in self.sigma.iter_mut().zip(grad) {
            *s -= lr * g;
        }
        Ok(())
    }
}

pub const CRITIC_HIDDEN: usize = 32;
pub const MIN_MINE_BATCH: usize = 8;

/// Statistics network `V(x, z)` over the concatenated pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MiCritic {
    pub net: FcnnModel,
    x_dim: usize,
}

impl MiCritic {
    pub fn new(x_dim: usize, z_dim: usize, seed: u64) -> Result<Self, PrivacyError> {
        let net = init_model(&[x_dim + z_dim, CRITIC_HIDDEN, CRITIC_HIDDEN, 1], seed)?;
        Ok(Self { net, x_dim })
    }

    pub fn from_net(net: FcnnModel, x_dim: usize) -> Result<Self, PrivacyError> {
        if net.out_dim() != 1 || net.in_dim() <= x_dim {
            return Err(PrivacyError::Input("critic must map x ++ z to one score".into()));
        }
        Ok(Self { net, x_dim })
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn z_dim(&self) -> usize {
        self.net.in_dim() - self.x_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum MiMethod {
    Mine,
    Binned,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MiEstimate {
    /// Nats.
    pub value: f64,
    pub method: MiMethod,
    pub sample_count: usize,
}

/// Which expectation terms contribute to `∂I/∂z`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ZGradient {
    #[default]
    JointOnly,
    Full,
}

/// Objective value and its gradients, in the caller's row order.
#[derive(Clone, Debug)]
pub struct MineTerms {
    pub value: f64,
    /// `∂I/∂θ` for the critic parameters.
    pub critic_grads: GradientSet,
    /// `∂I/∂z`, one row per input row.
    pub z_grad: Tensor2,
}

fn check_batch(critic: &MiCritic, x: &Tensor2, z: &Tensor2) -> Result<(), PrivacyError> {
    if x.rows() != z.rows() {
        return Err(PrivacyError::Input(format!("{} x rows vs {} z rows", x.rows(), z.rows())));
    }
    if x.rows() < MIN_MINE_BATCH {
        return Err(PrivacyError::Input(format!(
            "batch of {} is below the minimum {MIN_MINE_BATCH}",
            x.rows()
        )));
    }
    if x.cols() != critic.x_dim || z.cols() != critic.z_dim() {
        return Err(PrivacyError::Input(format!(
            "critic expects {}+{} columns, got {}+{}",
            critic.x_dim,
            critic.z_dim(),
            x.cols(),
            z.cols()
        )));
    }
    Ok(())
}

/// Row order sorted by the bit patterns of `(x_row, z_row)`, so that pairing
/// depends on batch content only and not on how rows were ordered.
fn canonical_order(x: &Tensor2, z: &Tensor2) -> Vec<usize> {
    let key = |r: usize| x.row(r).iter().chain(z.row(r));
    let mut order: Vec<usize> = (0..x.rows()).collect();
    order.sort_by(|&a, &b| {
        key(a)
            .zip(key(b))
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    order
}

fn shuffle_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, rng::STREAM_MINE_PERM));
    perm
}

fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// Evaluate `I = mean V(x_i, z_i) − log mean exp V(x_i, z_π(i))` and its
/// gradients. Rows are put in canonical order and paired by a permutation
/// drawn from `shuffle_seed`.
pub fn mine_terms(
    critic: &MiCritic,
    x: &Tensor2,
    z: &Tensor2,
    shuffle_seed: u64,
    mode: ZGradient,
) -> Result<MineTerms, PrivacyError> {
    check_batch(critic, x, z)?;
    let n = x.rows();
    let order = canonical_order(x, z);
    let perm = shuffle_permutation(n, shuffle_seed);
    let xc = x.select_rows(&order);
    let zc = z.select_rows(&order);
    let zm = zc.select_rows(&perm);

    let (vj, cache_j) = critic.net.forward_cached(&Tensor2::hconcat(&[&xc, &zc])?)?;
    let (vm, cache_m) = critic.net.forward_cached(&Tensor2::hconcat(&[&xc, &zm])?)?;
    let value = vj.data().iter().sum::<f64>() / n as f64 - log_mean_exp(vm.data());

    let up_j = Tensor2::from_vec(n, 1, vec![1.0 / n as f64; n])?;
    let mmax = vm.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = vm.data().iter().map(|v| (v - mmax).exp()).collect();
    let wsum: f64 = w.iter().sum();
    let up_m = Tensor2::from_vec(n, 1, w.iter().map(|v| -v / wsum).collect())?;

    let (mut critic_grads, din_j) = critic.net.backward(&cache_j, &up_j)?;
    let (grads_m, din_m) = critic.net.backward(&cache_m, &up_m)?;
    critic_grads.add_assign(&grads_m)?;

    let xd = critic.x_dim;
    let zd = critic.z_dim();
    let mut z_grad = Tensor2::zeros(n, zd);
    for (c, &orig) in order.iter().enumerate() {
        z_grad.row_mut(orig).copy_from_slice(&din_j.row(c)[xd..]);
    }
    if mode == ZGradient::Full {
        for (c, &p) in perm.iter().enumerate() {
            let orig = order[p];
            for (g, d) in z_grad.row_mut(orig).iter_mut().zip(&din_m.row(c)[xd..]) {
                *g += d;
            }
        }
    }
    Ok(MineTerms {
        value,
        critic_grads,
        z_grad,
    })
}

pub fn mine_estimate(critic: &MiCritic, x: &Tensor2, z: &Tensor2, shuffle_seed: u64) -> Result<MiEstimate, PrivacyError> {
    check_batch(critic, x, z)?;
    let n = x.rows();
    let order = canonical_order(x, z);
    let perm = shuffle_permutation(n, shuffle_seed);
    let xc = x.select_rows(&order);
    let zc = z.select_rows(&order);
    let vj = critic.net.forward(&Tensor2::hconcat(&[&xc, &zc])?)?;
    let vm = critic.net.forward(&Tensor2::hconcat(&[&xc, &zc.select_rows(&perm)])?)?;
    let value = vj.data().iter().sum::<f64>() / n as f64 - log_mean_exp(vm.data());
    if !value.is_finite() {
        return Err(PrivacyError::Divergence("non-finite MINE estimate".into()));
    }
    Ok(MiEstimate {
        value,
        method: MiMethod::Mine,
        sample_count: n,
    })
}

/// Critic ascent on the MINE objective with its own optimizer state.
#[derive(Clone, Debug)]
pub struct CriticTrainer {
    pub critic: MiCritic,
    opt: Adam,
    seed: u64,
    step: u64,
}

impl CriticTrainer {
    pub fn new(critic: MiCritic, lr: f64, seed: u64) -> Self {
        let opt = Adam::new(&critic.net, lr);
        Self {
            critic,
            opt,
            seed,
            step: 0,
        }
    }

    fn next_seed(&mut self) -> u64 {
        self.step += 1;
        rng::derive(self.seed, self.step)
    }

    /// `steps` ascent steps on `(x, z)`; returns the last objective value.
    pub fn ascend(&mut self, x: &Tensor2, z: &Tensor2, steps: usize) -> Result<f64, PrivacyError> {
        let mut last = f64::NAN;
        for _ in 0..steps {
            let seed = self.next_seed();
            let mut terms = mine_terms(&self.critic, x, z, seed, ZGradient::JointOnly)?;
            if !terms.value.is_finite() || !terms.critic_grads.is_finite() {
                return Err(PrivacyError::Divergence(format!("step {}", self.step)));
            }
            terms.critic_grads.scale(-1.0);
            self.opt.step(&mut self.critic.net, &terms.critic_grads)?;
            last = terms.value;
        }
        if !self.critic.net.is_finite() {
            return Err(PrivacyError::Divergence(format!("step {}", self.step)));
        }
        Ok(last)
    }

    /// Objective and `∂I/∂z` at the current critic.
    pub fn z_gradient(&mut self, x: &Tensor2, z: &Tensor2, mode: ZGradient) -> Result<MineTerms, PrivacyError> {
        let seed = self.next_seed();
        mine_terms(&self.critic, x, z, seed, mode)
    }
}

/// Knobs for the MI penalty during split training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct PrivacyConfig {
    pub lambda: f64,
    pub critic_lr: f64,
    pub inner_critic_steps: usize,
    pub z_gradient: ZGradient,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            critic_lr: 1e-3,
            inner_critic_steps: 5,
            z_gradient: ZGradient::JointOnly,
        }
    }
}

pub const MAX_BINNED_DIMS: usize = 3;
pub const MIN_BINS: usize = 4;
pub const MAX_BINS: usize = 64;

fn cell_keys(t: &Tensor2, bins: usize) -> Vec<u64> {
    let (lo, hi): (Vec<f64>, Vec<f64>) = (0..t.cols())
        .map(|c| {
            t.iter_rows()
                .map(|r| r[c])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
        })
        .unzip();
    t.iter_rows()
        .map(|r| {
            r.iter().enumerate().fold(0u64, |key, (c, &v)| {
                let range = hi[c] - lo[c];
                let idx = if range > 0.0 {
                    (((v - lo[c]) / range * bins as f64) as usize).min(bins - 1)
                } else {
                    0
                };
                key * bins as u64 + idx as u64
            })
        })
        .collect()
}

fn entropy<K: std::hash::Hash + Eq>(keys: impl Iterator<Item = K>, n: usize) -> f64 {
    let mut counts: HashMap<K, usize> = HashMap::new();
    for k in keys {
        *counts.entry(k).or_default() += 1;
    }
    let mut c: Vec<usize> = counts.into_values().collect();
    c.sort_unstable();
    let nf = n as f64;
    nf.ln() - c.iter().map(|&k| k as f64 * (k as f64).ln()).sum::<f64>() / nf
}

/// Plug-in MI from equal-width histograms over each column's range.
pub fn binned_mi(x: &Tensor2, z: &Tensor2, bins: usize) -> Result<MiEstimate, PrivacyError> {
    if x.rows() != z.rows() || x.rows() == 0 {
        return Err(PrivacyError::Input("binned MI needs equal, non-zero row counts".into()));
    }
    if x.cols() == 0 || z.cols() == 0 || x.cols() > MAX_BINNED_DIMS || z.cols() > MAX_BINNED_DIMS {
        return Err(PrivacyError::Unsupported(format!(
            "binned MI supports 1..={MAX_BINNED_DIMS} dims per side, got {} and {}",
            x.cols(),
            z.cols()
        )));
    }
    if !(MIN_BINS..=MAX_BINS).contains(&bins) {
        return Err(PrivacyError::Input(format!("bins {bins} outside {MIN_BINS}..={MAX_BINS}")));
    }
    let n = x.rows();
    let kx = cell_keys(x, bins);
    let kz = cell_keys(z, bins);
    let hx = entropy(kx.iter().copied(), n);
    let hz = entropy(kz.iter().copied(), n);
    let hxz = entropy(kx.iter().zip(&kz), n);
    Ok(MiEstimate {
        value: (hx + hz - hxz).max(0.0),
        method: MiMethod::Binned,
        sample_count: n,
    })
}
