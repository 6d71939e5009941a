//! Block-pipelined scheduling of the trusted inference path.
//!
//! The trusted path splits its workload into blocks that flow through three
//! operations: shallow inference in the enclave, the link to the
//! coordinator, and deep inference on the coordinator. Each operation is an
//! exclusive resource. Makespans come from the discrete-event engine in
//! [`des`]; [`PipelineSchedule::verify`] re-checks a finished timeline
//! against the ordering and exclusivity constraints on its own.

mod cost;
pub mod des;

pub use cost::{CommMode, CostModel, DEFAULT_TEE_SLOWDOWN, DEFAULT_UNTRUSTED_SECONDS};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use des::{Job, Span};

pub const DEFAULT_MAX_BLOCKS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("block of {block_bytes} bytes plus {model_bytes}-byte shallow model exceeds EPC of {epc_bytes} bytes")]
    EpcInfeasible {
        block_bytes: usize,
        model_bytes: usize,
        epc_bytes: usize,
    },
    #[error("invalid pipeline input: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Operation {
    Tee,
    Comm,
    Coord,
}

impl Operation {
    pub const ALL: [Operation; 3] = [Operation::Tee, Operation::Comm, Operation::Coord];

    pub fn name(self) -> &'static str {
        match self {
            Operation::Tee => "tee",
            Operation::Comm => "comm",
            Operation::Coord => "coord",
        }
    }

    fn duration(self, cost: &CostModel, samples: usize) -> f64 {
        match self {
            Operation::Tee => cost.tee_time(samples),
            Operation::Comm => cost.comm_time(samples),
            Operation::Coord => cost.coord_time(samples),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub operation: Operation,
    pub block: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PipelineSchedule {
    pub block_count: usize,
    pub block_sizes: Vec<usize>,
    /// Block-major: entry `3·b + o` is operation `o` of block `b`.
    pub timeline: Vec<TimelineEntry>,
    pub makespan: f64,
}

impl PipelineSchedule {
    pub fn entry(&self, op: Operation, block: usize) -> &TimelineEntry {
        let o = Operation::ALL.iter().position(|&x| x == op).unwrap();
        &self.timeline[block * 3 + o]
    }

    /// First sample index of each block, in block order.
    pub fn block_offsets(&self) -> Vec<usize> {
        self.block_sizes
            .iter()
            .scan(0, |acc, &s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect()
    }

    /// Time the coordinator stage extends past the end of enclave work.
    pub fn coordinator_tail(&self) -> f64 {
        let last = self.block_count - 1;
        self.makespan - self.entry(Operation::Tee, last).end
    }

    /// Walk the timeline and check durations, in-block ordering, per-resource
    /// block ordering and the makespan definition.
    pub fn verify(&self, cost: &CostModel) -> Result<(), String> {
        if self.block_sizes.len() != self.block_count || self.timeline.len() != 3 * self.block_count {
            return Err("timeline does not cover every (operation, block)".into());
        }
        for b in 0..self.block_count {
            for (o, &op) in Operation::ALL.iter().enumerate() {
                let e = self.entry(op, b);
                if e.operation != op || e.block != b {
                    return Err(format!("entry {} mislabelled", 3 * b + o));
                }
                if e.end != e.start + op.duration(cost, self.block_sizes[b]) {
                    return Err(format!("{}/{b}: end ≠ start + duration", op.name()));
                }
                if o > 0 && e.start < self.entry(Operation::ALL[o - 1], b).end {
                    return Err(format!("{}/{b} starts before its predecessor ends", op.name()));
                }
                if b > 0 && e.start < self.entry(op, b - 1).end {
                    return Err(format!("{}/{b} overlaps block {}", op.name(), b - 1));
                }
            }
        }
        let last = self.entry(Operation::Coord, self.block_count - 1).end;
        if self.makespan != last {
            return Err(format!("makespan {} ≠ final end {last}", self.makespan));
        }
        Ok(())
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["operation", "block", "start", "end"])?;
        for e in &self.timeline {
            w.write_record([
                e.operation.name().to_string(),
                e.block.to_string(),
                e.start.to_string(),
                e.end.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Even split: sizes differ by at most one, larger blocks first. The block
/// count clamps to the sample count so no block is empty (one empty block
/// when there are no samples).
pub fn split_even(samples: usize, blocks: usize) -> Vec<usize> {
    let b = blocks.clamp(1, samples.max(1));
    let (q, r) = (samples / b, samples % b);
    (0..b).map(|i| q + usize::from(i < r)).collect()
}

fn check_epc(cost: &CostModel, sizes: &[usize]) -> Result<(), PipelineError> {
    let largest = sizes.iter().copied().max().unwrap_or(0);
    if cost.block_footprint(largest) > cost.epc_bytes {
        return Err(PipelineError::EpcInfeasible {
            block_bytes: largest * cost.sample_bytes,
            model_bytes: cost.shallow_model_bytes,
            epc_bytes: cost.epc_bytes,
        });
    }
    Ok(())
}

/// Earliest-start schedule of `samples` split into `blocks` even blocks.
pub fn simulate_schedule(
    cost: &CostModel,
    samples: usize,
    blocks: usize,
) -> Result<PipelineSchedule, PipelineError> {
    if blocks == 0 {
        return Err(PipelineError::Invalid("block count must be at least 1".into()));
    }
    cost.validate()?;
    let sizes = split_even(samples, blocks);
    check_epc(cost, &sizes)?;
    let jobs: Vec<Job> = sizes
        .iter()
        .map(|&s| Job {
            stages: Operation::ALL
                .iter()
                .enumerate()
                .map(|(o, op)| (o, op.duration(cost, s)))
                .collect(),
        })
        .collect();
    let spans = des::simulate(&jobs, 3);
    Ok(assemble(sizes, &spans))
}

fn assemble(sizes: Vec<usize>, spans: &[Vec<Span>]) -> PipelineSchedule {
    let timeline: Vec<TimelineEntry> = spans
        .iter()
        .enumerate()
        .flat_map(|(b, ops)| {
            ops.iter().zip(Operation::ALL).map(move |(s, op)| TimelineEntry {
                operation: op,
                block: b,
                start: s.start,
                end: s.end,
            })
        })
        .collect();
    let makespan = timeline.last().map_or(0.0, |e| e.end);
    PipelineSchedule {
        block_count: sizes.len(),
        block_sizes: sizes,
        timeline,
        makespan,
    }
}

/// Enumerate `B ∈ [1, max_blocks]` and keep the smallest makespan; ties go to
/// the smaller `B`.
pub fn optimize_blocks(
    cost: &CostModel,
    samples: usize,
    max_blocks: usize,
) -> Result<(usize, PipelineSchedule), PipelineError> {
    if max_blocks == 0 {
        return Err(PipelineError::Invalid("maxB must be at least 1".into()));
    }
    cost.validate()?;
    let mut best: Option<(usize, PipelineSchedule)> = None;
    let mut last_err = None;
    for b in 1..=max_blocks.min(samples.max(1)) {
        match simulate_schedule(cost, samples, b) {
            Ok(s) => {
                if best.as_ref().is_none_or(|(_, cur)| s.makespan < cur.makespan) {
                    best = Some((b, s));
                }
            }
            Err(e @ PipelineError::EpcInfeasible { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one candidate was evaluated"))
}

/// `(T_un, T_tr_full)`: untrusted time for all samples and the optimized
/// trusted makespan for all samples.
pub fn measure_times(cost: &CostModel, samples: usize) -> Result<(f64, f64), PipelineError> {
    cost.validate()?;
    let (_, schedule) = optimize_blocks(cost, samples, DEFAULT_MAX_BLOCKS)?;
    Ok((cost.untrusted_time(samples), schedule.makespan))
}

/// Coordinator-stage speedup from pipelining over the `W`-sampled workload:
/// the coordinator tail of the unpipelined schedule divided by that of the
/// optimized schedule.
pub fn speedup_ratio(cost: &CostModel, samples: usize, w: f64) -> Result<f64, PipelineError> {
    if !(w > 0.0 && w <= 1.0) {
        return Err(PipelineError::Invalid(format!("W={w} outside (0, 1]")));
    }
    let sampled = crate::audit::round_count(w, samples);
    let (b_star, best) = optimize_blocks(cost, sampled, DEFAULT_MAX_BLOCKS)?;
    if b_star == 1 {
        return Ok(1.0);
    }
    let single = simulate_schedule(cost, sampled, 1)?;
    Ok(single.coordinator_tail() / best.coordinator_tail())
}

/// Several data parties auditing at once. Each party has its own enclave and
/// link; the coordinator is shared and serves blocks in arrival order.
/// Returns each party's trusted-path completion time.
pub fn simulate_parties(
    costs: &[CostModel],
    samples: &[usize],
    blocks: &[usize],
) -> Result<Vec<f64>, PipelineError> {
    if costs.len() != samples.len() || costs.len() != blocks.len() || costs.is_empty() {
        return Err(PipelineError::Invalid("one cost, sample count and block count per party".into()));
    }
    let coordinator = 2 * costs.len();
    let mut jobs = Vec::new();
    let mut owner = Vec::new();
    for (p, ((cost, &n), &b)) in costs.iter().zip(samples).zip(blocks).enumerate() {
        cost.validate()?;
        let sizes = split_even(n, b);
        check_epc(cost, &sizes)?;
        for s in sizes {
            jobs.push(Job {
                stages: vec![
                    (2 * p, cost.tee_time(s)),
                    (2 * p + 1, cost.comm_time(s)),
                    (coordinator, cost.coord_time(s)),
                ],
            });
            owner.push(p);
        }
    }
    let spans = des::simulate(&jobs, coordinator + 1);
    let mut done = vec![0.0f64; costs.len()];
    for (j, s) in spans.iter().enumerate() {
        done[owner[j]] = done[owner[j]].max(s[2].end);
    }
    Ok(done)
}

#[cfg(test)]
mod tests;
