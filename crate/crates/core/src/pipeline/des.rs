//! A small discrete-event engine for flow shops.
//!
//! Each job visits a fixed sequence of resources. A resource serves one job
//! at a time and picks waiting jobs in order of arrival, ties broken by job
//! index. All events sharing a timestamp are applied before any dispatch.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

#[derive(Clone, Debug)]
pub struct Job {
    /// `(resource, duration)` per stage, visited in order.
    pub stages: Vec<(usize, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Span {
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Event {
    time: f64,
    seq: u64,
    job: usize,
    stage: usize,
    kind: EventKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum EventKind {
    Ready,
    Done,
}

impl Eq for Event {}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on (time, seq).
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Run all jobs to completion; returns per job, per stage, its time span.
pub fn simulate(jobs: &[Job], resources: usize) -> Vec<Vec<Span>> {
    let mut spans: Vec<Vec<Span>> = jobs
        .iter()
        .map(|j| vec![Span { start: 0.0, end: 0.0 }; j.stages.len()])
        .collect();
    let mut queues: Vec<VecDeque<(usize, usize)>> = vec![VecDeque::new(); resources];
    let mut busy = vec![false; resources];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push = |heap: &mut BinaryHeap<Event>, time, job, stage, kind| {
        heap.push(Event {
            time,
            seq,
            job,
            stage,
            kind,
        });
        seq += 1;
    };
    for (j, job) in jobs.iter().enumerate() {
        if !job.stages.is_empty() {
            push(&mut heap, 0.0, j, 0, EventKind::Ready);
        }
    }
    while let Some(first) = heap.pop() {
        let now = first.time;
        let mut batch = vec![first];
        while heap.peek().is_some_and(|e| e.time == now) {
            batch.push(heap.pop().unwrap());
        }
        // Arrivals at the same instant queue by job index.
        let mut arrivals = Vec::new();
        for ev in batch {
            let (res, _) = jobs[ev.job].stages[ev.stage];
            match ev.kind {
                EventKind::Ready => arrivals.push((ev.job, ev.stage)),
                EventKind::Done => {
                    busy[res] = false;
                    if ev.stage + 1 < jobs[ev.job].stages.len() {
                        arrivals.push((ev.job, ev.stage + 1));
                    }
                }
            }
        }
        arrivals.sort_unstable();
        for (job, stage) in arrivals {
            queues[jobs[job].stages[stage].0].push_back((job, stage));
        }
        for res in 0..resources {
            if busy[res] {
                continue;
            }
            if let Some((job, stage)) = queues[res].pop_front() {
                let dur = jobs[job].stages[stage].1;
                spans[job][stage] = Span {
                    start: now,
                    end: now + dur,
                };
                busy[res] = true;
                push(&mut heap, now + dur, job, stage, EventKind::Done);
            }
        }
    }
    spans
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_resource_serializes_jobs() {
        let jobs = vec![
            Job { stages: vec![(0, 2.0)] },
            Job { stages: vec![(0, 3.0)] },
        ];
        let s = simulate(&jobs, 1);
        assert_eq!(s[0][0], Span { start: 0.0, end: 2.0 });
        assert_eq!(s[1][0], Span { start: 2.0, end: 5.0 });
    }

    #[test]
    fn two_stage_flow_overlaps() {
        let jobs: Vec<Job> = (0..3).map(|_| Job { stages: vec![(0, 1.0), (1, 1.0)] }).collect();
        let s = simulate(&jobs, 2);
        assert_eq!(s[2][1].end, 4.0);
        assert_eq!(s[1][1].start, 2.0);
    }

    #[test]
    fn zero_duration_stages_complete() {
        let jobs = vec![Job { stages: vec![(0, 0.0), (1, 0.0)] }];
        let s = simulate(&jobs, 2);
        assert_eq!(s[0][1].end, 0.0);
    }
}
