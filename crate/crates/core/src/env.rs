//! Per-base-station radio and queueing model.
//!
//! A slice's traffic enters a FIFO buffer at a constant rate over the decision
//! interval and is drained at the Shannon rate of its PRB grant. A bit whose
//! queueing delay would exceed the slice latency bound is dropped on arrival;
//! with deterministic FIFO service that delay is known exactly at admission,
//! so no served bit ever waits longer than the bound. Within an interval the
//! queue is solved in closed form (the virtual waiting time is piecewise
//! linear), then bit counts are rounded so conservation holds in integers.

use std::collections::VecDeque;

use rand::Rng;

use crate::domain::{AllocationDecision, SliceSpec};

/// Bandwidth of one PRB.
pub const PRB_BANDWIDTH_HZ: f64 = 180_000.0;

/// Lowest SNR the sampler emits.
pub const SNR_FLOOR_DB: f64 = -30.0;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Throughput in bits/s of `prbs` resource blocks at `snr_db`.
pub fn gamma(prbs: u32, snr_db: f64) -> f64 {
    if prbs == 0 {
        return 0.0;
    }
    let snr = 10f64.powf(snr_db / 10.0);
    f64::from(prbs) * PRB_BANDWIDTH_HZ * (1.0 + snr).log2()
}

/// Draws one interval-average SNR in dB.
///
/// The amplitude is Rayleigh with scale `s`, so the linear power `R^2` is
/// exponential with mean `2 s^2` and `E[ln R^2] = ln(2 s^2) - gamma_E`. Picking
/// `2 s^2 = 10^(mean_db/10) * e^gamma_E` therefore puts the dB-domain mean
/// exactly at `mean_db` (offset of about 2.507 dB over the linear mean).
pub fn sample_snr<R: Rng + ?Sized>(rng: &mut R, mean_db: f64) -> f64 {
    let two_s2 = 10f64.powf(mean_db / 10.0) * EULER_GAMMA.exp();
    let scale = (two_s2 / 2.0).sqrt();
    // 1 - U keeps the log argument in (0, 1].
    let u: f64 = 1.0 - rng.random::<f64>();
    let amplitude = scale * (-2.0 * u.ln()).sqrt();
    let db = 20.0 * amplitude.log10();
    if db.is_finite() {
        db.max(SNR_FLOOR_DB)
    } else {
        SNR_FLOOR_DB
    }
}

/// Bits that arrived together and have waited `age_s` at the start of the
/// next interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgeBucket {
    pub bits: u64,
    pub age_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueueState {
    pub backlog_bits: u64,
    /// Oldest first.
    pub age_buckets: VecDeque<AgeBucket>,
}

impl QueueState {
    pub fn is_consistent(&self) -> bool {
        let sum: u64 = self.age_buckets.iter().map(|b| b.bits).sum();
        let ordered = self
            .age_buckets
            .iter()
            .zip(self.age_buckets.iter().skip(1))
            .all(|(a, b)| a.age_s >= b.age_s);
        sum == self.backlog_bits && ordered
    }
}

/// A run of served bits whose waiting time varies linearly from `start_s`
/// to `end_s` across the run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySegment {
    pub bits: f64,
    pub start_s: f64,
    pub end_s: f64,
}

/// Waiting-time distribution of the bits served in one interval.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencyProfile {
    pub segments: Vec<LatencySegment>,
}

impl LatencyProfile {
    pub fn total_bits(&self) -> f64 {
        self.segments.iter().map(|s| s.bits).sum()
    }

    pub fn mean_s(&self) -> f64 {
        let total = self.total_bits();
        if total <= 0.0 {
            return 0.0;
        }
        self.segments
            .iter()
            .map(|s| s.bits * 0.5 * (s.start_s + s.end_s))
            .sum::<f64>()
            / total
    }

    pub fn max_s(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| s.start_s.max(s.end_s))
            .fold(0.0, f64::max)
    }

    /// Waiting time of the bit at served-bit fraction `q` in FIFO order.
    pub fn at_fraction(&self, q: f64) -> Option<f64> {
        let total = self.total_bits();
        if total <= 0.0 {
            return None;
        }
        let mut target = q.clamp(0.0, 1.0) * total;
        for s in &self.segments {
            if target <= s.bits {
                let f = if s.bits > 0.0 { target / s.bits } else { 0.0 };
                return Some(s.start_s + f * (s.end_s - s.start_s));
            }
            target -= s.bits;
        }
        self.segments.last().map(|s| s.end_s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalOutcome {
    pub served_bits: u64,
    pub dropped_bits: u64,
    pub offered_bits: u64,
    pub backlog_bits_start: u64,
    pub backlog_bits_end: u64,
    pub mean_latency_ms: f64,
    pub latency: LatencyProfile,
}

impl IntervalOutcome {
    /// served + dropped + backlog_end - backlog_start == offered
    pub fn conserves(&self) -> bool {
        self.served_bits + self.dropped_bits + self.backlog_bits_end
            == self.offered_bits + self.backlog_bits_start
    }
}

/// One constant-rate arrival phase with a linear virtual waiting time.
#[derive(Debug, Clone, Copy)]
struct Phase {
    from: f64,
    to: f64,
    rate: f64,
    wait_from: f64,
    slope: f64,
}

impl Phase {
    fn wait_at(&self, tau: f64) -> f64 {
        self.wait_from + self.slope * (tau - self.from)
    }
}

/// Advances one slice queue through one decision interval.
pub fn step_interval(
    queue: &QueueState,
    alloc: &AllocationDecision,
    snr_db: f64,
    offered_bits: u64,
    slice: &SliceSpec,
    interval_s: f64,
) -> (QueueState, IntervalOutcome) {
    let service = gamma(alloc.prbs, snr_db);
    let bound = slice.latency_bound_s();
    let start_backlog = queue.backlog_bits;
    let available = start_backlog + offered_bits;

    if service <= 0.0 {
        let outcome = IntervalOutcome {
            served_bits: 0,
            dropped_bits: available,
            offered_bits,
            backlog_bits_start: start_backlog,
            backlog_bits_end: 0,
            mean_latency_ms: 0.0,
            latency: LatencyProfile::default(),
        };
        return (QueueState::default(), outcome);
    }

    let mut segments = Vec::new();

    // Carried bits first, in FIFO order.
    let mut busy = 0.0;
    let mut served_f = 0.0;
    for bucket in &queue.age_buckets {
        let slack = bound - bucket.age_s - busy;
        if slack < 0.0 {
            continue;
        }
        let serve = (bucket.bits as f64).min(service * slack);
        if serve > 0.0 {
            let start = bucket.age_s + busy;
            busy += serve / service;
            segments.push(LatencySegment {
                bits: serve,
                start_s: start,
                end_s: (start + serve / service).min(bound),
            });
            served_f += serve;
        }
    }

    // Fresh arrivals at constant rate over the interval.
    let arrival = offered_bits as f64 / interval_s;
    let w0 = busy.min(bound);
    let slope = arrival / service - 1.0;
    let mut phases = Vec::with_capacity(2);
    if arrival > 0.0 {
        if slope > 0.0 {
            let saturate = ((bound - w0) / slope).min(interval_s);
            phases.push(Phase { from: 0.0, to: saturate, rate: arrival, wait_from: w0, slope });
            if saturate < interval_s {
                phases.push(Phase { from: saturate, to: interval_s, rate: service, wait_from: bound, slope: 0.0 });
            }
        } else if slope < 0.0 {
            let drain = (w0 / -slope).min(interval_s);
            phases.push(Phase { from: 0.0, to: drain, rate: arrival, wait_from: w0, slope });
            if drain < interval_s {
                phases.push(Phase { from: drain, to: interval_s, rate: arrival, wait_from: 0.0, slope: 0.0 });
            }
        } else {
            phases.push(Phase { from: 0.0, to: interval_s, rate: arrival, wait_from: w0, slope: 0.0 });
        }
    }
    phases.retain(|p| p.to > p.from);

    let admitted: f64 = phases.iter().map(|p| p.rate * (p.to - p.from)).sum();
    let wait_end = phases.last().map_or(0.0, |p| p.wait_at(p.to).max(0.0));
    let backlog_f = (service * wait_end).min(admitted);

    // Last arrival instant whose service completes inside the interval:
    // tau + W(tau) = interval_s, with tau + W(tau) non-decreasing.
    let mut cutoff = interval_s;
    if wait_end > 0.0 {
        for p in &phases {
            let finish_at_end = p.to + p.wait_at(p.to);
            if finish_at_end >= interval_s {
                let finish_at_start = p.from + p.wait_from;
                cutoff = if finish_at_start >= interval_s {
                    p.from
                } else {
                    p.from + (interval_s - finish_at_start) / (1.0 + p.slope)
                };
                break;
            }
        }
    }

    let mut backlog_arrival_moment = 0.0;
    let mut backlog_arrivals = 0.0;
    for p in &phases {
        let served_to = p.to.min(cutoff);
        if served_to > p.from {
            let bits = p.rate * (served_to - p.from);
            segments.push(LatencySegment {
                bits,
                start_s: p.wait_from.clamp(0.0, bound),
                end_s: p.wait_at(served_to).clamp(0.0, bound),
            });
            served_f += bits;
        }
        let queued_from = p.from.max(cutoff);
        if p.to > queued_from {
            let bits = p.rate * (p.to - queued_from);
            backlog_arrivals += bits;
            backlog_arrival_moment += bits * 0.5 * (queued_from + p.to);
        }
    }

    let kept = (served_f + backlog_f).round().clamp(0.0, available as f64) as u64;
    let served = (served_f.round() as u64).min(kept);
    let backlog_end = kept - served;
    let dropped = available - kept;

    let mut next = QueueState::default();
    if backlog_end > 0 {
        let mean_arrival = if backlog_arrivals > 0.0 {
            backlog_arrival_moment / backlog_arrivals
        } else {
            interval_s
        };
        next.backlog_bits = backlog_end;
        next.age_buckets.push_back(AgeBucket {
            bits: backlog_end,
            age_s: (interval_s - mean_arrival).max(0.0),
        });
    }

    let latency = LatencyProfile { segments };
    let outcome = IntervalOutcome {
        served_bits: served,
        dropped_bits: dropped,
        offered_bits,
        backlog_bits_start: start_backlog,
        backlog_bits_end: backlog_end,
        mean_latency_ms: latency.mean_s() * 1000.0,
        latency,
    };
    (next, outcome)
}
