//! Run metrics and their CSV exports.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use rand::Rng;

use crate::clustering::ClusterLabel;
use crate::error::Result;
use crate::federation::OverheadRecord;

pub const RESERVOIR_SIZE: usize = 100_000;

/// Aggregates for one slice over one episode, summed across base stations.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSliceRow {
    pub episode: usize,
    pub slice_id: usize,
    pub mean_reward: f64,
    pub dropped_fraction: f64,
    pub offered_bits: u64,
    pub served_bits: u64,
    pub dropped_bits: u64,
    /// Served-bit weighted.
    pub mean_latency_ms: f64,
    pub penalties: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSummary {
    pub episode: usize,
    pub slice_id: usize,
    pub n_clusters: usize,
    pub labels: Vec<ClusterLabel>,
}

impl ClusterSummary {
    pub fn n_noise(&self) -> usize {
        self.labels.iter().filter(|l| **l == ClusterLabel::Noise).count()
    }
}

#[derive(Debug, Clone, Copy)]
struct Keyed {
    key: f64,
    value: f64,
}

impl PartialEq for Keyed {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Keyed {}

impl PartialOrd for Keyed {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Keyed {
    // Reversed so the heap top is the smallest key.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key.total_cmp(&self.key).then(other.value.total_cmp(&self.value))
    }
}

/// Weighted reservoir (exponential keys): keeps `capacity` samples with
/// inclusion probability proportional to their weight.
#[derive(Debug, Clone)]
pub struct Reservoir {
    capacity: usize,
    heap: BinaryHeap<Keyed>,
    seen: u64,
}

impl Reservoir {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, heap: BinaryHeap::new(), seen: 0 }
    }

    pub fn offer<R: Rng + ?Sized>(&mut self, value: f64, weight: f64, rng: &mut R) {
        if !(weight > 0.0) || self.capacity == 0 {
            return;
        }
        self.seen += 1;
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let key = u.ln() / weight;
        if self.heap.len() < self.capacity {
            self.heap.push(Keyed { key, value });
        } else if self.heap.peek().is_some_and(|top| key > top.key) {
            self.heap.pop();
            self.heap.push(Keyed { key, value });
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    /// Retained samples in ascending order.
    pub fn sorted(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.heap.iter().map(|k| k.value).collect();
        v.sort_by(f64::total_cmp);
        v
    }
}

#[derive(Debug, Clone)]
pub struct SimulationMetrics {
    pub strategy: String,
    pub slice_names: Vec<String>,
    pub rows: Vec<EpisodeSliceRow>,
    /// One record per federation episode, summed over slices.
    pub overhead: Vec<OverheadRecord>,
    pub clusters: Vec<ClusterSummary>,
    /// Latency samples in milliseconds, one reservoir per slice.
    pub latency: Vec<Reservoir>,
    pub intervals_run: u64,
    pub capacity_violations: u64,
    pub conservation_failures: u64,
}

impl SimulationMetrics {
    pub fn new(strategy: &str, slice_names: Vec<String>) -> Self {
        let n = slice_names.len();
        Self {
            strategy: strategy.to_string(),
            slice_names,
            rows: Vec::new(),
            overhead: Vec::new(),
            clusters: Vec::new(),
            latency: (0..n).map(|_| Reservoir::new(RESERVOIR_SIZE)).collect(),
            intervals_run: 0,
            capacity_violations: 0,
            conservation_failures: 0,
        }
    }

    pub fn episodes(&self) -> usize {
        self.rows.iter().map(|r| r.episode + 1).max().unwrap_or(0)
    }

    pub fn slice_rows(&self, slice_id: usize) -> Vec<&EpisodeSliceRow> {
        self.rows.iter().filter(|r| r.slice_id == slice_id).collect()
    }

    /// Mean of `f` over the episodes in `[from, to)` as fractions of the run.
    pub fn window_mean(&self, slice_id: Option<usize>, from: f64, to: f64, f: impl Fn(&EpisodeSliceRow) -> f64) -> f64 {
        let n = self.episodes() as f64;
        let (lo, hi) = ((from * n).floor() as usize, (to * n).ceil() as usize);
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| slice_id.is_none_or(|s| r.slice_id == s))
            .filter(|r| r.episode >= lo && r.episode < hi)
            .map(f)
            .collect();
        if vals.is_empty() {
            return f64::NAN;
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    /// `episode,slice,strategy,mean_reward,dropped_fraction,offered_bits,served_bits,mean_latency_ms`
    pub fn write_metrics_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "episode",
            "slice",
            "strategy",
            "mean_reward",
            "dropped_fraction",
            "offered_bits",
            "served_bits",
            "mean_latency_ms",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.episode.to_string(),
                self.slice_names[r.slice_id].clone(),
                self.strategy.clone(),
                r.mean_reward.to_string(),
                r.dropped_fraction.to_string(),
                r.offered_bits.to_string(),
                r.served_bits.to_string(),
                r.mean_latency_ms.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `episode,strategy,uplink_models,downlink_models,uplink_bytes,downlink_bytes,fallback`
    pub fn write_overhead_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "episode",
            "strategy",
            "uplink_models",
            "downlink_models",
            "uplink_bytes",
            "downlink_bytes",
            "fallback",
        ])?;
        for o in &self.overhead {
            w.write_record([
                o.episode_index.to_string(),
                o.strategy.clone(),
                o.uplink_models.to_string(),
                o.downlink_models.to_string(),
                o.uplink_bytes.to_string(),
                o.downlink_bytes.to_string(),
                o.fallback.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `slice,latency_ms`, ascending within each slice.
    pub fn write_latency_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["slice", "latency_ms"])?;
        for (name, res) in self.slice_names.iter().zip(&self.latency) {
            for v in res.sorted() {
                w.write_record([name.clone(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `episode,slice,bs_id,label`
    pub fn write_clusters_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["episode", "slice", "bs_id", "label"])?;
        for c in &self.clusters {
            for (b, l) in c.labels.iter().enumerate() {
                w.write_record([
                    c.episode.to_string(),
                    self.slice_names[c.slice_id].clone(),
                    b.to_string(),
                    l.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
