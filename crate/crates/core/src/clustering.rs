//! Traffic-aware agent grouping: min-max normalised demand series, banded
//! DTW distances and DBSCAN over the precomputed distance matrix.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mobility::DemandSeries;

/// Min-max scaling to `[0, 1]`; a constant series maps to zeros.
pub fn normalize_series(samples: &[f64]) -> Vec<f64> {
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; samples.len()];
    }
    samples.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
}

/// Effective band half-width; `0` means unbounded, and the band is widened
/// to the length difference so a path always exists.
pub fn effective_window(n: usize, m: usize, window: usize) -> usize {
    if window == 0 {
        n.max(m)
    } else {
        window.max(n.abs_diff(m))
    }
}

/// DTW with absolute-difference cost inside a Sakoe-Chiba band, divided by
/// `a.len() + b.len()`.
pub fn dtw(a: &[f64], b: &[f64], window: usize) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "dtw needs non-empty series");
    let (n, m) = (a.len(), b.len());
    let w = effective_window(n, m, window);
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![f64::INFINITY; m];
    for i in 0..n {
        let lo = i.saturating_sub(w);
        let hi = (i + w).min(m - 1);
        cur.iter_mut().for_each(|c| *c = f64::INFINITY);
        for j in lo..=hi {
            let cost = (a[i] - b[j]).abs();
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let up = if i > 0 { prev[j] } else { f64::INFINITY };
                let left = if j > 0 { cur[j - 1] } else { f64::INFINITY };
                let diag = if i > 0 && j > 0 { prev[j - 1] } else { f64::INFINITY };
                up.min(left).min(diag)
            };
            cur[j] = cost + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1] / (n + m) as f64
}

/// Symmetric, zero-diagonal matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = f(i, j);
                values[i * n + j] = d;
                values[j * n + i] = d;
            }
        }
        Self { n, values }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn is_valid(&self) -> bool {
        self.values.len() == self.n * self.n
            && (0..self.n).all(|i| {
                self.get(i, i) == 0.0
                    && (0..self.n).all(|j| {
                        let d = self.get(i, j);
                        d.is_finite() && d >= 0.0 && d == self.get(j, i)
                    })
            })
    }
}

/// Pairwise banded DTW over normalised series, each pair computed once.
/// Row `k` of the matrix corresponds to `series[k]`.
pub fn distance_matrix(series: &[DemandSeries], window: usize) -> Result<DistanceMatrix> {
    if series.len() < 2 {
        return Err(Error::TooFewSeries { needed: 2, actual: series.len() });
    }
    let len = series[0].samples.len();
    for s in series {
        if s.samples.len() != len || len == 0 {
            return Err(Error::RaggedSeries {
                key: format!("slice {} bs {}", s.slice_id, s.bs_id),
                expected: len,
                actual: s.samples.len(),
            });
        }
    }
    let normalized: Vec<Vec<f64>> = series
        .iter()
        .map(|s| normalize_series(&s.samples.iter().map(|&v| v as f64).collect::<Vec<_>>()))
        .collect();
    Ok(matrix_of(&normalized, window))
}

/// Pairwise banded DTW over already normalised samples.
pub fn matrix_of(normalized: &[Vec<f64>], window: usize) -> DistanceMatrix {
    let n = normalized.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let dists: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| dtw(&normalized[i], &normalized[j], window))
        .collect();
    let mut values = vec![0.0; n * n];
    for (&(i, j), &d) in pairs.iter().zip(&dists) {
        values[i * n + j] = d;
        values[j * n + i] = d;
    }
    DistanceMatrix { n, values }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClusterLabel {
    Cluster(usize),
    Noise,
}

impl fmt::Display for ClusterLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClusterLabel::Cluster(k) => write!(f, "{k}"),
            ClusterLabel::Noise => f.write_str("noise"),
        }
    }
}

/// Labels indexed by matrix row (base station position).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<ClusterLabel>,
    pub n_clusters: usize,
}

impl ClusterAssignment {
    pub fn all_noise(n: usize) -> Self {
        Self { labels: vec![ClusterLabel::Noise; n], n_clusters: 0 }
    }

    /// Builds an assignment from explicit member lists; unlisted rows are noise.
    pub fn from_groups(n: usize, groups: &[Vec<usize>]) -> Self {
        let mut labels = vec![ClusterLabel::Noise; n];
        for (k, g) in groups.iter().enumerate() {
            for &b in g {
                labels[b] = ClusterLabel::Cluster(k);
            }
        }
        Self { labels, n_clusters: groups.len() }
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == ClusterLabel::Cluster(cluster))
            .map(|(b, _)| b)
            .collect()
    }

    pub fn clusters(&self) -> Vec<Vec<usize>> {
        (0..self.n_clusters).map(|k| self.members(k)).collect()
    }

    pub fn noise(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == ClusterLabel::Noise)
            .map(|(b, _)| b)
            .collect()
    }

    pub fn clustered_count(&self) -> usize {
        self.labels.len() - self.noise().len()
    }
}

/// DBSCAN over a precomputed matrix. A point is core when at least `n_min`
/// points (itself included) lie within `eps_d`. Points are scanned by
/// ascending index; a border point joins the first cluster that reaches it.
pub fn dbscan(d: &DistanceMatrix, eps_d: f64, n_min: usize) -> ClusterAssignment {
    let n = d.n;
    let neighbours = |i: usize| (0..n).filter(move |&j| d.get(i, j) <= eps_d);
    let is_core: Vec<bool> = (0..n).map(|i| neighbours(i).count() >= n_min).collect();
    let mut labels: Vec<Option<ClusterLabel>> = vec![None; n];
    let mut n_clusters = 0;
    for i in 0..n {
        if labels[i].is_some() {
            continue;
        }
        if !is_core[i] {
            labels[i] = Some(ClusterLabel::Noise);
            continue;
        }
        let k = n_clusters;
        n_clusters += 1;
        labels[i] = Some(ClusterLabel::Cluster(k));
        let mut queue: VecDeque<usize> = VecDeque::from([i]);
        while let Some(p) = queue.pop_front() {
            for q in neighbours(p) {
                match labels[q] {
                    None => {
                        labels[q] = Some(ClusterLabel::Cluster(k));
                        if is_core[q] {
                            queue.push_back(q);
                        }
                    }
                    Some(ClusterLabel::Noise) => labels[q] = Some(ClusterLabel::Cluster(k)),
                    Some(ClusterLabel::Cluster(_)) => {}
                }
            }
        }
    }
    ClusterAssignment {
        labels: labels.into_iter().map(|l| l.unwrap_or(ClusterLabel::Noise)).collect(),
        n_clusters,
    }
}

/// `slice_id,bs_id,label` rows; noise is written as `noise`.
pub fn write_labels_csv<W: Write>(writer: W, rows: &[(usize, usize, ClusterLabel)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["slice_id", "bs_id", "label"])?;
    for (slice, bs, label) in rows {
        w.write_record([slice.to_string(), bs.to_string(), label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `row,col,distance` for every ordered pair.
pub fn write_matrix_csv<W: Write>(writer: W, ids: &[usize], d: &DistanceMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["row_bs", "col_bs", "distance"])?;
    for i in 0..d.n {
        for j in 0..d.n {
            w.write_record([ids[i].to_string(), ids[j].to_string(), d.get(i, j).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
