//! Synthetic users and traffic demand.
//!
//! Users hop between base-station sites following a density-weighted
//! exploration and preferential return walk; demand at a site is the Poisson
//! traffic of the users currently attached, shaped by a diurnal profile.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::domain::{BaseStation, DemandProfile, MobilityConfig, PeakHours};
use crate::error::Result;
use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq)]
pub struct UserTrajectory {
    pub user_id: usize,
    pub slice_id: usize,
    pub current: usize,
    /// (bs_id, interval_index) each time the user arrives somewhere.
    pub visits: Vec<(usize, u64)>,
    pub visit_counts: BTreeMap<usize, u64>,
}

impl UserTrajectory {
    pub fn new(user_id: usize, slice_id: usize, start_bs: usize, interval: u64) -> Self {
        let mut t = Self {
            user_id,
            slice_id,
            current: start_bs,
            visits: Vec::new(),
            visit_counts: BTreeMap::new(),
        };
        t.record_visit(start_bs, interval);
        t
    }

    pub fn record_visit(&mut self, bs_id: usize, interval: u64) {
        self.current = bs_id;
        self.visits.push((bs_id, interval));
        *self.visit_counts.entry(bs_id).or_insert(0) += 1;
    }

    pub fn is_consistent(&self) -> bool {
        let mut counts = BTreeMap::new();
        for (bs, _) in &self.visits {
            *counts.entry(*bs).or_insert(0u64) += 1;
        }
        counts == self.visit_counts && self.visits.windows(2).all(|w| w[0].1 <= w[1].1)
    }
}

/// Site positions and attractiveness the walkers move over.
#[derive(Debug, Clone)]
pub struct MobilitySpace {
    pub positions: Vec<[f64; 2]>,
    pub relevance: Vec<f64>,
}

impl MobilitySpace {
    pub fn from_stations(stations: &[BaseStation]) -> Self {
        Self {
            positions: stations.iter().map(|b| b.position).collect(),
            relevance: stations.iter().map(|b| b.relevance).collect(),
        }
    }

    fn sq_distance(&self, a: usize, b: usize) -> f64 {
        let (pa, pb) = (self.positions[a], self.positions[b]);
        (pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)
    }
}

/// Index drawn proportionally to `weights`; `None` when all are zero.
fn weighted_pick<R: Rng + ?Sized>(weights: &[(usize, f64)], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().map(|w| w.1).sum();
    if !(total > 0.0) {
        return None;
    }
    let mut x = rng.random::<f64>() * total;
    for &(id, w) in weights {
        if x < w {
            return Some(id);
        }
        x -= w;
    }
    weights.iter().rev().find(|w| w.1 > 0.0).map(|w| w.0)
}

/// Unvisited site drawn proportionally to relevance over squared distance
/// from the user's current site (distances floored at 1 m).
pub fn explore_target<R: Rng + ?Sized>(
    user: &UserTrajectory,
    space: &MobilitySpace,
    rng: &mut R,
) -> Option<usize> {
    let candidates: Vec<(usize, f64)> = (0..space.positions.len())
        .filter(|b| !user.visit_counts.contains_key(b))
        .map(|b| (b, space.relevance[b] / space.sq_distance(user.current, b).max(1.0)))
        .collect();
    weighted_pick(&candidates, rng)
}

/// Next site for `user`: explore with probability `p_new * S^-gamma` where
/// `S` is the number of distinct sites visited, else return to a visited
/// site proportionally to its visit count.
pub fn depr_step<R: Rng + ?Sized>(
    user: &UserTrajectory,
    space: &MobilitySpace,
    params: &MobilityConfig,
    rng: &mut R,
) -> usize {
    let distinct = user.visit_counts.len().max(1) as f64;
    let p_explore = params.p_new * distinct.powf(-params.gamma_epr);
    if rng.random::<f64>() < p_explore {
        if let Some(b) = explore_target(user, space, rng) {
            return b;
        }
    }
    let visited: Vec<(usize, f64)> = user
        .visit_counts
        .iter()
        .map(|(&b, &c)| (b, c as f64))
        .collect();
    weighted_pick(&visited, rng).unwrap_or(user.current)
}

/// RMS distance of visited positions from their visit-weighted centroid.
pub fn radius_of_gyration(traj: &UserTrajectory, positions: &[[f64; 2]]) -> f64 {
    let n: u64 = traj.visit_counts.values().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for (&b, &c) in &traj.visit_counts {
        cx += c as f64 * positions[b][0];
        cy += c as f64 * positions[b][1];
    }
    cx /= n;
    cy /= n;
    let ss: f64 = traj
        .visit_counts
        .iter()
        .map(|(&b, &c)| c as f64 * ((positions[b][0] - cx).powi(2) + (positions[b][1] - cy).powi(2)))
        .sum();
    (ss / n).sqrt()
}

/// Diurnal demand factor in [0.2, 1.0], 1.0 at `peak_hour`, 24 h periodic.
pub fn temporal_weight(interval_index: u64, interval_s: f64, peak_hour: f64) -> f64 {
    let hour = (interval_index as f64 * interval_s / 3600.0).rem_euclid(24.0);
    0.6 + 0.4 * (2.0 * std::f64::consts::PI * (hour - peak_hour) / 24.0).cos()
}

/// Bits offered in one interval by `n_users` users each drawing
/// Poisson(`per_user_mean_bits`), scaled by `weight`.
pub fn generate_demand<R: Rng + ?Sized>(
    n_users: u32,
    per_user_mean_bits: f64,
    weight: f64,
    rng: &mut R,
) -> u64 {
    if n_users == 0 || per_user_mean_bits <= 0.0 {
        return 0;
    }
    // A sum of independent Poissons is Poisson in the summed mean.
    let total_mean = f64::from(n_users) * per_user_mean_bits;
    let draw: f64 = Poisson::new(total_mean)
        .expect("Poisson mean is positive and finite")
        .sample(rng);
    (draw * weight).round().max(0.0) as u64
}

/// Walkers plus the demand parameters for every slice.
#[derive(Debug, Clone)]
pub struct MobilityModel {
    pub users: Vec<UserTrajectory>,
    pub space: MobilitySpace,
    pub params: MobilityConfig,
    pub profiles: Vec<DemandProfile>,
    pub peak_hours: PeakHours,
    pub per_user_mean_bits: Vec<f64>,
    pub interval_s: f64,
}

impl MobilityModel {
    /// Places `n_users` (round-robin over `n_slices`) at sites drawn by relevance.
    pub fn new(
        stations: &[BaseStation],
        n_users: usize,
        n_slices: usize,
        params: MobilityConfig,
        peak_hours: PeakHours,
        per_user_mean_bits: Vec<f64>,
        interval_s: f64,
        rng: &mut SimRng,
    ) -> Self {
        let space = MobilitySpace::from_stations(stations);
        let weights: Vec<(usize, f64)> = space.relevance.iter().copied().enumerate().collect();
        let users = (0..n_users)
            .map(|u| {
                let start = weighted_pick(&weights, rng).unwrap_or(0);
                UserTrajectory::new(u, u % n_slices.max(1), start, 0)
            })
            .collect();
        Self {
            users,
            space,
            params,
            profiles: stations.iter().map(|b| b.profile).collect(),
            peak_hours,
            per_user_mean_bits,
            interval_s,
        }
    }

    /// Moves every user that decides to hop in this interval.
    pub fn step(&mut self, interval: u64, rng: &mut SimRng) {
        for user in &mut self.users {
            if rng.random::<f64>() >= self.params.move_probability {
                continue;
            }
            let next = depr_step(user, &self.space, &self.params, rng);
            if next != user.current {
                user.record_visit(next, interval);
            }
        }
    }

    /// Attached users as `[bs][slice]`.
    pub fn counts(&self, n_slices: usize) -> Vec<Vec<u32>> {
        let mut out = vec![vec![0u32; n_slices]; self.space.positions.len()];
        for u in &self.users {
            out[u.current][u.slice_id] += 1;
        }
        out
    }

    pub fn weight(&self, bs: usize, interval: u64) -> f64 {
        temporal_weight(interval, self.interval_s, self.peak_hours.for_profile(self.profiles[bs]))
    }

    pub fn demand<R: Rng + ?Sized>(&self, bs: usize, slice: usize, n_users: u32, interval: u64, rng: &mut R) -> u64 {
        generate_demand(n_users, self.per_user_mean_bits[slice], self.weight(bs, interval), rng)
    }
}

/// Offered traffic of one slice at one base station, one sample per interval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemandSeries {
    pub slice_id: usize,
    pub bs_id: usize,
    pub samples: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DemandRow {
    interval_index: u64,
    bs_id: usize,
    slice_id: usize,
    bits: u64,
}

pub fn write_demand_csv<W: Write>(writer: W, series: &[DemandSeries]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in series {
        for (t, &bits) in s.samples.iter().enumerate() {
            w.serialize(DemandRow { interval_index: t as u64, bs_id: s.bs_id, slice_id: s.slice_id, bits })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Series keyed by (slice, bs), samples ordered by interval index.
pub fn read_demand_csv<R: Read>(reader: R) -> Result<Vec<DemandSeries>> {
    let mut rows: BTreeMap<(usize, usize), Vec<(u64, u64)>> = BTreeMap::new();
    for row in csv::Reader::from_reader(reader).deserialize() {
        let row: DemandRow = row?;
        rows.entry((row.slice_id, row.bs_id))
            .or_default()
            .push((row.interval_index, row.bits));
    }
    Ok(rows
        .into_iter()
        .map(|((slice_id, bs_id), mut v)| {
            v.sort_by_key(|r| r.0);
            DemandSeries { slice_id, bs_id, samples: v.into_iter().map(|r| r.1).collect() }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;

    fn space(positions: Vec<[f64; 2]>, relevance: Vec<f64>) -> MobilitySpace {
        MobilitySpace { positions, relevance }
    }

    #[test]
    fn single_site_always_returns_it() {
        let sp = space(vec![[0.0, 0.0]], vec![1.0]);
        let params = MobilityConfig { p_new: 1.0, gamma_epr: 0.0, move_probability: 1.0 };
        let user = UserTrajectory::new(0, 0, 0, 0);
        let mut rng = substream(1, "m");
        for _ in 0..100 {
            assert_eq!(depr_step(&user, &sp, &params, &mut rng), 0);
        }
    }

    #[test]
    fn no_exploration_keeps_user_home() {
        let sp = space(vec![[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]], vec![1.0; 3]);
        let params = MobilityConfig { p_new: 0.0, gamma_epr: 0.21, move_probability: 1.0 };
        let mut user = UserTrajectory::new(0, 0, 1, 0);
        let mut rng = substream(2, "m");
        for t in 1..500 {
            let next = depr_step(&user, &sp, &params, &mut rng);
            assert_eq!(next, 1);
            user.record_visit(next, t);
        }
    }

    #[test]
    fn exploration_follows_relevance() {
        // User at the origin; two unvisited sites at equal distance, 9:1 relevance.
        let sp = space(vec![[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]], vec![1.0, 9.0, 1.0]);
        let user = UserTrajectory::new(0, 0, 0, 0);
        let mut rng = substream(3, "m");
        let mut hits = [0u32; 3];
        for _ in 0..10_000 {
            hits[explore_target(&user, &sp, &mut rng).unwrap()] += 1;
        }
        assert_eq!(hits[0], 0);
        let ratio = f64::from(hits[1]) / f64::from(hits[2]);
        assert!((ratio - 9.0).abs() / 9.0 < 0.10, "ratio {ratio}");
    }

    #[test]
    fn exploration_prefers_nearby() {
        // Equal relevance, distances 100 and 300 -> 9:1 by inverse square.
        let sp = space(vec![[0.0, 0.0], [100.0, 0.0], [300.0, 0.0]], vec![1.0; 3]);
        let user = UserTrajectory::new(0, 0, 0, 0);
        let mut rng = substream(4, "m");
        let near = (0..10_000).filter(|_| explore_target(&user, &sp, &mut rng) == Some(1)).count();
        assert!((near as f64 / 10_000.0 - 0.9).abs() < 0.02);
    }

    #[test]
    fn fully_explored_user_returns() {
        let sp = space(vec![[0.0, 0.0], [10.0, 0.0]], vec![1.0, 1.0]);
        let params = MobilityConfig { p_new: 1.0, gamma_epr: 0.0, move_probability: 1.0 };
        let mut user = UserTrajectory::new(0, 0, 0, 0);
        user.record_visit(1, 1);
        let mut rng = substream(5, "m");
        for _ in 0..100 {
            assert!(depr_step(&user, &sp, &params, &mut rng) < 2);
        }
    }

    #[test]
    fn gyration_single_position_is_zero() {
        let user = UserTrajectory::new(0, 0, 0, 0);
        assert_eq!(radius_of_gyration(&user, &[[3.0, 4.0]]), 0.0);
    }

    #[test]
    fn gyration_two_points_equal_visits() {
        let mut user = UserTrajectory::new(0, 0, 0, 0);
        user.record_visit(1, 1);
        let r = radius_of_gyration(&user, &[[0.0, 0.0], [100.0, 0.0]]);
        assert!((r - 50.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn gyration_scales_and_translates(
            pts in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 2..6),
            visits in proptest::collection::vec(0usize..6, 1..20),
            c in 0.1f64..10.0,
            dx in -1e3f64..1e3,
            dy in -1e3f64..1e3,
        ) {
            let pos: Vec<[f64; 2]> = pts.iter().map(|p| [p.0, p.1]).collect();
            let mut user = UserTrajectory::new(0, 0, 0, 0);
            for (t, v) in visits.iter().enumerate() {
                user.record_visit(v % pos.len(), t as u64 + 1);
            }
            prop_assert!(user.is_consistent());
            let base = radius_of_gyration(&user, &pos);
            let scaled: Vec<[f64; 2]> = pos.iter().map(|p| [c * p[0], c * p[1]]).collect();
            let moved: Vec<[f64; 2]> = pos.iter().map(|p| [p[0] + dx, p[1] + dy]).collect();
            prop_assert!((radius_of_gyration(&user, &scaled) - c * base).abs() <= 1e-6 * (1.0 + c * base));
            prop_assert!((radius_of_gyration(&user, &moved) - base).abs() <= 1e-6 * (1.0 + base));
        }

        #[test]
        fn weight_is_bounded_and_daily_periodic(t in 0u64..100_000, peak in 0.0f64..24.0) {
            let w = temporal_weight(t, 60.0, peak);
            prop_assert!((0.2 - 1e-12..=1.0 + 1e-12).contains(&w));
            prop_assert!((w - temporal_weight(t + 1440, 60.0, peak)).abs() < 1e-9);
        }
    }

    #[test]
    fn weight_extremes() {
        // Interval 720 at 60 s is noon.
        assert!((temporal_weight(720, 60.0, 12.0) - 1.0).abs() < 1e-12);
        assert!((temporal_weight(0, 60.0, 12.0) - 0.2).abs() < 1e-12);
        assert_eq!(temporal_weight(0, 60.0, 5.0), temporal_weight(1440, 60.0, 5.0));
    }

    #[test]
    fn no_users_no_demand() {
        let mut rng = substream(6, "d");
        assert_eq!(generate_demand(0, 1e7, 1.0, &mut rng), 0);
    }

    #[test]
    fn demand_mean_follows_users_and_weight() {
        let mut rng = substream(7, "d");
        let (n, lambda, w) = (20u32, 50.0, 0.7);
        let mean = (0..10_000).map(|_| generate_demand(n, lambda, w, &mut rng) as f64).sum::<f64>() / 10_000.0;
        let expected = f64::from(n) * lambda * w;
        assert!((mean - expected).abs() / expected < 0.03, "{mean} vs {expected}");
    }

    #[test]
    fn users_are_conserved_and_reproducible() {
        let cfg = crate::domain::ScenarioConfig::multi_bs(6, 300, 9);
        let build = || {
            let mut rng = substream(9, "mobility");
            let mut m = MobilityModel::new(
                &cfg.base_stations, 300, 3, MobilityConfig { move_probability: 0.5, ..Default::default() },
                PeakHours::default(), vec![1.0; 3], 60.0, &mut rng,
            );
            let mut trace = Vec::new();
            for t in 1..200 {
                m.step(t, &mut rng);
                let c = m.counts(3);
                assert_eq!(c.iter().flatten().map(|&x| x as usize).sum::<usize>(), 300);
                trace.push(c);
            }
            assert!(m.users.iter().all(|u| u.is_consistent()));
            trace
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn demand_csv_round_trip() {
        let series = vec![
            DemandSeries { slice_id: 0, bs_id: 0, samples: vec![1, 2, 3] },
            DemandSeries { slice_id: 0, bs_id: 1, samples: vec![4, 5, 6] },
            DemandSeries { slice_id: 1, bs_id: 0, samples: vec![7, 8, 9] },
        ];
        let mut buf = Vec::new();
        write_demand_csv(&mut buf, &series).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("interval_index,bs_id,slice_id,bits\n"));
        assert_eq!(read_demand_csv(buf.as_slice()).unwrap(), series);
    }
}
