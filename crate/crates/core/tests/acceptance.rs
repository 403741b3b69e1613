//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use fedslice_core::agent::{compute_reward, gap_bounds, reward_from_gap};
use fedslice_core::clustering::{dbscan, dtw, ClusterAssignment, ClusterLabel, DistanceMatrix};
use fedslice_core::domain::{Algorithm, RewardMode, ScenarioConfig};
use fedslice_core::env::gamma;
use fedslice_core::federation::{
    account_overhead, fed_average, fed_full_cluster, FederationRound, FullClusterMode, StrategyKind, Upload,
};
use fedslice_core::neural::{backward, forward, init_params, ModelParams};
use fedslice_core::rng::substream;
use fedslice_core::{run_simulation, run_simulation_with, SimulationMetrics, StrategyRegistry};
use rand::Rng;

const Q_NET: [usize; 4] = [3, 24, 24, 11];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn desk_config(seed: u64) -> ScenarioConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let mut cfg = ScenarioConfig::load(&path).expect("configs/desk.toml");
    cfg.rng_seed = seed;
    cfg.expand_layout();
    cfg
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn reward_analytics() -> Outcome {
    let mut rng = substream(11, "acceptance-reward");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let snr = rng.random_range(-10.0..40.0);
        let chunk = rng.random_range(1..=25u32);
        let interval = 60.0;
        let (lo, up) = gap_bounds(snr, chunk, interval);
        let r = |alpha: f64| reward_from_gap(alpha, lo, up, RewardMode::Normalized);
        let k = rng.random_range(0..=10u32) * chunk;
        let exact_fit = compute_reward(k, snr, gamma(k, snr) * interval, chunk, interval, RewardMode::Normalized);
        for (got, want) in [(r(0.0), 0.0), (r(up / 2.0), 0.25), (r(2.0 * up), -1.0), (exact_fit, 0.0)] {
            worst = worst.max((got - want).abs());
        }
    }
    Outcome::new(worst <= 1e-12, format!("100 draws, max deviation {worst:e}"))
}

/// Hidden pre-activations under the documented layout (weights `[out][in]`, then biases).
fn hidden_preactivations(p: &ModelParams, x: &[f64]) -> Vec<f64> {
    let mut z_all = Vec::new();
    let mut act = x.to_vec();
    let mut off = 0;
    let layers = p.layer_sizes.len() - 1;
    for (l, w) in p.layer_sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bias = off + fan_in * fan_out;
        let z: Vec<f64> = (0..fan_out)
            .map(|o| p.values[bias + o] + (0..fan_in).map(|i| p.values[off + o * fan_in + i] * act[i]).sum::<f64>())
            .collect();
        off = bias + fan_out;
        if l + 1 < layers {
            z_all.extend_from_slice(&z);
            act = z.iter().map(|v| v.max(0.0)).collect();
        }
    }
    z_all
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = substream(12, "acceptance-gradient");
    let h = 1e-6;
    let mut fixtures = 0;
    let mut redrawn = 0;
    let mut worst = 0.0f64;
    let mut failures = 0;
    while fixtures < 50 {
        let mut p = init_params(&Q_NET, &mut rng);
        for v in p.values.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..2.0)).collect();
        if hidden_preactivations(&p, &x).iter().any(|z| z.abs() < 1e-3) {
            redrawn += 1;
            continue;
        }
        fixtures += 1;
        let action = rng.random_range(0..11);
        let y = rng.random_range(-3.0..3.0);
        let loss = |q: &ModelParams| (y - forward(q, &x).unwrap()[action]).powi(2);
        let g = backward(&p, &x, action, y).unwrap();
        for k in 0..p.len() {
            let mut plus = p.clone();
            plus.values[k] += h;
            let mut minus = p.clone();
            minus.values[k] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let err = (g[k] - fd).abs();
            let scale = g[k].abs().max(fd.abs());
            if err > 1e-4 * scale + 1e-8 {
                failures += 1;
            }
            if scale > 1e-6 {
                worst = worst.max(err / scale);
            }
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        failures == 0 && elapsed < Duration::from_secs(10),
        format!(
            "50 fixtures x 971 params, {failures} mismatches, worst relative {worst:.1e}, {redrawn} kink fixtures redrawn, {}",
            secs(elapsed)
        ),
    )
}

/// Minimum over every monotone warping path inside the band, summed in path order.
fn dtw_brute(a: &[f64], b: &[f64], window: usize) -> f64 {
    let (n, m) = (a.len(), b.len());
    let band = if window == 0 { usize::MAX } else { window.max(n.abs_diff(m)) };
    fn walk(a: &[f64], b: &[f64], band: usize, i: usize, j: usize, acc: f64, best: &mut f64) {
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(acc);
            return;
        }
        for (ni, nj) in [(i + 1, j), (i, j + 1), (i + 1, j + 1)] {
            if ni < a.len() && nj < b.len() && ni.abs_diff(nj) <= band {
                walk(a, b, band, ni, nj, acc + (a[ni] - b[nj]).abs(), best);
            }
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, band, 0, 0, (a[0] - b[0]).abs(), &mut best);
    best / (n + m) as f64
}

fn dtw_oracle() -> Outcome {
    let mut rng = substream(13, "acceptance-dtw");
    let mut mismatches = 0;
    let mut banded = 0;
    for _ in 0..500 {
        let a: Vec<f64> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(0.0..1.0)).collect();
        let window = rng.random_range(0..=4);
        if window > 0 {
            banded += 1;
        }
        if dtw(&a, &b, window) != dtw_brute(&a, &b, window) || dtw(&b, &a, window) != dtw_brute(&b, &a, window) {
            mismatches += 1;
        }
    }
    Outcome::new(mismatches == 0, format!("500 cases ({banded} banded), {mismatches} mismatches"))
}

/// Cores joined into connected components numbered by their lowest member;
/// a border point takes the lowest-numbered component among its core neighbours.
fn dbscan_naive(d: &DistanceMatrix, eps: f64, n_min: usize) -> ClusterAssignment {
    let n = d.n;
    let near = |i: usize, j: usize| d.get(i, j) <= eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= n_min).collect();
    let mut comp: Vec<Option<usize>> = vec![None; n];
    let mut count = 0;
    for s in 0..n {
        if !core[s] || comp[s].is_some() {
            continue;
        }
        let mut stack = vec![s];
        comp[s] = Some(count);
        while let Some(p) = stack.pop() {
            for q in 0..n {
                if core[q] && comp[q].is_none() && near(p, q) {
                    comp[q] = Some(count);
                    stack.push(q);
                }
            }
        }
        count += 1;
    }
    let labels = (0..n)
        .map(|i| {
            if core[i] {
                return ClusterLabel::Cluster(comp[i].unwrap());
            }
            (0..n)
                .filter(|&j| core[j] && near(i, j))
                .filter_map(|j| comp[j])
                .min()
                .map_or(ClusterLabel::Noise, ClusterLabel::Cluster)
        })
        .collect();
    ClusterAssignment { labels, n_clusters: count }
}

fn dbscan_oracle() -> Outcome {
    let mut rng = substream(14, "acceptance-dbscan");
    let mut mismatches = 0;
    let (mut noise, mut clusters) = (0, 0);
    for case in 0..200 {
        let n = rng.random_range(1..=30);
        let d = if case % 2 == 0 {
            let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
            DistanceMatrix::from_fn(n, |i, j| ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt())
        } else {
            let raw: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
            DistanceMatrix::from_fn(n, |i, j| raw[i * n + j])
        };
        let eps = rng.random_range(0.05..0.35);
        let n_min = rng.random_range(1..=5);
        let got = dbscan(&d, eps, n_min);
        let want = dbscan_naive(&d, eps, n_min);
        if got != want {
            mismatches += 1;
        }
        noise += want.noise().len();
        clusters += want.n_clusters;
    }
    Outcome::new(
        mismatches == 0,
        format!("200 matrices, {mismatches} mismatches ({clusters} clusters, {noise} noise points in total)"),
    )
}

/// A 1-1 network: one weight and one bias.
fn params(values: &[f64; 2]) -> ModelParams {
    ModelParams { layer_sizes: vec![1, 1], values: values.to_vec() }
}

/// Uplink ordering over one recorded round per strategy, skipping
/// representative rounds that fell back to a global average.
fn uplink_ordered(rep: usize, fc: usize, fdrl: usize) -> bool {
    rep <= fc && fc <= fdrl
}

fn aggregation_algebra() -> Outcome {
    let mut notes = Vec::new();
    let mut rng = substream(15, "acceptance-fed");
    let theta = init_params(&Q_NET, &mut rng);
    let neg = ModelParams { layer_sizes: theta.layer_sizes.clone(), values: theta.values.iter().map(|v| -v).collect() };
    let idem = fed_average(&[&theta, &theta]).unwrap() == theta && fed_average(&[&theta; 5]).unwrap() == theta;
    let sym = fed_average(&[&theta, &neg]).unwrap().values.iter().all(|v| *v == 0.0);
    let (a, b, c) = (params(&[1.0, 2.0]), params(&[3.0, 4.0]), params(&[5.0, 6.0]));
    let hand = fed_average(&[&a, &b, &c]).unwrap().values == vec![3.0, 4.0];
    notes.push(format!("average idempotent {idem}, symmetric {sym}, (3,4) {hand}"));

    let round = FederationRound {
        slice_id: 0,
        episode_index: 4,
        uploads: BTreeMap::from([
            (0, Upload { params: params(&[0.0, 0.0]), reward: 1.0 }),
            (1, Upload { params: params(&[4.0, 8.0]), reward: 3.0 }),
        ]),
        clusters: ClusterAssignment::from_groups(2, &[vec![0, 1]]),
    };
    let fc = fed_full_cluster(&round, FullClusterMode::Normalized).unwrap();
    let weighted = fc.get(&0).map(|m| m.values.clone()) == Some(vec![3.0, 6.0]);
    notes.push(format!("full-cluster (3,6) {weighted}"));

    let mut cfg = ScenarioConfig::multi_bs(20, 1250, 21);
    cfg.total_episodes = 40;
    cfg.clustering.lookback_intervals = 200;
    let registry = StrategyRegistry::builtin();
    let runs: Vec<SimulationMetrics> = ["best-rep", "full-cluster", "fdrl"]
        .iter()
        .map(|s| run_simulation_with(&cfg, registry.get(s).unwrap()).unwrap())
        .collect();
    let model_bytes = 27 + 4 * 971;
    let mut rounds = 0;
    let mut per_round_ok = true;
    for summary in &runs[1].clusters {
        let assignment = ClusterAssignment { labels: summary.labels.clone(), n_clusters: summary.n_clusters };
        let up = |k| account_overhead(k, &assignment, 20, model_bytes).uplink_models;
        let rep = account_overhead(StrategyKind::Representative, &assignment, 20, model_bytes);
        if !rep.fallback {
            per_round_ok &= uplink_ordered(rep.uplink_models, up(StrategyKind::FullCluster), up(StrategyKind::Fdrl));
        }
        rounds += 1;
    }
    let same_clusters = runs[0].clusters == runs[1].clusters;
    let rounds_expected = cfg.total_episodes / cfg.federation_period_episodes;
    let mut recorded_ok = runs.iter().all(|r| r.overhead.len() == rounds_expected);
    let mut fallbacks = 0;
    for ((rep, fc), fdrl) in runs[0].overhead.iter().zip(&runs[1].overhead).zip(&runs[2].overhead) {
        if rep.fallback {
            fallbacks += 1;
            continue;
        }
        recorded_ok &= uplink_ordered(rep.uplink_bytes as usize, fc.uplink_bytes as usize, fdrl.uplink_bytes as usize);
        recorded_ok &= uplink_ordered(rep.uplink_models, fc.uplink_models, fdrl.uplink_models);
    }
    notes.push(format!(
        "20-BS run: {rounds} slice rounds ordered {per_round_ok}, recorded episodes ordered {recorded_ok} ({fallbacks} fallback), identical clusterings {same_clusters}"
    ));
    Outcome::new(
        idem && sym && hand && weighted && rounds > 0 && per_round_ok && recorded_ok && same_clusters,
        notes.join("; "),
    )
}

fn overhead_accounting() -> Outcome {
    let groups: Vec<Vec<usize>> = (0..3).map(|k| (k * 15..(k + 1) * 15).collect()).collect();
    let planted = ClusterAssignment::from_groups(50, &groups);
    let counts: Vec<(usize, usize)> = [StrategyKind::Fdrl, StrategyKind::FullCluster, StrategyKind::Representative]
        .into_iter()
        .map(|k| {
            let r = account_overhead(k, &planted, 50, 1);
            (r.uplink_models, r.downlink_models)
        })
        .collect();
    let bytes = account_overhead(StrategyKind::Representative, &planted, 50, 3911);
    let pass = counts == [(50, 50), (45, 45), (3, 50)] && bytes.uplink_bytes == 3 * 3911 && bytes.downlink_bytes == 50 * 3911;
    Outcome::new(pass, format!("(uplink, downlink) FDRL {:?}, FC {:?}, Rep {:?}", counts[0], counts[1], counts[2]))
}

fn determinism() -> Outcome {
    let mut cfg = ScenarioConfig::multi_bs(4, 240, 5);
    cfg.total_episodes = 30;
    cfg.clustering.lookback_intervals = 60;
    let csv = |c: &ScenarioConfig| {
        let mut buf = Vec::new();
        run_simulation(c).unwrap().write_metrics_csv(&mut buf).unwrap();
        buf
    };
    let (a, b) = (csv(&cfg), csv(&cfg));
    cfg.rng_seed += 1;
    let other = csv(&cfg);
    Outcome::new(
        a == b && a != other,
        format!("{} bytes, reruns identical {}, next seed differs {}", a.len(), a == b, a != other),
    )
}

fn last_fifth_reward(m: &SimulationMetrics) -> f64 {
    m.window_mean(None, 0.8, 1.0, |r| r.mean_reward)
}

fn learning_trend() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in 1..=3u64 {
        let run = |alg| {
            let mut cfg = ScenarioConfig::single_bs(seed);
            cfg.learning.algorithm = alg;
            last_fifth_reward(&run_simulation(&cfg).unwrap())
        };
        let (ddqn, dqn, random) = (run(Algorithm::Ddqn), run(Algorithm::Dqn), run(Algorithm::Random));
        let beats_random = ddqn - random >= 0.5 * random.abs();
        let beats_dqn = ddqn > dqn;
        if beats_random && beats_dqn {
            wins += 1;
        }
        notes.push(format!("seed {seed}: ddqn {ddqn:.3} dqn {dqn:.3} random {random:.3}"));
    }
    let elapsed = start.elapsed();
    Outcome::new(
        wins >= 2 && elapsed < Duration::from_secs(300),
        format!("{wins}/3 seeds; {}; {}", notes.join(", "), secs(elapsed)),
    )
}

struct DeskRun {
    seed: u64,
    metrics: SimulationMetrics,
    elapsed: Duration,
    expected_intervals: u64,
}

fn desk_runs() -> Vec<DeskRun> {
    (1..=3u64)
        .map(|seed| {
            let cfg = desk_config(seed);
            let start = Instant::now();
            let metrics = run_simulation(&cfg).unwrap();
            DeskRun { seed, metrics, elapsed: start.elapsed(), expected_intervals: cfg.total_intervals() }
        })
        .collect()
}

fn capacity_invariant(runs: &[DeskRun]) -> Outcome {
    let r = &runs[0];
    let m = &r.metrics;
    let pass = m.intervals_run == r.expected_intervals
        && m.overhead.len() == 200
        && runs.iter().all(|r| r.metrics.capacity_violations == 0 && r.metrics.conservation_failures == 0)
        && r.elapsed < Duration::from_secs(600);
    Outcome::new(
        pass,
        format!(
            "seed {}: {} intervals x 8 BS, {} federation episodes, {} capacity violations, {} conservation failures, {}; all seeds clean {}",
            r.seed,
            m.intervals_run,
            m.overhead.len(),
            m.capacity_violations,
            m.conservation_failures,
            secs(r.elapsed),
            runs.iter().all(|r| r.metrics.capacity_violations == 0 && r.metrics.conservation_failures == 0)
        ),
    )
}

fn dropped_traffic_trend(runs: &[DeskRun]) -> Outcome {
    let mut wins = 0;
    let mut notes = Vec::new();
    for r in runs {
        let m = &r.metrics;
        let drop = |slice, from, to| m.window_mean(Some(slice), from, to, |row| row.dropped_fraction);
        let first: Vec<f64> = (0..3).map(|s| drop(s, 0.0, 0.2)).collect();
        let last: Vec<f64> = (0..3).map(|s| drop(s, 0.8, 1.0)).collect();
        let falling = first.iter().zip(&last).all(|(f, l)| l < f);
        let urllc_below_embb = last[0] < last[1];
        if falling && urllc_below_embb {
            wins += 1;
        }
        let per_slice: Vec<String> = (0..3)
            .map(|s| format!("{} {:.2}%->{:.2}%", m.slice_names[s], 100.0 * first[s], 100.0 * last[s]))
            .collect();
        notes.push(format!("seed {}: {}", r.seed, per_slice.join(" ")));
    }
    Outcome::new(wins >= 2, format!("{wins}/3 seeds; {}", notes.join("; ")))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let start = Instant::now();
    let desk = catch_unwind(desk_runs).ok();
    let on_desk = |f: fn(&[DeskRun]) -> Outcome| match &desk {
        Some(runs) => guarded(|| f(runs)),
        None => Outcome::new(false, "desk-scale run panicked"),
    };

    let results = [
        ("reward analytics", guarded(reward_analytics)),
        ("gradient oracle", guarded(gradient_oracle)),
        ("dtw oracle", guarded(dtw_oracle)),
        ("dbscan oracle", guarded(dbscan_oracle)),
        ("aggregation algebra", guarded(aggregation_algebra)),
        ("capacity invariant", on_desk(capacity_invariant)),
        ("learning trend", guarded(learning_trend)),
        ("dropped-traffic trend", on_desk(dropped_traffic_trend)),
        ("overhead accounting", guarded(overhead_accounting)),
        ("determinism", guarded(determinism)),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed in {}", results.len() - failed, results.len(), secs(start.elapsed()));
    if failed > 0 {
        std::process::exit(1);
    }
}
