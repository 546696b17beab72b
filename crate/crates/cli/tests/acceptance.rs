//! Acceptance suite: one pass/fail line per criterion. Runs without the
//! libtest harness so the lines are always printed.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng as _;

use dualrec::autodiff::Tensor;
use dualrec::eval::{evaluate, heldout_tpp_nll, metrics, rank_from_scores};
use dualrec::graphs::{spmm, SliceGraph};
use dualrec::rng::{stream, Purpose};
use dualrec::synthetic::Pattern;
use dualrec::tpp::TppParams;
use dualrec_cli::commands::{cmd_gradcheck, cmd_train, fit, init_model, Prepared, LOG_FILE, OPTIMIZER_FILE, PARAMS_FILE};
use dualrec_cli::variants::expand;
use dualrec_cli::RunConfig;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn within(limit: Duration, started: Instant) -> (bool, String) {
    let t = started.elapsed();
    (t < limit, format!("{:.1}s of {:.0}s", t.as_secs_f64(), limit.as_secs_f64()))
}

fn scratch_config(out: &std::path::Path) -> RunConfig {
    RunConfig { synthetic: Some(Pattern::Planted), out_dir: out.to_path_buf(), ..Default::default() }
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { dim: 4, layers: 2, beta: 0.01, ..scratch_config(dir.path()) };
    let report = match cmd_gradcheck(&cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    for line in report.lines() {
        println!("    {line}");
    }
    let all_checked = report.groups.iter().all(|g| g.status == dualrec::gradcheck::Status::Pass);
    let worst = report.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    let (fast, time) = within(Duration::from_secs(30), started);
    outcome(report.passed && all_checked && fast, format!("max rel err {worst:.2e} over {} groups; {time}", report.groups.len()))
}

/// `D^{-1/2} A D^{-1/2} X` with dense loops over the global edge list.
fn dense_propagation(users: &[usize], items: &[usize], pairs: &[(usize, usize)], x: &Tensor) -> Vec<f64> {
    let mu = users.len();
    let n = mu + items.len();
    let mut a = vec![vec![0.0; n]; n];
    for &(u, i) in pairs {
        let r = users.iter().position(|&v| v == u).unwrap();
        let c = mu + items.iter().position(|&v| v == i).unwrap();
        a[r][c] = 1.0;
        a[c][r] = 1.0;
    }
    let deg: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
    let mut out = vec![0.0; n * x.cols()];
    for r in 0..n {
        for c in 0..n {
            if a[r][c] != 0.0 {
                let w = 1.0 / (deg[r].sqrt() * deg[c].sqrt());
                for k in 0..x.cols() {
                    out[r * x.cols() + k] += w * x.get(c, k);
                }
            }
        }
    }
    out
}

fn propagation_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = stream(2, Purpose::Synthetic);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let nu = rng.gen_range(1..=32);
        let ni = rng.gen_range(1..=64 - nu);
        let density = rng.gen_range(0.05..0.6);
        let mut pairs: Vec<(usize, usize)> = (0..nu).flat_map(|u| (0..ni).map(move |i| (u, i))).filter(|_| rng.gen_bool(density)).collect();
        if pairs.is_empty() {
            pairs.push((0, 0));
        }
        // Duplicates collapse to one edge.
        pairs.push(pairs[0]);
        let g = SliceGraph::from_pairs(0, pairs.iter().copied());
        let d = rng.gen_range(1..=8);
        let x = Tensor::from_vec(g.num_nodes(), d, (0..g.num_nodes() * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let got = spmm(&g, &x).unwrap();
        let want = dense_propagation(&g.active_users, &g.active_items, &pairs, &x);
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    let (fast, time) = within(Duration::from_secs(10), started);
    outcome(worst <= 1e-12 && fast, format!("200 graphs, max abs diff {worst:.1e}; {time}"))
}

/// Composite Simpson over `[0, T]`, where `T` doubles until the density has
/// underflowed to zero.
fn total_mass(p: &TppParams, h: &[f64]) -> f64 {
    let f = |t: f64| p.log_density(h, 0.0, t).unwrap().exp();
    let mut upper = 1.0;
    while f(upper) > 0.0 {
        upper *= 2.0;
    }
    let n = 400_000;
    let step = upper / n as f64;
    let mut sum = f(0.0) + f(upper);
    for k in 1..n {
        sum += f(k as f64 * step) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * step / 3.0
}

fn tpp_normalisation() -> Outcome {
    let mut rng = stream(3, Purpose::Synthetic);
    let (mut lo, mut hi, mut zero_gap): (f64, f64, f64) = (f64::INFINITY, 0.0, 0.0);
    for _ in 0..50 {
        let d = 4;
        let h: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = rng.gen_range(-1.0..1.0);
        for omega in [0.1, 0.5, 1.0, 2.0] {
            let p = TppParams { w: w.clone(), omega, b };
            let mass = total_mass(&p, &h);
            lo = lo.min(mass);
            hi = hi.max(mass);
            let wh: f64 = w.iter().zip(&h).map(|(a, c)| a * c).sum::<f64>() + b;
            zero_gap = zero_gap.max((p.log_density(&h, 5.0, 5.0).unwrap() - wh).abs());
        }
    }
    let ok = (0.999..=1.001).contains(&lo) && (0.999..=1.001).contains(&hi) && zero_gap <= 1e-12;
    outcome(ok, format!("mass in [{lo:.6}, {hi:.6}]; zero-gap error {zero_gap:.1e}"))
}

/// Sorts all 101 candidates by descending score, the positive placed after
/// any negative it ties with, and reads off its position.
fn sorted_rank(pos: f64, negs: &[f64]) -> usize {
    let mut all: Vec<(f64, bool)> = negs.iter().map(|&s| (s, false)).collect();
    all.push((pos, true));
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    all.iter().position(|c| c.1).unwrap() + 1
}

fn metric_oracle() -> Outcome {
    let mut rng = stream(4, Purpose::Eval);
    let mut mismatches = 0;
    let mut ranks = Vec::new();
    let mut oracle = Vec::new();
    for case in 0..1000 {
        // Coarse grids force ties in a third of the vectors.
        let coarse = case % 3 == 0;
        let mut draw = || if coarse { rng.gen_range(0..8) as f64 / 8.0 } else { rng.gen::<f64>() };
        let pos = draw();
        let negs: Vec<f64> = (0..100).map(|_| draw()).collect();
        let r = rank_from_scores(pos, &negs);
        let want = sorted_rank(pos, &negs);
        let m = metrics(&[r], 10).unwrap();
        let (hr, ndcg) = if want <= 10 { (1.0, 1.0 / ((want + 1) as f64).log2()) } else { (0.0, 0.0) };
        if r != want || m.hr != hr || m.ndcg != ndcg || m.mrr != 1.0 / want as f64 {
            mismatches += 1;
        }
        ranks.push(r);
        oracle.push((hr, ndcg, 1.0 / want as f64));
    }
    let agg = metrics(&ranks, 10).unwrap();
    let n = oracle.len() as f64;
    let sums = oracle.iter().fold((0.0, 0.0, 0.0), |a, o| (a.0 + o.0, a.1 + o.1, a.2 + o.2));
    let agg_ok = agg.hr == sums.0 / n && agg.ndcg == sums.1 / n && agg.mrr == sums.2 / n;
    let one = metrics(&[1], 10).unwrap();
    let eleven = metrics(&[11], 10).unwrap();
    let fixed = (one.hr, one.ndcg, one.mrr) == (1.0, 1.0, 1.0) && (eleven.hr, eleven.ndcg, eleven.mrr) == (0.0, 0.0, 1.0 / 11.0);
    outcome(mismatches == 0 && agg_ok && fixed, format!("{mismatches} mismatches in 1000 vectors; aggregate exact: {agg_ok}; fixed cases: {fixed}"))
}

fn planted_learning() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { learning_rate: 5e-3, patience: 10, ..scratch_config(dir.path()) };
    let prep = Prepared::load(&cfg).unwrap();
    let test = prep.data.split().test_slice();
    let untrained = evaluate(&init_model(&cfg, &prep).unwrap(), &prep.data, &prep.graphs, test, 10, cfg.seed).unwrap();
    let null = 10.0 / 101.0;
    let sigma = (null * (1.0 - null) / untrained.num_cases as f64).sqrt();
    let near_null = (untrained.hr_at_k - null).abs() <= 3.0 * sigma;
    let trained = match fit(&cfg, &prep, &mut std::io::sink(), None) {
        Ok(o) => o,
        Err(e) => return outcome(false, e.to_string()),
    };
    let report = evaluate(&trained.model, &prep.data, &prep.graphs, test, 10, cfg.seed).unwrap();
    let (fast, time) = within(Duration::from_secs(300), started);
    outcome(
        report.hr_at_k >= 0.60 && near_null && fast,
        format!(
            "trained HR@10 {:.3} (need >= 0.60); untrained {:.3} vs null {null:.3} +/- {:.3}; {time}",
            report.hr_at_k,
            untrained.hr_at_k,
            3.0 * sigma
        ),
    )
}

fn dynamics_ablation() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut gaps = Vec::new();
    let (mut full_sum, mut last_sum) = (0.0, 0.0);
    for seed in 0..5 {
        let base = RunConfig {
            synthetic: Some(Pattern::Returning),
            synthetic_users: 200,
            slices: 8,
            learning_rate: 5e-3,
            patience: 20,
            seed,
            ..scratch_config(dir.path())
        };
        let prep = Prepared::load(&base).unwrap();
        let test = prep.data.split().test_slice();
        let mut ndcg = Vec::new();
        for (_, cfg) in expand(&base, &["full".into(), "last_graph".into()]).unwrap() {
            let o = match fit(&cfg, &prep, &mut std::io::sink(), None) {
                Ok(o) => o,
                Err(e) => return outcome(false, e.to_string()),
            };
            ndcg.push(evaluate(&o.model, &prep.data, &prep.graphs, test, 10, seed).unwrap().ndcg_at_k);
        }
        full_sum += ndcg[0];
        last_sum += ndcg[1];
        gaps.push(format!("{:.3}/{:.3}", ndcg[0], ndcg[1]));
    }
    let (full, last) = (full_sum / 5.0, last_sum / 5.0);
    outcome(full - last >= 0.05, format!("mean NDCG@10 full {full:.3} vs last graph {last:.3} (gap {:.3}); per seed {}", full - last, gaps.join(" ")))
}

fn auxiliary_effect() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let seeds = 5;
    // (validation NLL, test NDCG@10) sums for beta = 0 and beta = 1e-3.
    let mut sums = [(0.0, 0.0); 2];
    for seed in 0..seeds {
        let base = RunConfig { synthetic_regular_gaps: true, learning_rate: 5e-3, patience: 20, seed, ..scratch_config(dir.path()) };
        let prep = Prepared::load(&base).unwrap();
        let sp = prep.data.split();
        for (k, beta) in [0.0, 1e-3].into_iter().enumerate() {
            let cfg = RunConfig { beta, ..base.clone() };
            let o = match fit(&cfg, &prep, &mut std::io::sink(), None) {
                Ok(o) => o,
                Err(e) => return outcome(false, e.to_string()),
            };
            let (nll, _) = heldout_tpp_nll(&o.model, &prep.events, &prep.graphs, sp.valid_slice()).unwrap();
            let report = evaluate(&o.model, &prep.data, &prep.graphs, sp.test_slice(), 10, seed).unwrap();
            sums[k].0 += nll;
            sums[k].1 += report.ndcg_at_k;
        }
    }
    let n = seeds as f64;
    let (nll0, ndcg0) = (sums[0].0 / n, sums[0].1 / n);
    let (nll1, ndcg1) = (sums[1].0 / n, sums[1].1 / n);
    outcome(
        nll1 < nll0 && ndcg1 >= ndcg0 - 0.01,
        format!("validation TPP NLL {nll1:.4} vs {nll0:.4} without; test NDCG@10 {ndcg1:.4} vs {ndcg0:.4} (mean of {seeds} seeds)"),
    )
}

fn strip_timing(log: &str) -> Vec<serde_json::Value> {
    log.lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("seconds");
            v
        })
        .collect()
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<_> = dirs
        .iter()
        .map(|d| {
            let cfg = RunConfig { max_epochs: 4, seed: 11, dropout: 0.2, ..scratch_config(d.path()) };
            cmd_train(&cfg).unwrap().run_dir
        })
        .collect();
    let read = |k: usize, f: &str| std::fs::read(runs[k].join(f)).unwrap();
    let logs_equal = strip_timing(&String::from_utf8(read(0, LOG_FILE)).unwrap()) == strip_timing(&String::from_utf8(read(1, LOG_FILE)).unwrap());
    let params_equal = read(0, PARAMS_FILE) == read(1, PARAMS_FILE);
    let optimizer_equal = read(0, OPTIMIZER_FILE) == read(1, OPTIMIZER_FILE);
    let epochs = strip_timing(&String::from_utf8(read(0, LOG_FILE)).unwrap()).len();
    outcome(
        logs_equal && params_equal && optimizer_equal && epochs == 4,
        format!("{epochs} epochs; log equal: {logs_equal}; params.bin equal: {params_equal}; optimizer.bin equal: {optimizer_equal}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 gradient correctness", gradient_correctness),
        ("2 propagation oracle", propagation_oracle),
        ("3 tpp normalisation", tpp_normalisation),
        ("4 metric oracle", metric_oracle),
        ("5 planted learning", planted_learning),
        ("6 dynamics ablation", dynamics_ablation),
        ("7 auxiliary task effect", auxiliary_effect),
        ("8 determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        failed += usize::from(!o.passed);
        println!("[{}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
