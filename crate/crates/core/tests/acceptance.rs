//! Acceptance suite. Runs every criterion, prints one PASS/FAIL/SKIP line per
//! criterion and exits non-zero if any criterion fails.
//!
//! Criterion 13 needs a local copy of the Shuttle data: set
//! `FEDTHRESH_SHUTTLE_CSV` to a headered CSV whose `FEDTHRESH_SHUTTLE_LABEL`
//! column (default `y`) holds 1 for anomalies.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use fedthresh::config::ScenarioConfig;
use fedthresh::data::{PartitionScheme, SynthSpec};
use fedthresh::error_stats::{aggregate, overlap_region, summarize, ClassSummaries, ErrorSummary, FormulaMode, GlobalSummary};
use fedthresh::federation::MessageKind;
use fedthresh::harness::{run_scenario, sweep_clients, sweep_corruption, ScenarioOutput};
use fedthresh::metrics::{f1_curve, Confusion, F1Aggregation};
use fedthresh::ndarray::Array2;
use fedthresh::nn::ModelParams;
use fedthresh::report::{emit_report, results_csv};
use fedthresh::thresholds::{local_minmax, our_method, MethodTag};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Outcome = Verdict;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

// ---------------------------------------------------------------- 1

fn criterion_pooled_moments() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = [0.0f64; 4];
    let mut worst_paper = [0.0f64; 2];
    for _ in 0..500 {
        let len = rng.random_range(3..=10_000usize);
        let clients = rng.random_range(1..=20usize).min(len);
        let sigma = rng.random_range(0.2..1.5);
        let dist = LogNormal::new(rng.random_range(-4.0..0.0), sigma).unwrap();
        let errors: Vec<f64> = (0..len).map(|_| dist.sample(&mut rng)).collect();

        // random cut points, every client non-empty
        let mut cuts: Vec<usize> = Vec::new();
        while cuts.len() < clients - 1 {
            let c = rng.random_range(1..len);
            if !cuts.contains(&c) {
                cuts.push(c);
            }
        }
        cuts.sort_unstable();
        cuts.insert(0, 0);
        cuts.push(len);
        let parts: Vec<ErrorSummary> = cuts.windows(2).map(|w| summarize(&errors[w[0]..w[1]]).unwrap()).collect();

        let whole = summarize(&errors).unwrap();
        let exact = aggregate(&parts, FormulaMode::ExactPooled).unwrap();
        let paper = aggregate(&parts, FormulaMode::Paper).unwrap();
        let got = [exact.mean, exact.variance, exact.skewness, exact.kurtosis];
        let want = [whole.mean, whole.variance, whole.skewness, whole.kurtosis];
        for k in 0..4 {
            worst[k] = worst[k].max(rel_err(got[k], want[k]));
        }
        worst_paper[0] = worst_paper[0].max(rel_err(paper.mean, whole.mean));
        worst_paper[1] = worst_paper[1].max(rel_err(paper.variance, whole.variance));
    }
    let elapsed = started.elapsed();
    let max_rel = worst.iter().chain(&worst_paper).copied().fold(0.0, f64::max);
    check(
        max_rel < 1e-9 && elapsed < Duration::from_secs(10),
        format!(
            "max rel err mean/var/skew/kurt {:.1e}/{:.1e}/{:.1e}/{:.1e}, paper mean/var {:.1e}/{:.1e}, {:.2}s",
            worst[0], worst[1], worst[2], worst[3], worst_paper[0], worst_paper[1], elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_gradient_check() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for b in 0..20u64 {
        let model = ModelParams::init(4, &[2], 1000 + b).unwrap();
        let rows = rng.random_range(1..=16usize);
        let batch = Array2::from_shape_fn((rows, 4), |_| rng.random_range(-1.0..1.0));
        let (_, grads) = model.loss_and_gradients(batch.view()).unwrap();

        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (li, (gw, gb)) in grads.layers.iter().enumerate() {
            let loss_at = |f: &dyn Fn(&mut ModelParams)| {
                let mut m = model.clone();
                f(&mut m);
                m.loss_and_gradients(batch.view()).unwrap().0
            };
            for ((r, c), &g) in gw.indexed_iter() {
                let plus = loss_at(&|m| m.layers_mut()[li].weights[[r, c]] += h);
                let minus = loss_at(&|m| m.layers_mut()[li].weights[[r, c]] -= h);
                analytic.push(g);
                numeric.push((plus - minus) / (2.0 * h));
            }
            for (r, &g) in gb.indexed_iter() {
                let plus = loss_at(&|m| m.layers_mut()[li].bias[r] += h);
                let minus = loss_at(&|m| m.layers_mut()[li].bias[r] -= h);
                analytic.push(g);
                numeric.push((plus - minus) / (2.0 * h));
            }
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = if na.max(nn) == 0.0 { 0.0 } else { diff / na.max(nn) };
        worst = worst.max(rel);
    }
    let elapsed = started.elapsed();
    check(
        worst < 1e-4 && elapsed < Duration::from_secs(5),
        format!("worst relative gradient error {worst:.2e} over 20 batches, {:.2}s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 3

fn global(mean: f64, std: f64) -> GlobalSummary {
    GlobalSummary::from_parts(mean, std * std, 0.0, 3.0, 100)
}

fn criterion_overlap_examples() -> Outcome {
    let cases = [
        ((1.0, 0.5), (5.0, 1.0), (2.0, 2.5), false),
        ((0.0, 1.0), (0.0, 1.0), (-3.0, 3.0), false),
        ((0.0, 0.1), (10.0, 0.1), (0.3, 9.7), true),
    ];
    let mut details = Vec::new();
    let mut ok = true;
    for ((mn, sn), (ma, sa), (lo, hi), degenerate) in cases {
        let r = overlap_region(&global(mn, sn), &global(ma, sa), false);
        let good = (r.lower - lo).abs() < 1e-12 && (r.upper - hi).abs() < 1e-12 && r.degenerate == degenerate;
        ok &= good;
        details.push(format!("[{}, {}]{}", r.lower, r.upper, if r.degenerate { " degenerate" } else { "" }));
    }
    check(ok, details.join("; "))
}

// ---------------------------------------------------------------- 4

/// Best F1 over every distinct error used as the cut point.
fn optimal_cut_f1(errors: &[f64], labels: &[u8]) -> f64 {
    let mut cuts = errors.to_vec();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts.iter()
        .map(|&t| Confusion::at_threshold(errors, labels, t).f1())
        .fold(0.0, f64::max)
}

fn single_client_gaps(errors: &[f64], labels: &[u8], n: usize) -> (f64, f64) {
    let best = optimal_cut_f1(errors, labels);
    let cs = ClassSummaries::from_labeled(errors, labels).unwrap();
    let ours = our_method(&[cs], &[errors.len()], n, F1Aggregation::Mean, FormulaMode::ExactPooled, false, |c| {
        vec![f1_curve(errors, labels, c)]
    })
    .unwrap();
    let f_ours = Confusion::at_threshold(errors, labels, ours.threshold).f1();
    let t_local = local_minmax(errors, labels, n).unwrap();
    let f_local = Confusion::at_threshold(errors, labels, t_local).f1();
    (best - f_ours, best - f_local)
}

fn class_sizes(rng: &mut ChaCha8Rng) -> (usize, usize) {
    let total = rng.random_range(10..=200usize);
    let anomalies = rng.random_range(5..=(total / 3).max(5));
    (total - anomalies, anomalies)
}

/// Instances whose classes have bounded support (uniform on random,
/// possibly overlapping intervals), so each class lies inside its own
/// mean +/- 3 sd band. A second, heavy-tailed family is reported for
/// information only: there the optimal cut can sit beyond the normal
/// class's 3 sd bound, outside the interval our_method searches.
fn criterion_brute_force_threshold() -> Outcome {
    let started = Instant::now();
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut worst_ours, mut worst_local) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let (normals, anomalies) = class_sizes(&mut rng);
        let lo = rng.random_range(0.0..0.1);
        let wn = rng.random_range(0.05..0.5);
        let shift = rng.random_range(0.0..1.5) * wn;
        let wa = rng.random_range(0.05..1.0);
        let mut errors: Vec<f64> = (0..normals).map(|_| rng.random_range(lo..lo + wn)).collect();
        errors.extend((0..anomalies).map(|_| rng.random_range(lo + shift..lo + shift + wa)));
        let labels: Vec<u8> = (0..normals).map(|_| 0).chain((0..anomalies).map(|_| 1)).collect();
        let (go, gl) = single_client_gaps(&errors, &labels, n);
        worst_ours = worst_ours.max(go);
        worst_local = worst_local.max(gl);
    }

    let mut heavy_misses = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(405);
    for _ in 0..200 {
        let (normals, anomalies) = class_sizes(&mut rng);
        let base = rng.random_range(-4.0..-1.0);
        let spread = rng.random_range(0.2..1.0);
        let nd = LogNormal::new(base, spread).unwrap();
        let ad = LogNormal::new(base + rng.random_range(0.0..3.0), spread).unwrap();
        let mut errors: Vec<f64> = (0..normals).map(|_| nd.sample(&mut rng)).collect();
        errors.extend((0..anomalies).map(|_| ad.sample(&mut rng)));
        let labels: Vec<u8> = (0..normals).map(|_| 0).chain((0..anomalies).map(|_| 1)).collect();
        if single_client_gaps(&errors, &labels, n).0 > 0.01 {
            heavy_misses += 1;
        }
    }
    let elapsed = started.elapsed();
    check(
        worst_ours <= 0.01 && worst_local <= 0.01 && elapsed < Duration::from_secs(60),
        format!(
            "largest F1 gap to optimal cut: our_method {worst_ours:.4}, local_minmax {worst_local:.4}; \
             lognormal (info only): our_method off by > 0.01 in {heavy_misses}/200; {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 5-9

fn desk_scenario() -> ScenarioConfig {
    let spec = SynthSpec {
        num_normal: 5000,
        num_anomaly: 250,
        dim: 8,
        separation: 4.0,
        anomaly_blobs: 1,
    };
    let mut cfg = ScenarioConfig::synthetic("desk", spec, 6);
    cfg.fed.rounds = 20;
    cfg.fed.train.local_epochs = 2;
    cfg
}

fn f1(out: &ScenarioOutput, m: MethodTag) -> f64 {
    out.global_f1(m).expect("method was run")
}

fn criterion_desk_scale(out: &ScenarioOutput, elapsed: Duration) -> Outcome {
    let ours = f1(out, MethodTag::OurMethod);
    let baselines = [
        MethodTag::FedMseStd,
        MethodTag::FedFiltered,
        MethodTag::Iqr,
        MethodTag::Percentile,
        MethodTag::LocalMseStd,
    ];
    let best = baselines
        .iter()
        .map(|&m| (m, f1(out, m)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    check(
        ours >= 0.90 && ours >= best.1 - 0.02 && elapsed < Duration::from_secs(120),
        format!(
            "our_method F1 {ours:.4}; best listed baseline {} {:.4}; {:.1}s",
            best.0,
            best.1,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_noniid() -> Outcome {
    let mut cfg = desk_scenario();
    cfg.scenario_id = "noniid".into();
    cfg.scheme = PartitionScheme::NoniidKmeans;
    if let fedthresh::config::DatasetRef::Synth(spec) = &mut cfg.dataset {
        spec.anomaly_blobs = 2;
    }
    cfg.methods = vec![MethodTag::OurMethod, MethodTag::FedMseStd];
    match run_scenario(&cfg) {
        Ok(out) => {
            let (ours, theirs) = (f1(&out, MethodTag::OurMethod), f1(&out, MethodTag::FedMseStd));
            check(
                ours - theirs >= 0.05,
                format!("our_method {ours:.4} vs fed_mse_std {theirs:.4}"),
            )
        }
        Err(e) => Verdict::Fail(e.to_string()),
    }
}

fn criterion_scalability(sweep: &[(usize, ScenarioOutput)]) -> Outcome {
    let scores: Vec<(usize, f64)> = sweep.iter().map(|(n, o)| (*n, f1(o, MethodTag::OurMethod))).collect();
    let base = scores[0].1;
    let ok = scores.iter().all(|&(_, s)| s >= base - 0.05);
    let listing: Vec<String> = scores.iter().map(|(n, s)| format!("{n}:{s:.4}")).collect();
    check(ok, format!("our_method F1 by clients {}", listing.join(" ")))
}

fn criterion_corruption() -> Outcome {
    let mut cfg = desk_scenario();
    cfg.scenario_id = "corruption".into();
    cfg.corruption.noise_sigma_scale = 2.0;
    cfg.methods = vec![MethodTag::OurMethod, MethodTag::FedMseStd];
    let sweep = match sweep_corruption(&cfg, &[0, 1, 3]) {
        Ok(s) => s,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let ours: Vec<f64> = sweep.iter().map(|(_, o)| f1(o, MethodTag::OurMethod)).collect();
    let theirs = f1(&sweep.last().unwrap().1, MethodTag::FedMseStd);
    let monotone = ours.windows(2).all(|w| w[1] <= w[0] + 0.02);
    let last = *ours.last().unwrap();
    check(
        monotone && last >= theirs,
        format!(
            "our_method at 0/1/3 corrupt {:.4}/{:.4}/{:.4}; fed_mse_std at 3 {theirs:.4}",
            ours[0], ours[1], ours[2]
        ),
    )
}

fn criterion_timing() -> Outcome {
    let mut cfg = desk_scenario();
    cfg.scenario_id = "timing".into();
    cfg.timing_repeats = 7;
    let counts = [2, 6, 10, 20];
    let sweep = match sweep_clients(&cfg, &counts) {
        Ok(s) => s,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let rows: Vec<_> = sweep.iter().flat_map(|(_, o)| o.rows.clone()).collect();
    let dir = tempfile::tempdir().expect("temp dir");
    let report_ok = emit_report(&rows, dir.path()).is_ok() && dir.path().join("timing.csv").exists();

    let total = |o: &ScenarioOutput, m: MethodTag| o.global_row(m).unwrap().wall_time_ms;
    let first = &sweep[0].1;
    let last = &sweep[sweep.len() - 1].1;
    let mut notes = Vec::new();
    let mut ok = report_ok;
    // F1-search methods do per-client work over the full candidate grid
    for m in [MethodTag::OurMethod, MethodTag::FedMinmax] {
        let (a, b) = (total(first, m), total(last, m));
        ok &= b > a;
        notes.push(format!("{m} {a:.3}->{b:.3}ms"));
    }
    for m in [MethodTag::FedMseStd, MethodTag::FedFiltered] {
        notes.push(format!("{m} {:.3}->{:.3}ms", total(first, m), total(last, m)));
    }
    let mut worst_ratio = 0.0f64;
    for m in MethodTag::ALL.into_iter().filter(|m| !m.is_federated()) {
        let base = total(first, m) / 2.0;
        for (n, o) in &sweep {
            let per_client = total(o, m) / *n as f64;
            worst_ratio = worst_ratio.max(per_client / base);
        }
    }
    ok &= worst_ratio <= 2.0;
    notes.push(format!("worst local per-client ratio {worst_ratio:.2}"));
    check(ok, notes.join("; "))
}

// ---------------------------------------------------------------- 10-11

fn criterion_determinism() -> Outcome {
    let mut cfg = desk_scenario();
    cfg.scenario_id = "determinism".into();
    cfg.num_clients = 4;
    cfg.fed.rounds = 5;
    cfg.scheme = PartitionScheme::Random;
    let first = run_scenario(&cfg).and_then(|o| results_csv(&o.rows));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let second = pool.install(|| run_scenario(&cfg).and_then(|o| results_csv(&o.rows)));
    match (first, second) {
        (Ok(a), Ok(b)) => check(
            a == b,
            format!("{} bytes, default pool vs single thread identical: {}", a.len(), a == b),
        ),
        (Err(e), _) | (_, Err(e)) => Verdict::Fail(e.to_string()),
    }
}

fn criterion_privacy(out: &ScenarioOutput, cfg: &ScenarioConfig) -> Outcome {
    let n = cfg.num_clients;
    let fed_msgs = out.fedavg_messages.len();
    let expected = 2 * n * cfg.fed.rounds;
    let candidates = out.our_method.as_ref().map(|o| o.candidates.len()).unwrap_or(0);
    let mut violations = Vec::new();
    for (tag, msgs) in &out.method_messages {
        if !matches!(tag, MethodTag::OurMethod | MethodTag::FedMseStd | MethodTag::FedFiltered) {
            continue;
        }
        for m in msgs {
            let allowed = match m.kind {
                MessageKind::SummaryRecord => m.scalars == 5,
                MessageKind::LocalThreshold => m.scalars == 1,
                MessageKind::CandidateThresholds | MessageKind::F1Vector => m.scalars == candidates,
                _ => false,
            };
            if !allowed {
                violations.push(format!("{tag}: {:?} with {} scalars", m.kind, m.scalars));
            }
        }
    }
    check(
        violations.is_empty() && fed_msgs == expected && candidates > 0,
        format!(
            "FedAvg messages {fed_msgs} (expected {expected}); {} payload violations{}",
            violations.len(),
            violations.first().map(|v| format!(", e.g. {v}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- 12

fn criterion_f1_sweep() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let len = rng.random_range(0..60usize);
        let grid = rng.random_range(1..8u32) as f64;
        let errors: Vec<f64> = (0..len).map(|_| (rng.random_range(0.0..1.0) * grid).round() / grid).collect();
        let labels: Vec<u8> = (0..len).map(|_| u8::from(rng.random_bool(0.3))).collect();
        let k = rng.random_range(1..30usize);
        let mut candidates: Vec<f64> = (0..k)
            .map(|_| {
                if !errors.is_empty() && rng.random_bool(0.5) {
                    errors[rng.random_range(0..errors.len())]
                } else {
                    rng.random_range(-0.2..1.2)
                }
            })
            .collect();
        if rng.random_bool(0.5) {
            candidates.sort_by(f64::total_cmp);
        }
        let fast = f1_curve(&errors, &labels, &candidates);
        let naive: Vec<f64> = candidates
            .iter()
            .map(|&t| Confusion::at_threshold(&errors, &labels, t).f1())
            .collect();
        if fast.iter().map(|x| x.to_bits()).ne(naive.iter().map(|x| x.to_bits())) {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches} mismatching cases of 1000"))
}

// ---------------------------------------------------------------- 13

fn criterion_shuttle() -> Outcome {
    let Ok(path) = std::env::var("FEDTHRESH_SHUTTLE_CSV") else {
        return Verdict::Skip("FEDTHRESH_SHUTTLE_CSV not set".into());
    };
    let label = std::env::var("FEDTHRESH_SHUTTLE_LABEL").unwrap_or_else(|_| "y".into());
    let mut cfg = desk_scenario();
    cfg.scenario_id = "shuttle".into();
    cfg.dataset = fedthresh::config::DatasetRef::Csv {
        path: path.into(),
        label_column: label,
        positive_label: Some("1".into()),
    };
    cfg.methods = vec![MethodTag::OurMethod];
    match run_scenario(&cfg) {
        Ok(out) => {
            let s = f1(&out, MethodTag::OurMethod);
            check(s >= 0.95, format!("our_method F1 {s:.4} on Shuttle"))
        }
        Err(e) => Verdict::Fail(e.to_string()),
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |id: u32, name: &'static str, o: Outcome| {
        let (tag, detail) = match &o {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => ("FAIL", d),
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] {id:>2} {name}: {detail}");
        results.push((id, name, o));
    };

    record(1, "pooled-moment oracle", criterion_pooled_moments());
    record(2, "gradient check", criterion_gradient_check());
    record(3, "overlap-region examples", criterion_overlap_examples());
    record(4, "brute-force threshold oracle", criterion_brute_force_threshold());

    let cfg = desk_scenario();
    let started = Instant::now();
    match run_scenario(&cfg) {
        Ok(out) => {
            let elapsed = started.elapsed();
            record(5, "desk-scale end-to-end", criterion_desk_scale(&out, elapsed));
            record(6, "non-IID ordering", criterion_noniid());
            match sweep_clients(&cfg, &[2, 6, 10, 20]) {
                Ok(sweep) => record(7, "client-count scalability", criterion_scalability(&sweep)),
                Err(e) => record(7, "client-count scalability", Verdict::Fail(e.to_string())),
            }
            record(8, "corruption robustness", criterion_corruption());
            record(9, "threshold timing trend", criterion_timing());
            record(10, "determinism", criterion_determinism());
            record(11, "privacy audit", criterion_privacy(&out, &cfg));
        }
        Err(e) => {
            for (id, name) in [
                (5, "desk-scale end-to-end"),
                (6, "non-IID ordering"),
                (7, "client-count scalability"),
                (8, "corruption robustness"),
                (9, "threshold timing trend"),
                (10, "determinism"),
                (11, "privacy audit"),
            ] {
                record(id, name, Verdict::Fail(format!("scenario failed: {e}")));
            }
        }
    }
    record(12, "F1 sweep oracle", criterion_f1_sweep());
    record(13, "Shuttle spot check (optional)", criterion_shuttle());

    let failed = results.iter().filter(|(_, _, o)| matches!(o, Verdict::Fail(_))).count();
    let passed = results.iter().filter(|(_, _, o)| matches!(o, Verdict::Pass(_))).count();
    let skipped = results.len() - failed - passed;
    println!("acceptance: {passed} passed, {failed} failed, {skipped} skipped");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
