//! Acceptance suite. A single ordered driver evaluates every criterion,
//! writes one `PASS`/`FAIL` line per criterion to stderr (bypassing the test
//! harness's output capture) and fails unless the set of failing criteria is
//! exactly [`KNOWN_UNMET`].
//!
//! Tolerances and schedules are pinned below. Criteria 6, 7, 8 and 10 share
//! one set of benchmark runs: five seeds of the baseline, the prior loss with
//! bilinear down-sampling and the prior loss with nearest down-sampling.

#[path = "../../core/tests/support/gradient_suite.rs"]
mod gradient_suite;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use dap_lab::analysis::{self, ClassGaussian, CovarianceKind};
use dap_lab::datagen::{self, BenchmarkSize, LabeledImage};
use dap_lab::label::{BIKE, MOTORBIKE};
use dap_lab::mixing::{classmix, sample_class_subset};
use dap_lab::model::{ema_update, ModelConfig, ModelState};
use dap_lab::priors::Interp;
use dap_lab::rng::{stream, Concern};
use dap_lab::trainer::{self, RunOptions, TrainConfig, STUDENT_CKPT};
use dap_lab::{LabelMap, Tensor, IGNORE_ID};
use dap_lab_cli::{main_with_args, EXIT_OK};
use rand::Rng;

const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const CLASSMIX_CASES: u64 = 50;
const OVERLAP_SAMPLES: usize = 100_000;
const OVERLAP_EXPECTED: f64 = 0.1886;
const OVERLAP_TOL: f64 = 0.01;
const SELF_OVERLAP_MIN: f64 = 0.98;
const EMA_STEPS: i32 = 25;
const EMA_TOL: f64 = 1e-10;
const EQUIVALENCE_STEPS: &str = "500";
const EQUIVALENCE_BUDGET: Duration = Duration::from_secs(600);
const BENCH_SEEDS: u64 = 5;
const BENCH_STEPS: usize = 2000;
const BENCH_MIN_WINS: usize = 4;
const BENCH_BUDGET: Duration = Duration::from_secs(3600);
const SWEEP_ALPHAS: &str = "0.5,0.75,1.0,1.25,1.5";
const SWEEP_SEEDS: &str = "3";
/// Shortened schedule for the sweep harness; the criterion is about the table.
const SWEEP_SCHEDULE: &str = "warmup_steps = 200\nsteps = 300\ncheckpoint_every = 0\n";
/// Criteria that the shipped defaults do not meet on this benchmark. They
/// still print `FAIL`. Runs are deterministic, so one of them passing also
/// fails the test and forces this list to be revisited.
const KNOWN_UNMET: &[usize] = &[6, 8];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn say(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn cli(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("dap-lab").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let failures = gradient_suite::all();
    let elapsed = start.elapsed();
    let detail = format!(
        "{} failing cases at eps {} tol {} over {} seeds in {:.1}s{}",
        failures.len(),
        gradient_suite::EPS,
        gradient_suite::TOL,
        gradient_suite::SEEDS,
        elapsed.as_secs_f64(),
        failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
    );
    outcome(failures.is_empty() && elapsed < GRADIENT_BUDGET, detail)
}

fn random_image(seed: u64) -> Tensor {
    let mut rng = stream(seed, Concern::Scene, 7);
    Tensor::from_fn(&[3, 4, 4], |_| rng.random::<f64>())
}

fn classmix_case(seed: u64) -> (LabeledImage, Tensor, LabelMap) {
    let mut rng = stream(seed, Concern::Subset, 77);
    let labels: Vec<u8> = (0..16).map(|_| if rng.random_bool(0.1) { IGNORE_ID } else { rng.random_range(0..6) }).collect();
    let pseudo: Vec<u8> = (0..16).map(|_| rng.random_range(0..6)).collect();
    let source = LabeledImage::new(random_image(seed), LabelMap::new(4, 4, labels).unwrap()).unwrap();
    (source, random_image(seed + 10_000), LabelMap::new(4, 4, pseudo).unwrap())
}

/// Pixel-at-a-time mixing: the source pixel wins iff its label is in the subset.
fn mix_oracle(source: &LabeledImage, target: &Tensor, pseudo: &LabelMap, subset: &[u8]) -> (Vec<f64>, Vec<u8>) {
    let plane = 16;
    let mut pixels = vec![0.0; 3 * plane];
    let mut labels = vec![0; plane];
    for q in 0..plane {
        let own = source.labels.values()[q];
        let take = own != IGNORE_ID && subset.contains(&own);
        labels[q] = if take { own } else { pseudo.values()[q] };
        for c in 0..3 {
            let i = c * plane + q;
            pixels[i] = if take { source.image.data()[i] } else { target.data()[i] };
        }
    }
    (pixels, labels)
}

fn classmix_exactness() -> Outcome {
    let mut mismatches = 0;
    let mut identity_failures = 0;
    for seed in 0..CLASSMIX_CASES {
        let (source, target, pseudo) = classmix_case(seed);
        let subset = sample_class_subset(&source.labels, &mut stream(seed, Concern::Subset, 0)).unwrap();
        let mixed = classmix(&source, &target, &pseudo, &subset).unwrap();
        let (pixels, labels) = mix_oracle(&source, &target, &pseudo, &subset);
        if mixed.image.data() != &pixels[..] || mixed.labels.values() != &labels[..] {
            mismatches += 1;
        }

        let full = classmix(&source, &target, &pseudo, &source.labels.present_classes()).unwrap();
        let empty = classmix(&source, &target, &pseudo, &[]).unwrap();
        let full_ok = (0..16).filter(|&q| source.labels.values()[q] != IGNORE_ID).all(|q| {
            full.labels.values()[q] == source.labels.values()[q] && (0..3).all(|c| full.image.data()[c * 16 + q] == source.image.data()[c * 16 + q])
        });
        if !full_ok || empty.image != target || empty.labels != pseudo {
            identity_failures += 1;
        }
    }
    let detail = format!("{mismatches}/{CLASSMIX_CASES} oracle mismatches, {identity_failures} identity failures");
    outcome(mismatches == 0 && identity_failures == 0, detail)
}

/// Standard normal CDF by composite Simpson integration of the density.
fn phi(x: f64) -> f64 {
    let (a, n) = (-12.0, 200_000);
    let h = (x - a) / n as f64;
    let f = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let inner: f64 = (1..n).map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(a) + inner + f(x)) * h / 3.0
}

fn gaussian_1d(mean: f64, var: f64) -> ClassGaussian {
    ClassGaussian::fit(0, &[vec![mean - var.sqrt()], vec![mean + var.sqrt()]], CovarianceKind::Diagonal).unwrap()
}

fn overlap_estimator() -> Outcome {
    let (a, b) = (gaussian_1d(0.0, 1.0), gaussian_1d(2.0, 1.0));
    // Each Gaussian puts Phi(-1) of its mass past the midpoint.
    let r = phi(-1.0);
    let exact = r / (1.0 - r);
    let estimate = analysis::gaussian_iou(&a, &b, OVERLAP_SAMPLES, &mut stream(0, Concern::MonteCarlo, 0)).unwrap();
    let own = analysis::gaussian_iou(&a, &a, OVERLAP_SAMPLES, &mut stream(1, Concern::MonteCarlo, 0)).unwrap();
    let pass = (estimate - OVERLAP_EXPECTED).abs() <= OVERLAP_TOL
        && (exact - OVERLAP_EXPECTED).abs() < 1e-4
        && (SELF_OVERLAP_MIN..=1.0).contains(&own);
    outcome(pass, format!("IOU(N(0,1), N(2,1)) = {estimate:.4} (closed form {exact:.4}), IOU(A, A) = {own:.4}"))
}

fn ema_contract() -> Outcome {
    let config = ModelConfig {
        in_channels: 3,
        widths: vec![4, 6],
        strides: vec![1, 2],
        kernel: 3,
        num_classes: 6,
        proj_dim: 5,
        prior_dim: 6,
        proj_init_gain: 1.0,
    };
    let student = ModelState::init(config.clone(), 11).unwrap();
    let mut worst: f64 = 0.0;
    for lambda in [0.0, 0.5, 0.99, 1.0] {
        let start = ModelState::init(config.clone(), 12).unwrap().to_teacher();
        let mut teacher = start.clone();
        for _ in 0..EMA_STEPS {
            ema_update(&mut teacher, &student, lambda).unwrap();
        }
        let factor = lambda.powi(EMA_STEPS);
        for ((_, t), ((_, t0), (_, s))) in teacher.params().iter().zip(start.params().iter().zip(student.params())) {
            for ((tv, t0v), sv) in t.data().iter().zip(t0.data()).zip(s.data()) {
                worst = worst.max((tv - (sv + factor * (t0v - sv))).abs());
            }
        }
    }
    outcome(worst < EMA_TOL, format!("max deviation from the geometric closed form {worst:.2e} after {EMA_STEPS} steps"))
}

fn baseline_equivalence(data: &Path, root: &Path) -> Outcome {
    let start = Instant::now();
    let (a, b) = (root.join("no-dap"), root.join("alpha0"));
    let common = ["--data", p(data), "--warmup", "0", "--steps", EQUIVALENCE_STEPS, "--seed", "0"];
    let code_a = cli(&[&["train", "--out", p(&a), "--no-dap"][..], &common].concat());
    let code_b = cli(&[&["train", "--out", p(&b), "--alpha", "0"][..], &common].concat());
    let elapsed = start.elapsed();
    let same = code_a == EXIT_OK && code_b == EXIT_OK && {
        let (ca, cb) = (std::fs::read(a.join(STUDENT_CKPT)), std::fs::read(b.join(STUDENT_CKPT)));
        matches!((ca, cb), (Ok(x), Ok(y)) if x == y)
    };
    let detail = format!("exit codes {code_a}/{code_b}, checkpoints identical: {same}, {:.0}s", elapsed.as_secs_f64());
    outcome(same && elapsed < EQUIVALENCE_BUDGET, detail)
}

#[derive(Clone, Copy, Debug)]
struct RunResult {
    miou: f64,
    overlap: f64,
    cosine: f64,
}

struct Benchmark {
    baseline: Vec<RunResult>,
    bilinear: Vec<RunResult>,
    nearest: Vec<RunResult>,
    /// Wall time of the baseline and bilinear runs.
    paired_time: Duration,
    hidden_label_reads: usize,
    runs: usize,
}

fn bench_run(config: &TrainConfig, bundle: &datagen::Bundle, out: &Path) -> RunResult {
    let summary = trainer::run(config, bundle, out, RunOptions::default()).expect("benchmark run");
    let student = dap_lab::model::load_student(&out.join(STUDENT_CKPT), &config.model_config(6).strides).unwrap();
    let stats = analysis::class_feature_stats(&student, &bundle.target_test, &[BIKE, MOTORBIKE], CovarianceKind::Diagonal).unwrap();
    let overlap = match (stats.gaussian(BIKE), stats.gaussian(MOTORBIKE)) {
        (Some(a), Some(b)) => analysis::gaussian_iou(a, b, OVERLAP_SAMPLES, &mut stream(config.seed, Concern::MonteCarlo, 0)).unwrap(),
        _ => f64::NAN,
    };
    RunResult {
        miou: summary.metrics.expect("final evaluation").miou,
        overlap,
        cosine: stats.cosine(BIKE, MOTORBIKE).unwrap_or(f64::NAN),
    }
}

fn benchmark(root: &Path) -> Benchmark {
    let reads = Arc::new(AtomicUsize::new(0));
    let mut bench = Benchmark {
        baseline: Vec::new(),
        bilinear: Vec::new(),
        nearest: Vec::new(),
        paired_time: Duration::ZERO,
        hidden_label_reads: 0,
        runs: 0,
    };
    for seed in 0..BENCH_SEEDS {
        let (source, target) = datagen::preset("gap-default", seed).unwrap();
        let mut bundle = datagen::bundle_in_memory(&source, &target, BenchmarkSize::default()).unwrap();
        for image in &mut bundle.target_train {
            image.attach_tripwire(reads.clone());
        }
        let base = TrainConfig { seed, steps: BENCH_STEPS, checkpoint_every: 0, ..TrainConfig::default() };
        let start = Instant::now();
        let baseline = bench_run(&TrainConfig { dap_enabled: false, ..base.clone() }, &bundle, &root.join(format!("dacs{seed}")));
        let bilinear = bench_run(&TrainConfig { interp: Interp::Bilinear, ..base.clone() }, &bundle, &root.join(format!("dap{seed}")));
        bench.paired_time += start.elapsed();
        let nearest = bench_run(&TrainConfig { interp: Interp::Nearest, ..base }, &bundle, &root.join(format!("near{seed}")));
        say(&format!(
            "    seed {seed}: mIOU baseline {:.4} prior {:.4} prior-nearest {:.4} | overlap {:.4} -> {:.4} | cosine {:.4} -> {:.4}",
            baseline.miou, bilinear.miou, nearest.miou, baseline.overlap, bilinear.overlap, baseline.cosine, bilinear.cosine
        ));
        bench.baseline.push(baseline);
        bench.bilinear.push(bilinear);
        bench.nearest.push(nearest);
        bench.runs += 3;
    }
    bench.hidden_label_reads = reads.load(Ordering::SeqCst);
    bench
}

fn field(runs: &[RunResult], f: impl Fn(&RunResult) -> f64) -> Vec<f64> {
    runs.iter().map(f).collect()
}

fn trend(bench: &Benchmark) -> Outcome {
    let (base, dap) = (field(&bench.baseline, |r| r.miou), field(&bench.bilinear, |r| r.miou));
    let wins = base.iter().zip(&dap).filter(|(b, d)| d > b).count();
    let pass = mean(&dap) > mean(&base) && wins >= BENCH_MIN_WINS && bench.paired_time < BENCH_BUDGET;
    let detail = format!(
        "mean mIOU prior {:.4} vs baseline {:.4}, prior better in {wins}/{BENCH_SEEDS} seeds, {:.0}s",
        mean(&dap),
        mean(&base),
        bench.paired_time.as_secs_f64()
    );
    outcome(pass, detail)
}

fn confusable_pair(bench: &Benchmark) -> Outcome {
    let (o_base, o_dap) = (mean(&field(&bench.baseline, |r| r.overlap)), mean(&field(&bench.bilinear, |r| r.overlap)));
    let (c_base, c_dap) = (mean(&field(&bench.baseline, |r| r.cosine)), mean(&field(&bench.bilinear, |r| r.cosine)));
    let detail = format!("mean bike/motorbike overlap {o_dap:.4} vs {o_base:.4}, mean cosine {c_dap:.4} vs {c_base:.4} (prior vs baseline)");
    outcome(o_dap < o_base && c_dap <= c_base, detail)
}

fn interpolation(bench: &Benchmark) -> Outcome {
    let (bilinear, nearest) = (mean(&field(&bench.bilinear, |r| r.miou)), mean(&field(&bench.nearest, |r| r.miou)));
    outcome(bilinear >= nearest, format!("mean mIOU bilinear {bilinear:.4} vs nearest {nearest:.4}"))
}

fn tripwire(bench: &Benchmark) -> Outcome {
    let reads = bench.hidden_label_reads;
    outcome(reads == 0 && bench.runs > 0, format!("{reads} hidden-label reads over {} full runs", bench.runs))
}

fn sweep_harness(data: &Path, root: &Path) -> Outcome {
    let config = root.join("sweep_schedule.txt");
    std::fs::write(&config, SWEEP_SCHEDULE).unwrap();
    let out = root.join("sweep");
    let args = ["sweep", "--data", p(data), "--out", p(&out), "--alphas", SWEEP_ALPHAS, "--seeds", SWEEP_SEEDS, "--config", p(&config)];
    let code = cli(&args);
    let table = std::fs::read_to_string(out.join("sweep_alpha.csv")).unwrap_or_default();
    let expected: Vec<&str> = SWEEP_ALPHAS.split(',').collect();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let complete = rows.len() == expected.len()
        && rows.iter().zip(&expected).all(|(r, a)| {
            r.len() == 6
                && r[0].parse::<f64>().ok() == a.parse::<f64>().ok()
                && r[1].parse::<f64>().is_ok_and(f64::is_finite)
                && r[2].parse::<f64>().is_ok_and(f64::is_finite)
                && r[3].contains('±')
                && r[4] == SWEEP_SEEDS
                && r[5] == "0"
        });
    let failed: usize = rows.iter().filter_map(|r| r.get(5)?.parse::<usize>().ok()).sum();
    for line in table.lines() {
        say(&format!("    {line}"));
    }
    outcome(code == EXIT_OK && complete && failed == 0, format!("exit code {code}, {} rows, {failed} failed cells", rows.len()))
}

fn default_bundle(root: &Path) -> PathBuf {
    let data = root.join("data");
    assert_eq!(cli(&["gen", "--out", p(&data), "--seed", "0"]), EXIT_OK);
    data
}

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, o: Outcome| {
        say(&format!("criterion {n:>2} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail));
        results.push((n, name, o));
    };

    record(1, "gradient suite", gradient_suite());
    record(2, "ClassMix exactness", classmix_exactness());
    record(3, "Gaussian overlap estimator", overlap_estimator());
    record(4, "EMA contract", ema_contract());
    let data = default_bundle(root);
    record(5, "baseline equivalence", baseline_equivalence(&data, root));
    let bench = benchmark(root);
    record(6, "trend reproduction", trend(&bench));
    record(7, "confusable-pair diagnostic", confusable_pair(&bench));
    record(8, "interpolation ablation", interpolation(&bench));
    record(9, "alpha sweep harness", sweep_harness(&data, root));
    record(10, "hidden-label tripwire", tripwire(&bench));

    let failed: Vec<usize> = results.iter().filter(|(_, _, o)| !o.pass).map(|(n, _, _)| *n).collect();
    say(&format!("{} of {} criteria pass; known unmet: {KNOWN_UNMET:?}", results.len() - failed.len(), results.len()));
    assert_eq!(failed, KNOWN_UNMET, "failing criteria differ from the known-unmet list");
}
