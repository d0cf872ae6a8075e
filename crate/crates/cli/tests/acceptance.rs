//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The two trend criteria are defined on the 5k/1k CIFAR-10 subset. Set
//! `NORMKIT_CIFAR_DIR` to the extracted binary archive to run them there;
//! without it they run on the synthetic stand-in, are reported, and do not
//! fail the suite. `NORMKIT_SKIP_TRENDS=1` skips them entirely.

use std::collections::BTreeMap;
use std::process::{Command, ExitCode};
use std::time::Instant;

use normkit::data::{make_synthetic, SyntheticSpec};
use normkit::experiment::{desk_synthetic, read_rows, run_sweep, thread_budget, CsvRow, DataSource, SweepSpec};
use normkit::gradcheck::{check_norm_layer, NormCheck};
use normkit::model::{evaluate, median, train, ConvNetSpec, GroupChoice, TrainConfig};
use normkit::norm::BackwardVariant;
use normkit::rng::{normal_tensor, SeededRng};
use normkit::{build_partition, norm_forward, Mode, NormKind, NormMethod, NormParams, Shape4, Tensor4};
use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::{Config, TestRunner};

struct Outcome {
    pass: bool,
    detail: String,
    /// Whether a FAIL here fails the suite.
    binding: bool,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
            binding: true,
        }
    }
}

fn kind_for(method: NormMethod, shape: Shape4, r: usize) -> NormKind {
    match method {
        NormMethod::Group => NormKind::Group(1 + r % shape.c),
        NormMethod::BatchGroup => NormKind::BatchGroup(1 + r % shape.merged()),
        m => m.with_groups(1),
    }
}

fn random(shape: Shape4, seed: u64) -> Tensor4<f64> {
    let mut rng = SeededRng::new(seed);
    normal_tensor::<f64>(&mut rng, shape, 1.5).map(|v| v - 0.3)
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut runner = TestRunner::new(Config {
        cases: 8,
        rng_algorithm: proptest::test_runner::RngAlgorithm::ChaCha,
        ..Config::default()
    });
    let strategy = (1usize..=4, 1usize..=8, 1usize..=5, 1usize..=5, 0usize..1000, 0u64..u64::MAX);
    let mut worst = 0.0f64;
    let mut checked = BTreeMap::new();
    let mut failures = Vec::new();
    for method in NormMethod::ALL {
        let mut count = 0;
        let mut attempts = 0;
        while count < 8 && attempts < 500 {
            attempts += 1;
            let (n, c, h, w, r, seed) = strategy.new_tree(&mut runner).expect("strategy").current();
            let shape = Shape4::new(n, c, h, w);
            let kind = kind_for(method, shape, r);
            let part = build_partition(kind, shape).expect("valid kind");
            // Groups of two normalize to +-1; their gradient is of order eps.
            if part.group_sizes().iter().any(|&k| k < 3) {
                continue;
            }
            let report = check_norm_layer(kind, shape, NormCheck { seed, ..NormCheck::default() }).expect("gradcheck");
            worst = worst.max(report.max_rel_error());
            if !report.pass {
                failures.push(report.to_string());
            }
            count += 1;
        }
        checked.insert(method.name(), count);
    }
    let enough = checked.values().all(|&k| k >= 5);
    let secs = started.elapsed().as_secs_f64();
    Outcome::new(
        failures.is_empty() && enough && secs < 120.0,
        format!("shapes per kind {checked:?}, worst rel err {worst:.2e}, {secs:.1}s {}", failures.join("; ")),
    )
}

fn naive_stats(kind: NormKind, x: &Tensor4<f64>) -> Vec<(f64, f64)> {
    let s = x.shape();
    let block = |i: usize, size: usize, g: usize| (i / size).min(g - 1);
    let key = |n: usize, c: usize, h: usize, w: usize| -> (usize, usize, usize, usize) {
        match kind {
            NormKind::Batch => (0, c, 0, 0),
            NormKind::Instance => (n, c, 0, 0),
            NormKind::Layer => (n, 0, 0, 0),
            NormKind::Group(g) => (n, block(c, s.c / g, g), 0, 0),
            NormKind::Positional => (n, 0, h, w),
            NormKind::BatchGroup(g) => (0, block((c * s.h + h) * s.w + w, s.merged() / g, g), 0, 0),
        }
    };
    let mut out = Vec::with_capacity(s.len());
    for n in 0..s.n {
        for c in 0..s.c {
            for h in 0..s.h {
                for w in 0..s.w {
                    let k = key(n, c, h, w);
                    let (mut sum, mut cnt) = (0.0, 0.0);
                    let mut members = Vec::new();
                    for n2 in 0..s.n {
                        for c2 in 0..s.c {
                            for h2 in 0..s.h {
                                for w2 in 0..s.w {
                                    if key(n2, c2, h2, w2) == k {
                                        let v = x.at(n2, c2, h2, w2);
                                        sum += v;
                                        cnt += 1.0;
                                        members.push(v);
                                    }
                                }
                            }
                        }
                    }
                    let mean = sum / cnt;
                    let var = members.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cnt;
                    out.push((mean, var));
                }
            }
        }
    }
    out
}

fn criterion_2() -> Outcome {
    let mut rng = SeededRng::new(2);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for trial in 0..12 {
        let shape = if trial == 0 {
            Shape4::new(4, 8, 6, 6)
        } else {
            Shape4::new(1 + rng.below(4), 1 + rng.below(8), 1 + rng.below(6), 1 + rng.below(6))
        };
        let x = random(shape, 100 + trial);
        for method in NormMethod::ALL {
            let kind = kind_for(method, shape, rng.below(1000));
            let part = build_partition(kind, shape).expect("valid kind");
            let (means, vars) = part.statistics(&x).expect("statistics");
            for (i, (m, v)) in naive_stats(kind, &x).into_iter().enumerate() {
                let g = part.group_of(i);
                worst = worst.max((means[g] - m).abs()).max((vars[g] - v).abs());
            }
            cases += 1;
        }
    }
    Outcome::new(worst <= 1e-12, format!("{cases} tensors x kinds, max deviation {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = SeededRng::new(seed);
        let shape = Shape4::new(1 + rng.below(4), 8, 1 + rng.below(5), 1 + rng.below(5));
        let x = random(shape, seed);
        let mut params = NormParams::<f64>::new(8);
        for (g, b) in params.gamma.iter_mut().zip(params.beta.iter_mut()) {
            *g = rng.uniform(0.5, 2.0);
            *b = rng.uniform(-1.0, 1.0);
        }
        let fwd = |kind: NormKind, x: &Tensor4<f64>| {
            let part = build_partition(kind, x.shape()).expect("valid kind");
            norm_forward(x, &part, &params, None, Mode::Train, 1e-5).expect("forward").0
        };
        let diff = |a: Tensor4<f64>, b: Tensor4<f64>| a.max_abs_diff(&b).expect("same shape");
        worst = worst.max(diff(fwd(NormKind::Group(1), &x), fwd(NormKind::Layer, &x)));
        worst = worst.max(diff(fwd(NormKind::Group(8), &x), fwd(NormKind::Instance, &x)));
        let one = x.slice_batch(0, 1).expect("slice");
        for g in [1, 2, 4] {
            worst = worst.max(diff(fwd(NormKind::BatchGroup(g), &one), fwd(NormKind::Group(g), &one)));
        }
        worst = worst.max(diff(fwd(NormKind::BatchGroup(1), &one), fwd(NormKind::Layer, &one)));
    }
    Outcome::new(worst <= 1e-12, format!("max elementwise deviation {worst:.2e}"))
}

fn criterion_4() -> Outcome {
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    let mut rng = SeededRng::new(4);
    for trial in 0..30 {
        let shape = Shape4::new(1 + rng.below(4), 1 + rng.below(8), 2 + rng.below(5), 1 + rng.below(6));
        let x = random(shape, 400 + trial);
        for method in NormMethod::ALL {
            let kind = kind_for(method, shape, rng.below(1000));
            let part = build_partition(kind, shape).expect("valid kind");
            if part.group_sizes().iter().any(|&k| k < 2) {
                continue;
            }
            let params = NormParams::<f64>::new(shape.c);
            let (y, _) = norm_forward(&x, &part, &params, None, Mode::Train, 0.0).expect("forward");
            let (m, v) = part.statistics(&y).expect("statistics");
            worst_mean = m.iter().fold(worst_mean, |a, b| a.max(b.abs()));
            worst_var = v.iter().fold(worst_var, |a, b| a.max((b - 1.0).abs()));
        }
    }
    Outcome::new(
        worst_mean <= 1e-6 && worst_var <= 1e-6,
        format!("max |mean| {worst_mean:.2e}, max |var - 1| {worst_var:.2e}"),
    )
}

/// Trend data: the CIFAR subset when available, else the synthetic set.
fn trend_source() -> (DataSource, bool) {
    match std::env::var("NORMKIT_CIFAR_DIR") {
        Ok(dir) if !dir.is_empty() => (DataSource::cifar10(dir), true),
        _ => (DataSource::Synthetic(desk_synthetic()), false),
    }
}

/// Median over seeds of each run's median-of-last-5, keyed by
/// `(normalizer, batch, G)`.
fn seed_medians(rows: &[CsvRow]) -> BTreeMap<(String, usize, usize), f64> {
    let mut cells: BTreeMap<(String, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.is_summary()) {
        let acc = if r.status == "completed" { r.test_acc.unwrap_or(0.0) } else { 0.0 };
        cells.entry((r.normalizer.clone(), r.batch_size, r.group_count)).or_default().push(acc);
    }
    cells.into_iter().map(|(k, v)| (k, median(&v).unwrap_or(0.0))).collect()
}

fn sweep(dir: &std::path::Path, name: &str, spec: SweepSpec) -> Vec<CsvRow> {
    let spec = SweepSpec {
        output: dir.join(name),
        ..spec
    };
    run_sweep(&spec, thread_budget()).expect("sweep");
    read_rows(&spec.output).expect("rows")
}

fn lookup(m: &BTreeMap<(String, usize, usize), f64>, norm: &str, batch: usize) -> f64 {
    m.iter()
        .find(|((n, b, _), _)| n == norm && *b == batch)
        .map(|(_, v)| *v)
        .unwrap_or(0.0)
}

fn criterion_5(dir: &std::path::Path) -> Outcome {
    let started = Instant::now();
    let (data, cifar) = trend_source();
    let base = SweepSpec {
        normalizers: vec![NormMethod::Batch, NormMethod::BatchGroup],
        batch_sizes: vec![64, 8, 2],
        seeds: vec![0, 1, 2],
        epochs: 20,
        data,
        ..SweepSpec::default()
    };
    let m = seed_medians(&sweep(dir, "trend20.csv", base.clone()));
    let pts = |x: f64| 100.0 * x;
    let (bn2, bgn2) = (lookup(&m, "bn", 2), lookup(&m, "bgn", 2));
    let (bn64, bgn64) = (lookup(&m, "bn", 64), lookup(&m, "bgn", 64));
    let spread = |norm: &str| {
        let v: Vec<f64> = [2, 8, 64].iter().map(|&b| lookup(&m, norm, b)).collect();
        v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
    };
    let mut a = pts(bgn2 - bn2) >= 2.0;
    let mut a_note = format!("(a) bgn2-bn2 {:+.2}", pts(bgn2 - bn2));
    if !a {
        let long = SweepSpec {
            batch_sizes: vec![2],
            epochs: 40,
            ..base.clone()
        };
        let m40 = seed_medians(&sweep(dir, "trend40.csv", long));
        let d = pts(lookup(&m40, "bgn", 2) - lookup(&m40, "bn", 2));
        a = d >= 2.0;
        a_note.push_str(&format!(", at 40 epochs {d:+.2}"));
    }
    let b = pts((bgn64 - bn64).abs()) <= 2.0;
    let c = spread("bgn") < spread("bn");
    let detail = format!(
        "{} data; {a_note} [{}]; (b) |bgn64-bn64| {:.2} [{}]; (c) spread bgn {:.2} vs bn {:.2} [{}]; \
         bn {:.1}/{:.1}/{:.1} bgn {:.1}/{:.1}/{:.1} at batch 2/8/64; {:.0}s",
        if cifar { "cifar10" } else { "synthetic" },
        ok(a),
        pts((bgn64 - bn64).abs()),
        ok(b),
        pts(spread("bgn")),
        pts(spread("bn")),
        ok(c),
        pts(bn2),
        pts(lookup(&m, "bn", 8)),
        pts(bn64),
        pts(bgn2),
        pts(lookup(&m, "bgn", 8)),
        pts(bgn64),
        started.elapsed().as_secs_f64()
    );
    Outcome {
        pass: a && b && c,
        detail,
        binding: cifar,
    }
}

fn criterion_6(dir: &std::path::Path) -> Outcome {
    let started = Instant::now();
    let (data, cifar) = trend_source();
    let spec = SweepSpec {
        normalizers: vec![NormMethod::BatchGroup],
        batch_sizes: vec![64, 2],
        groups: vec![64, 16, 4, 1],
        seeds: vec![0, 1, 2],
        epochs: 20,
        data,
        ..SweepSpec::default()
    };
    let m = seed_medians(&sweep(dir, "table1.csv", spec));
    let best = |batch: usize| {
        m.iter()
            .filter(|((_, b, _), _)| *b == batch)
            // Ties go to the smaller G.
            .max_by(|x, y| x.1.total_cmp(y.1).then(y.0 .2.cmp(&x.0 .2)))
            .map(|((_, _, g), v)| (*g, *v))
            .unwrap_or((0, 0.0))
    };
    let (g64, a64) = best(64);
    let (g2, a2) = best(2);
    let table: Vec<String> = m.iter().map(|((_, b, g), v)| format!("b{b}/G{g}={:.1}", 100.0 * v)).collect();
    Outcome {
        pass: g64 > g2,
        detail: format!(
            "{} data; best G at batch 64 = {g64} ({:.1}), at batch 2 = {g2} ({:.1}); {}; {:.0}s",
            if cifar { "cifar10" } else { "synthetic" },
            100.0 * a64,
            100.0 * a2,
            table.join(" "),
            started.elapsed().as_secs_f64()
        ),
        binding: cifar,
    }
}

fn criterion_7() -> Outcome {
    let (train_set, test_set) = make_synthetic(&SyntheticSpec {
        train_per_class: 40,
        test_per_class: 25,
        height: 8,
        width: 8,
        ..SyntheticSpec::default()
    })
    .expect("synthetic");
    let mut notes = Vec::new();
    let mut pass = true;
    for method in NormMethod::ALL {
        for batch in [2, 16] {
            let spec = ConvNetSpec::small_net((3, 8, 8), 4, method, GroupChoice::Schedule { batch_size: batch })
                .expect("spec");
            let cfg = TrainConfig {
                batch_size: batch,
                epochs: 2,
                ..TrainConfig::default()
            };
            let model = train::<f32>(&spec, &train_set, &test_set, &cfg).expect("train").model;
            let accs: Vec<f64> = [1, 7, 50]
                .iter()
                .map(|&b| evaluate(&model, &test_set, b).expect("evaluate"))
                .collect();
            if accs.iter().any(|&a| a != accs[0]) {
                pass = false;
                notes.push(format!("{method}@{batch} {accs:?}"));
            }
        }
    }
    Outcome::new(pass, format!("12 models, eval batch 1/7/50 {}", if pass { "identical".into() } else { notes.join(" ") }))
}

fn criterion_8(dir: &std::path::Path) -> Outcome {
    let spec = SweepSpec {
        normalizers: vec![NormMethod::Batch, NormMethod::BatchGroup, NormMethod::Group],
        batch_sizes: vec![4],
        seeds: vec![7],
        epochs: 2,
        data: DataSource::Synthetic(SyntheticSpec {
            train_per_class: 30,
            test_per_class: 10,
            height: 8,
            width: 8,
            ..SyntheticSpec::default()
        }),
        ..SweepSpec::default()
    };
    let strip = |rows: Vec<CsvRow>| -> Vec<CsvRow> {
        rows.into_iter()
            .map(|mut r| {
                r.wall_time_s = None;
                r
            })
            .collect()
    };
    let a = strip(sweep(dir, "det_a.csv", spec.clone()));
    let b = strip(sweep(dir, "det_b.csv", spec));
    let bitwise = a.len() == b.len()
        && a.iter().zip(&b).all(|(x, y)| {
            x == y
                && x.train_loss.map(f64::to_bits) == y.train_loss.map(f64::to_bits)
                && x.test_acc.map(f64::to_bits) == y.test_acc.map(f64::to_bits)
        });
    Outcome::new(bitwise && !a.is_empty(), format!("{} rows compared", a.len()))
}

fn criterion_9() -> Outcome {
    let exe = env!("CARGO_BIN_EXE_normkit");
    let mut codes = Vec::new();
    for variant in BackwardVariant::MUTATIONS {
        let status = Command::new(exe)
            .args(["gradcheck", "--mutation", variant.name()])
            .env("RUST_LOG", "error")
            .output()
            .expect("run normkit");
        codes.push((variant.name(), status.status.code()));
    }
    let exact = Command::new(exe).arg("gradcheck").output().expect("run normkit").status.code();
    let pass = codes.iter().all(|(_, c)| *c == Some(2)) && exact == Some(0);
    Outcome::new(pass, format!("exit codes {codes:?}, unmutated {exact:?}"))
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "miss"
    }
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("tempdir");
    let skip_trends = std::env::var("NORMKIT_SKIP_TRENDS").is_ok_and(|v| v == "1");
    let mut results: Vec<(usize, Option<Outcome>)> = vec![
        (1, Some(criterion_1())),
        (2, Some(criterion_2())),
        (3, Some(criterion_3())),
        (4, Some(criterion_4())),
    ];
    if skip_trends {
        results.push((5, None));
        results.push((6, None));
    } else {
        results.push((5, Some(criterion_5(dir.path()))));
        results.push((6, Some(criterion_6(dir.path()))));
    }
    results.push((7, Some(criterion_7())));
    results.push((8, Some(criterion_8(dir.path()))));
    results.push((9, Some(criterion_9())));

    let mut failed = false;
    for (id, outcome) in &results {
        match outcome {
            None => println!("criterion {id}: SKIP (NORMKIT_SKIP_TRENDS=1)"),
            Some(o) => {
                let tag = match (o.pass, o.binding) {
                    (true, _) => "PASS",
                    (false, true) => "FAIL",
                    (false, false) => "FAIL (reported only, needs NORMKIT_CIFAR_DIR)",
                };
                println!("criterion {id}: {tag} {}", o.detail);
                failed |= !o.pass && o.binding;
            }
        }
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
