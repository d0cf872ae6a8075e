use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use normkit::checkpoint;
use normkit::experiment::{
    append_rows, emit_report, execute_run, history_rows, run_sweep, thread_budget, DataSource, LrChoice, RunSpec,
    SweepSpec,
};
use normkit::gradcheck::{check_norm_layer, standard_cases, NormCheck, DEFAULT_TOLERANCE};
use normkit::model::train;
use normkit::norm::BackwardVariant;
use normkit::{NormMethod, Precision, Real};

#[derive(Parser)]
#[command(name = "normkit", version, about = "Feature-map normalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every normalizer's backward pass.
    Gradcheck {
        /// `all` or one of bn, in, ln, gn, pn, bgn.
        #[arg(long, default_value = "all")]
        kind: String,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        mutation: Option<BackwardVariant>,
    },
    /// Train one network and write its per-epoch CSV rows.
    Train {
        #[arg(long)]
        norm: NormMethod,
        /// Group count for gn/bgn; defaults to the schedule.
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long)]
        batch_size: usize,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value = "auto")]
        lr: LrChoice,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// `synthetic` or `cifar10:<dir>`.
        #[arg(long, default_value = "synthetic")]
        data: DataSource,
        /// Training images to use; the test split gets a fifth as many.
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "f32")]
        precision: Precision,
    },
    /// Run a grid of trainings, resuming an existing CSV.
    Sweep {
        /// File of `key = value` lines.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Extra `key=value` settings applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise a results CSV as a markdown table.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> normkit::Result<ExitCode> {
    match command {
        Command::Gradcheck {
            kind,
            tol,
            seed,
            mutation,
        } => gradcheck(&kind, tol, seed, mutation.unwrap_or(BackwardVariant::Exact)),
        Command::Train {
            norm,
            groups,
            batch_size,
            epochs,
            lr,
            seed,
            workers,
            data,
            subset,
            out,
            checkpoint,
            precision,
        } => {
            let data = match subset {
                Some(n) => data.with_subset(n),
                None => data,
            };
            let run = RunSpec {
                method: norm,
                batch_size,
                groups,
                seed,
                epochs,
                worker_shards: workers,
                lr,
                precision,
                data,
                data_seed: 0,
            };
            match precision {
                Precision::Single => train_one::<f32>(&run, out.as_deref(), checkpoint.as_deref())?,
                Precision::Double => train_one::<f64>(&run, out.as_deref(), checkpoint.as_deref())?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { spec, set, out } => {
            let mut sweep = match &spec {
                Some(path) => SweepSpec::parse(&fs::read_to_string(path)?)?,
                None => SweepSpec::default(),
            };
            let pairs = set
                .iter()
                .map(|kv| {
                    kv.split_once('=')
                        .map(|(k, v)| (k.trim(), v.trim()))
                        .ok_or_else(|| normkit::Error::Config(format!("expected KEY=VALUE, got {kv:?}")))
                })
                .collect::<normkit::Result<Vec<_>>>()?;
            sweep = sweep.with_overrides(pairs)?;
            if let Some(out) = out {
                sweep.output = out;
            }
            let summary = run_sweep(&sweep, thread_budget())?;
            println!(
                "{} runs executed ({} skipped, {} diverged), {} already in {}",
                summary.executed,
                summary.skipped,
                summary.diverged,
                summary.resumed,
                sweep.output.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { input, out } => {
            let md = emit_report(&input)?;
            match out {
                Some(path) => fs::write(path, md)?,
                None => print!("{md}"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn gradcheck(kind: &str, tol: f64, seed: u64, variant: BackwardVariant) -> normkit::Result<ExitCode> {
    let methods: Vec<NormMethod> = if kind == "all" {
        NormMethod::ALL.to_vec()
    } else {
        vec![kind.parse()?]
    };
    let mut failures = 0;
    let mut total = 0;
    for method in methods {
        for (i, (kind, shape)) in standard_cases(method).into_iter().enumerate() {
            let cfg = NormCheck {
                tolerance: tol,
                seed: seed.wrapping_add(i as u64),
                variant,
                ..NormCheck::default()
            };
            let report = check_norm_layer(kind, shape, cfg)?;
            println!("{report}");
            total += 1;
            if !report.pass {
                failures += 1;
            }
        }
    }
    println!("{} of {total} checks passed", total - failures);
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn train_one<T: Real>(run: &RunSpec, out: Option<&Path>, ckpt: Option<&Path>) -> normkit::Result<()> {
    let (train_set, test_set) = run.data.load(run.data_seed)?;
    if ckpt.is_none() {
        let rows = execute_run(run, &(train_set, test_set))?;
        return report_rows(&rows, out);
    }
    let s = train_set.sample_shape();
    let net = run.net_spec((s.c, s.h, s.w), train_set.classes)?;
    let outcome = train::<T>(&net, &train_set, &test_set, &run.train_config())?;
    if let Some(path) = ckpt {
        checkpoint::save(&outcome.model, path)?;
    }
    report_rows(&history_rows(run, &outcome.history), out)
}

fn report_rows(rows: &[normkit::experiment::CsvRow], out: Option<&Path>) -> normkit::Result<()> {
    for r in rows {
        println!(
            "{:>5}  loss {}  train {}  test {}  [{}]",
            r.epoch,
            fmt_opt(r.train_loss),
            fmt_opt(r.train_acc),
            fmt_opt(r.test_acc),
            r.status
        );
    }
    if let Some(path) = out {
        append_rows(path, rows)?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}
