//! Sweeps over normalizer x batch size x group count x seed, their CSV
//! results, and markdown summaries of those results.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::data::{load_cifar10, standardize, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{train, ConvNetSpec, GroupChoice, RunStatus, TrainConfig, TrainHistory};
use crate::norm::{select_group_count, NormMethod};
use crate::tensor::Precision;

pub const CSV_HEADER: [&str; 12] = [
    "run_id",
    "normalizer",
    "batch_size",
    "group_count",
    "worker_shards",
    "seed",
    "epoch",
    "train_loss",
    "train_acc",
    "test_acc",
    "wall_time_s",
    "status",
];

/// `epoch` value of a run's summary row.
pub const SUMMARY_EPOCH: &str = "final";

/// Environment variable capping sweep parallelism.
pub const THREADS_ENV: &str = "NORMKIT_THREADS";

/// Synthetic stand-in used when no CIFAR-10 archive is given: 4 texture
/// classes at 8x8 with per-image brightness/contrast jitter.
pub fn desk_synthetic() -> SyntheticSpec {
    SyntheticSpec {
        classes: 4,
        train_per_class: 250,
        test_per_class: 100,
        channels: 3,
        height: 8,
        width: 8,
        seed: 0,
        difficulty: 3.0,
        nuisance: 1.5,
    }
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Class-balanced seeded subset of the CIFAR-10 archive in `dir`.
    Cifar10 {
        dir: PathBuf,
        train_subset: usize,
        test_subset: usize,
    },
}

impl DataSource {
    pub fn cifar10(dir: impl Into<PathBuf>) -> Self {
        DataSource::Cifar10 {
            dir: dir.into(),
            train_subset: 5000,
            test_subset: 1000,
        }
    }

    /// Loads and standardizes `(train, test)`. The subset choice depends on
    /// `data_seed` only, so every run of a sweep sees the same images.
    pub fn load(&self, data_seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synthetic(spec) => crate::data::make_synthetic(&SyntheticSpec { seed: data_seed, ..*spec }),
            DataSource::Cifar10 {
                dir,
                train_subset,
                test_subset,
            } => {
                let (train, test) = load_cifar10(dir)?;
                let mut train = train.balanced_subset(*train_subset, data_seed)?;
                let mut test = test.balanced_subset(*test_subset, data_seed.wrapping_add(1))?;
                standardize(&mut train, &mut test);
                Ok((train, test))
            }
        }
    }

    /// Applies a train-subset size; the test subset is a fifth of it.
    pub fn with_subset(self, n: usize) -> Self {
        match self {
            DataSource::Synthetic(spec) => {
                let per = (n / spec.classes).max(1);
                DataSource::Synthetic(SyntheticSpec {
                    train_per_class: per,
                    test_per_class: (per / 5).max(1),
                    ..spec
                })
            }
            DataSource::Cifar10 { dir, .. } => DataSource::Cifar10 {
                dir,
                train_subset: n,
                test_subset: (n / 5).max(1),
            },
        }
    }

    fn label(&self) -> String {
        match self {
            DataSource::Synthetic(s) => format!(
                "synthetic:{}x{}x{}x{}:{}:{}:{}:{}",
                s.classes, s.channels, s.height, s.width, s.train_per_class, s.test_per_class, s.difficulty, s.nuisance
            ),
            DataSource::Cifar10 {
                dir,
                train_subset,
                test_subset,
            } => format!("cifar10:{}:{train_subset}:{test_subset}", dir.display()),
        }
    }
}

impl FromStr for DataSource {
    type Err = Error;

    /// `synthetic` or `cifar10:<dir>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "synthetic" {
            Ok(DataSource::Synthetic(desk_synthetic()))
        } else if let Some(dir) = s.strip_prefix("cifar10:") {
            Ok(DataSource::cifar10(dir))
        } else {
            Err(Error::Config(format!("unknown data source {s:?}")))
        }
    }
}

/// Learning-rate choice: the linear scaling rule or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrChoice {
    Auto,
    Fixed(f64),
}

impl FromStr for LrChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(LrChoice::Auto);
        }
        s.parse::<f64>()
            .ok()
            .filter(|v| *v > 0.0 && v.is_finite())
            .map(LrChoice::Fixed)
            .ok_or_else(|| Error::Config(format!("learning rate {s:?} is neither 'auto' nor a positive number")))
    }
}

/// One training run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub method: NormMethod,
    pub batch_size: usize,
    /// `None` follows the group-count schedule.
    pub groups: Option<usize>,
    pub seed: u64,
    pub epochs: usize,
    pub worker_shards: usize,
    pub lr: LrChoice,
    pub precision: Precision,
    pub data: DataSource,
    pub data_seed: u64,
}

impl RunSpec {
    /// Group count written to the CSV: the fixed `G`, the schedule's value
    /// for GN/BGN, or 1 for methods without groups.
    pub fn group_count(&self) -> usize {
        match (self.method.takes_groups(), self.groups) {
            (false, _) => 1,
            (true, Some(g)) => g,
            (true, None) => select_group_count(self.method, self.batch_size, usize::MAX, usize::MAX),
        }
    }

    /// Stable identifier of the run's full configuration (FNV-1a, hex).
    pub fn run_id(&self) -> String {
        let key = format!(
            "{}|{}|{:?}|{}|{}|{}|{:?}|{}|{}|{}",
            self.method,
            self.batch_size,
            self.groups,
            self.seed,
            self.epochs,
            self.worker_shards,
            self.lr,
            self.precision,
            self.data.label(),
            self.data_seed
        );
        format!("{:016x}", fnv1a(key.as_bytes()))
    }

    pub fn group_choice(&self) -> GroupChoice {
        match self.groups {
            Some(g) => GroupChoice::Fixed(g),
            None => GroupChoice::Schedule {
                batch_size: self.batch_size,
            },
        }
    }

    pub fn net_spec(&self, input: (usize, usize, usize), classes: usize) -> Result<ConvNetSpec> {
        ConvNetSpec::small_net(input, classes, self.method, self.group_choice())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            base_lr: match self.lr {
                LrChoice::Auto => None,
                LrChoice::Fixed(v) => Some(v),
            },
            seed: self.seed,
            worker_shards: self.worker_shards,
            ..TrainConfig::default()
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// A grid of runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub normalizers: Vec<NormMethod>,
    pub batch_sizes: Vec<usize>,
    /// Group counts tried for GN/BGN; empty means "follow the schedule".
    pub groups: Vec<usize>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub worker_shards: usize,
    pub lr: LrChoice,
    pub precision: Precision,
    pub data: DataSource,
    pub data_seed: u64,
    pub output: PathBuf,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            normalizers: NormMethod::ALL.to_vec(),
            batch_sizes: vec![64, 32, 16, 8, 4, 2],
            groups: Vec::new(),
            seeds: vec![0],
            epochs: 20,
            worker_shards: 1,
            lr: LrChoice::Auto,
            precision: Precision::Single,
            data: DataSource::Synthetic(desk_synthetic()),
            data_seed: 0,
            output: PathBuf::from("sweep.csv"),
        }
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| Error::Config(format!("bad value {s:?} for {key}"))))
        .collect()
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl SweepSpec {
    /// Parses `key = value` lines (`#` starts a comment). Keys:
    /// `normalizers`, `batch_sizes`, `groups` (list or `schedule`), `seeds`,
    /// `epochs`, `workers`, `lr` (`auto` or a number), `precision`,
    /// `data` (`synthetic` or `cifar10:<dir>`), `subset`, `data_seed`, `out`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SweepSpec::default();
        let mut subset = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            spec.apply(key.trim(), value.trim(), &mut subset)?;
        }
        if let Some(n) = subset {
            spec.data = spec.data.with_subset(n);
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Applies `key=value` overrides, e.g. from repeated CLI flags.
    pub fn with_overrides<'a>(mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut subset = None;
        for (k, v) in pairs {
            self.apply(k, v, &mut subset)?;
        }
        if let Some(n) = subset {
            self.data = self.data.with_subset(n);
        }
        self.validate()?;
        Ok(self)
    }

    fn apply(&mut self, key: &str, value: &str, subset: &mut Option<usize>) -> Result<()> {
        match key {
            "normalizers" | "norms" => {
                self.normalizers = if value.trim() == "all" {
                    NormMethod::ALL.to_vec()
                } else {
                    parse_list(key, value)?
                }
            }
            "batch_sizes" | "batches" => self.batch_sizes = parse_list(key, value)?,
            "groups" => {
                self.groups = if value.trim() == "schedule" {
                    Vec::new()
                } else {
                    parse_list(key, value)?
                }
            }
            "seeds" => self.seeds = parse_list(key, value)?,
            "epochs" => self.epochs = parse_one(key, value)?,
            "workers" | "worker_shards" => self.worker_shards = parse_one(key, value)?,
            "lr" => self.lr = value.trim().parse()?,
            "precision" => self.precision = value.trim().parse()?,
            "data" => self.data = value.trim().parse()?,
            "subset" => *subset = Some(parse_one(key, value)?),
            "data_seed" => self.data_seed = parse_one(key, value)?,
            "out" | "output" => self.output = PathBuf::from(value.trim()),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.normalizers.is_empty() || self.batch_sizes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("normalizers, batch_sizes and seeds must be non-empty".into()));
        }
        if self.batch_sizes.contains(&0) || self.groups.contains(&0) || self.worker_shards == 0 {
            return Err(Error::Config("batch sizes, group counts and workers must be >= 1".into()));
        }
        Ok(())
    }

    /// Every (normalizer, batch, G, seed) combination, each exactly once.
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut runs = Vec::new();
        let mut seen = HashSet::new();
        for &method in &self.normalizers {
            let groups: Vec<Option<usize>> = if method.takes_groups() && !self.groups.is_empty() {
                self.groups.iter().map(|&g| Some(g)).collect()
            } else {
                vec![None]
            };
            for &batch_size in &self.batch_sizes {
                for &g in &groups {
                    for &seed in &self.seeds {
                        let run = RunSpec {
                            method,
                            batch_size,
                            groups: g,
                            seed,
                            epochs: self.epochs,
                            worker_shards: self.worker_shards,
                            lr: self.lr,
                            precision: self.precision,
                            data: self.data.clone(),
                            data_seed: self.data_seed,
                        };
                        if seen.insert(run.run_id()) {
                            runs.push(run);
                        }
                    }
                }
            }
        }
        runs
    }
}

/// One CSV line; per-epoch rows and summary rows share the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub run_id: String,
    pub normalizer: String,
    pub batch_size: usize,
    pub group_count: usize,
    pub worker_shards: usize,
    pub seed: u64,
    /// Epoch index, or [`SUMMARY_EPOCH`] for the median-of-last-5 row.
    pub epoch: String,
    pub train_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub wall_time_s: Option<f64>,
    /// `ok` for epoch rows; `completed`, `diverged` or `skipped` for summaries.
    pub status: String,
}

impl CsvRow {
    pub fn is_summary(&self) -> bool {
        self.epoch == SUMMARY_EPOCH
    }
}

/// CSV rows for a finished run: one per epoch plus a summary row whose
/// `test_acc` is the median of the last five epochs.
pub fn history_rows(run: &RunSpec, history: &TrainHistory) -> Vec<CsvRow> {
    let base = |epoch: String, status: &str| CsvRow {
        run_id: run.run_id(),
        normalizer: run.method.name().to_string(),
        batch_size: run.batch_size,
        group_count: run.group_count(),
        worker_shards: run.worker_shards,
        seed: run.seed,
        epoch,
        train_loss: None,
        train_acc: None,
        test_acc: None,
        wall_time_s: None,
        status: status.to_string(),
    };
    let mut rows: Vec<CsvRow> = history
        .epochs
        .iter()
        .map(|e| CsvRow {
            train_loss: Some(e.train_loss),
            train_acc: Some(e.train_acc),
            test_acc: Some(e.test_acc),
            wall_time_s: Some(e.wall_time_s),
            ..base(e.epoch.to_string(), "ok")
        })
        .collect();
    let status = match history.status {
        RunStatus::Completed => "completed",
        RunStatus::Diverged { .. } => "diverged",
    };
    let last = history.epochs.last();
    rows.push(CsvRow {
        train_loss: last.map(|e| e.train_loss),
        train_acc: last.map(|e| e.train_acc),
        test_acc: history.final_metric(),
        wall_time_s: Some(history.epochs.iter().map(|e| e.wall_time_s).sum()),
        ..base(SUMMARY_EPOCH.to_string(), status)
    });
    rows
}

/// Loads the run's data, trains, and returns its CSV rows. Configurations
/// the network cannot express (e.g. `G > C` for GN) yield a single
/// `skipped` summary row.
pub fn execute_run(run: &RunSpec, data: &(Dataset, Dataset)) -> Result<Vec<CsvRow>> {
    let (train_set, test_set) = data;
    let s = train_set.sample_shape();
    let net = match run.net_spec((s.c, s.h, s.w), train_set.classes) {
        Ok(n) => n,
        Err(e @ (Error::GroupCountExceedsDimension { .. } | Error::InvalidGroupCount(_))) => {
            log::warn!("skipping {} batch {} G {:?}: {e}", run.method, run.batch_size, run.groups);
            let mut row = history_rows(
                run,
                &TrainHistory {
                    epochs: Vec::new(),
                    status: RunStatus::Completed,
                },
            )
            .pop()
            .expect("summary row");
            row.status = "skipped".into();
            row.wall_time_s = None;
            return Ok(vec![row]);
        }
        Err(e) => return Err(e),
    };
    let cfg = run.train_config();
    let history = match run.precision {
        Precision::Single => train::<f32>(&net, train_set, test_set, &cfg)?.history,
        Precision::Double => train::<f64>(&net, train_set, test_set, &cfg)?.history,
    };
    Ok(history_rows(run, &history))
}

pub fn read_rows(path: &Path) -> Result<Vec<CsvRow>> {
    let text = fs::read_to_string(path)?;
    parse_rows(&text)
}

/// Parses CSV text with the fixed header.
pub fn parse_rows(text: &str) -> Result<Vec<CsvRow>> {
    if text.trim().is_empty() {
        return Err(Error::MalformedCsv("empty file".into()));
    }
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::MalformedCsv(e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::MalformedCsv(format!("unexpected header {header:?}")));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e: csv::Error| Error::MalformedCsv(e.to_string())))
        .collect()
}

pub fn append_rows(path: &Path, rows: &[CsvRow]) -> Result<()> {
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(CSV_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Worker threads for a sweep: `NORMKIT_THREADS` if set, else the machine's
/// available parallelism.
pub fn thread_budget() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Outcome counts of a sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepSummary {
    pub executed: usize,
    pub resumed: usize,
    pub skipped: usize,
    pub diverged: usize,
}

/// Runs every combination not already summarised in `spec.output`,
/// appending rows as runs finish. Runs execute on up to `threads` worker
/// threads; one writer serialises CSV appends.
pub fn run_sweep(spec: &SweepSpec, threads: usize) -> Result<SweepSummary> {
    spec.validate()?;
    let done: HashSet<String> = if spec.output.exists() && fs::metadata(&spec.output)?.len() > 0 {
        read_rows(&spec.output)?
            .into_iter()
            .filter(CsvRow::is_summary)
            .map(|r| r.run_id)
            .collect()
    } else {
        HashSet::new()
    };
    let runs = spec.runs();
    let pending: Vec<&RunSpec> = runs.iter().filter(|r| !done.contains(&r.run_id())).collect();
    let mut summary = SweepSummary {
        resumed: runs.len() - pending.len(),
        ..SweepSummary::default()
    };
    if pending.is_empty() {
        return Ok(summary);
    }
    let data = spec.data.load(spec.data_seed)?;
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<Result<Vec<CsvRow>>>();
    let workers = threads.clamp(1, pending.len());
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, pending, data) = (&next, &pending, &data);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(run) = pending.get(i) else { break };
                log::info!(
                    "run {} {} batch {} G {} seed {}",
                    run.run_id(),
                    run.method,
                    run.batch_size,
                    run.group_count(),
                    run.seed
                );
                if tx.send(execute_run(run, data)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut first_err = None;
        for result in rx {
            match result {
                Ok(rows) => {
                    let status = rows.last().map(|r| r.status.clone()).unwrap_or_default();
                    match status.as_str() {
                        "skipped" => summary.skipped += 1,
                        "diverged" => summary.diverged += 1,
                        _ => {}
                    }
                    summary.executed += 1;
                    append_rows(&spec.output, &rows)?;
                }
                Err(e) => {
                    // Stop handing out work; finish what is in flight.
                    next.store(usize::MAX / 2, Ordering::Relaxed);
                    first_err.get_or_insert(e);
                }
            }
        }
        first_err.map_or(Ok(()), Err)
    })?;
    Ok(summary)
}

/// Median over seeds of the summary metric, keyed by
/// `(normalizer label, batch size)`.
pub type SummaryTable = BTreeMap<(String, usize), f64>;

/// Collects summary rows into a table. A normalizer swept over several
/// group counts at the same batch size gets one row per `G`.
pub fn summarize(rows: &[CsvRow]) -> SummaryTable {
    let summaries: Vec<&CsvRow> = rows
        .iter()
        .filter(|r| r.is_summary() && r.status == "completed")
        .collect();
    let mut multi_g: BTreeMap<(&str, usize), BTreeSet<usize>> = BTreeMap::new();
    for r in &summaries {
        multi_g
            .entry((r.normalizer.as_str(), r.batch_size))
            .or_default()
            .insert(r.group_count);
    }
    let split: BTreeSet<&str> = multi_g
        .iter()
        .filter(|(_, gs)| gs.len() > 1)
        .map(|((n, _), _)| *n)
        .collect();
    let mut cells: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in summaries {
        let Some(acc) = r.test_acc else { continue };
        let label = if split.contains(r.normalizer.as_str()) {
            format!("{} G={}", r.normalizer, r.group_count)
        } else {
            r.normalizer.clone()
        };
        cells.entry((label, r.batch_size)).or_default().push(acc);
    }
    cells
        .into_iter()
        .filter_map(|(k, v)| crate::model::median(&v).map(|m| (k, m)))
        .collect()
}

/// Markdown report: accuracy (%) per normalizer and batch size, plus notes
/// on BN's small-batch degradation when the data shows it.
pub fn emit_report(csv_path: &Path) -> Result<String> {
    let rows = read_rows(csv_path)?;
    if rows.is_empty() {
        return Err(Error::MalformedCsv("no rows".into()));
    }
    Ok(render_report(&rows))
}

pub fn render_report(rows: &[CsvRow]) -> String {
    let table = summarize(rows);
    let mut batches: Vec<usize> = table.keys().map(|(_, b)| *b).collect::<BTreeSet<_>>().into_iter().collect();
    batches.sort_unstable_by(|a, b| b.cmp(a));
    let labels: BTreeSet<&String> = table.keys().map(|(l, _)| l).collect();

    let mut out = String::new();
    let _ = writeln!(out, "# Normalizer sweep\n");
    let runs = rows.iter().filter(|r| r.is_summary()).count();
    let diverged = rows.iter().filter(|r| r.is_summary() && r.status == "diverged").count();
    let skipped = rows.iter().filter(|r| r.is_summary() && r.status == "skipped").count();
    let _ = writeln!(
        out,
        "{runs} runs ({diverged} diverged, {skipped} skipped). Cells: median over seeds of the median test accuracy of the last five epochs (%).\n"
    );
    if table.is_empty() {
        let _ = writeln!(out, "No completed runs.");
        return out;
    }
    let _ = write!(out, "| normalizer |");
    for b in &batches {
        let _ = write!(out, " {b} |");
    }
    let _ = write!(out, "\n|---|");
    for _ in &batches {
        let _ = write!(out, "---:|");
    }
    out.push('\n');
    for label in &labels {
        let _ = write!(out, "| {label} |");
        for b in &batches {
            match table.get(&((*label).clone(), *b)) {
                Some(v) => {
                    let _ = write!(out, " {:.2} |", 100.0 * v);
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }

    if batches.len() >= 2 {
        let (large, small) = (batches[0], batches[batches.len() - 1]);
        let bn = |b| table.get(&("bn".to_string(), b)).copied();
        if let (Some(hi), Some(lo)) = (bn(large), bn(small)) {
            let drop = 100.0 * (hi - lo);
            out.push('\n');
            if drop > 2.0 {
                let _ = writeln!(
                    out,
                    "BN degrades at small batch sizes: {:.2} at batch {large} vs {:.2} at batch {small} ({drop:.2} points).",
                    100.0 * hi,
                    100.0 * lo
                );
            } else {
                let _ = writeln!(out, "No BN small-batch degradation beyond 2 points ({drop:.2}).");
            }
        }
    }
    out
}
