use std::fs;

use normkit::data::SyntheticSpec;
use normkit::experiment::{emit_report, read_rows, run_sweep, CsvRow, DataSource, SweepSpec};
use normkit::NormMethod;

fn tiny_spec(out: std::path::PathBuf) -> SweepSpec {
    SweepSpec {
        normalizers: vec![NormMethod::Batch],
        batch_sizes: vec![8],
        seeds: vec![0],
        epochs: 3,
        data: DataSource::Synthetic(SyntheticSpec {
            train_per_class: 16,
            test_per_class: 8,
            height: 8,
            width: 8,
            ..SyntheticSpec::default()
        }),
        output: out,
        ..SweepSpec::default()
    }
}

fn without_time(rows: &[CsvRow]) -> Vec<CsvRow> {
    rows.iter()
        .cloned()
        .map(|mut r| {
            r.wall_time_s = None;
            r
        })
        .collect()
}

#[test]
fn one_run_gives_epoch_rows_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path().join("out.csv"));
    let s = run_sweep(&spec, 1).unwrap();
    assert_eq!(s.executed, 1);
    let rows = read_rows(&spec.output).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().filter(|r| r.is_summary()).count(), 1);
    assert_eq!(rows[3].status, "completed");
    let text = fs::read_to_string(&spec.output).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("run_id,")).count(), 1);
}

#[test]
fn rerun_skips_completed_combinations() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(dir.path().join("out.csv"));
    run_sweep(&spec, 1).unwrap();
    let before = fs::read_to_string(&spec.output).unwrap();
    let again = run_sweep(&spec, 1).unwrap();
    assert_eq!((again.executed, again.resumed), (0, 1));
    assert_eq!(fs::read_to_string(&spec.output).unwrap(), before);

    let wider = SweepSpec {
        seeds: vec![0, 1],
        ..spec.clone()
    };
    let s = run_sweep(&wider, 2).unwrap();
    assert_eq!((s.executed, s.resumed), (1, 1));
    assert_eq!(read_rows(&spec.output).unwrap().len(), 8);
}

#[test]
fn same_seed_gives_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny_spec(dir.path().join("a.csv"));
    let b = tiny_spec(dir.path().join("b.csv"));
    run_sweep(&a, 1).unwrap();
    run_sweep(&b, 1).unwrap();
    assert_eq!(
        without_time(&read_rows(&a.output).unwrap()),
        without_time(&read_rows(&b.output).unwrap())
    );
}

#[test]
fn infeasible_group_count_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SweepSpec {
        normalizers: vec![NormMethod::Group],
        groups: vec![2, 64],
        epochs: 1,
        ..tiny_spec(dir.path().join("out.csv"))
    };
    let s = run_sweep(&spec, 1).unwrap();
    assert_eq!((s.executed, s.skipped), (2, 1));
    let rows = read_rows(&spec.output).unwrap();
    let skipped: Vec<&CsvRow> = rows.iter().filter(|r| r.status == "skipped").collect();
    assert_eq!(skipped.len(), 1);
    assert_eq!(skipped[0].group_count, 64);
}

#[test]
fn diverged_run_is_recorded_and_the_sweep_continues() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SweepSpec {
        normalizers: vec![NormMethod::Layer, NormMethod::Instance],
        lr: normkit::experiment::LrChoice::Fixed(1e30),
        ..tiny_spec(dir.path().join("out.csv"))
    };
    let s = run_sweep(&spec, 1).unwrap();
    assert_eq!((s.executed, s.diverged), (2, 2));
    let md = emit_report(&spec.output).unwrap();
    assert!(md.contains("2 diverged"), "{md}");
}

#[test]
fn report_tables_a_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SweepSpec {
        normalizers: vec![NormMethod::Batch, NormMethod::Layer],
        batch_sizes: vec![8, 4],
        epochs: 1,
        ..tiny_spec(dir.path().join("out.csv"))
    };
    run_sweep(&spec, 2).unwrap();
    let md = emit_report(&spec.output).unwrap();
    assert!(md.contains("| normalizer | 8 | 4 |"), "{md}");
    assert!(md.contains("| bn |") && md.contains("| ln |"), "{md}");
}
