use proptest::prelude::*;
use recttt_harness::report::{
    sample_std, strip_timing, Record, Report, AVERAGE, CSV_HEADER, MEAN, SCHEMA_VERSION,
};

fn rec(method: &str, corruption: &str, seed: u64, accuracy: f64) -> Record {
    Record {
        method: method.into(),
        setting: "default".into(),
        corruption: corruption.into(),
        severity: 5,
        seed,
        n: 100,
        accuracy,
        aux_before: Some(2.0),
        aux_after: Some(1.5),
        aux_descent_frac: Some(1.0),
        wall_time_s: 0.25 * seed as f64,
    }
}

fn three_seeds() -> Report {
    let mut r = Vec::new();
    for (s, (a, b)) in [(50.0, 70.0), (60.0, 80.0), (55.0, 90.0)]
        .into_iter()
        .enumerate()
    {
        r.push(rec("recttt", "contrast", s as u64, a));
        r.push(rec("recttt", "pixelate", s as u64, b));
    }
    Report::new("h", r)
}

#[test]
fn csv_header_matches_golden_file() {
    let golden = include_str!("golden/report_header.csv");
    let csv = three_seeds().to_csv().unwrap();
    assert_eq!(csv.lines().next().unwrap(), golden.trim_end());
    assert_eq!(golden.trim_end().split(',').collect::<Vec<_>>(), CSV_HEADER);
}

#[test]
fn mean_rows_carry_sample_std() {
    let r = three_seeds();
    let contrast = r
        .rows
        .iter()
        .find(|x| x.corruption == "contrast" && x.seed == MEAN)
        .unwrap();
    assert_eq!(contrast.accuracy, 55.0);
    // Sample std of {50, 60, 55} is 5.
    assert!((contrast.accuracy_std.unwrap() - 5.0).abs() < 1e-12);

    // Per-seed suite averages are 60, 70, 72.5.
    let avg = r
        .rows
        .iter()
        .find(|x| x.corruption == AVERAGE && x.seed == MEAN)
        .unwrap();
    assert!((avg.accuracy - 67.5).abs() < 1e-12);
    let want = ((7.5f64.powi(2) + 2.5f64.powi(2) + 5.0f64.powi(2)) / 2.0).sqrt();
    assert!((avg.accuracy_std.unwrap() - want).abs() < 1e-12);
    assert_eq!(r.mean_accuracy("recttt", "default", AVERAGE), Some(67.5));
}

#[test]
fn row_layout() {
    let r = three_seeds();
    // Per corruption: 3 seed rows + mean; then 3 seed averages + mean.
    assert_eq!(r.rows.len(), 2 * 4 + 4);
    let csv = r.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 1 + r.rows.len());
    let single = Report::new("h", vec![rec("ptbn", "contrast", 0, 40.0)]);
    assert!(single.rows.iter().all(|x| x.accuracy_std.is_none()));
    // Empty std cell on single-seed mean rows.
    assert!(single
        .to_csv()
        .unwrap()
        .lines()
        .nth(2)
        .unwrap()
        .contains(",40.0000,,"));
}

#[test]
fn json_carries_schema_and_hash() {
    let v: serde_json::Value = serde_json::from_str(&three_seeds().to_json()).unwrap();
    assert_eq!(v["schema_version"], SCHEMA_VERSION);
    assert_eq!(v["config_hash"], "h");
}

#[test]
fn strip_timing_only_removes_wall_time() {
    let a = three_seeds();
    let mut b = three_seeds();
    for r in &mut b.records {
        r.wall_time_s += 3.0;
    }
    b = Report::new("h", b.records);
    let mut va: serde_json::Value = serde_json::from_str(&a.to_json()).unwrap();
    let mut vb: serde_json::Value = serde_json::from_str(&b.to_json()).unwrap();
    assert_ne!(va, vb);
    strip_timing(&mut va);
    strip_timing(&mut vb);
    assert_eq!(va, vb);
    assert!(va["rows"][0].get("accuracy").is_some());
}

#[test]
fn sample_std_oracle() {
    assert_eq!(sample_std(&[1.0]), None);
    assert_eq!(sample_std(&[2.0, 4.0]), Some(2f64.sqrt()));
}

proptest! {
    #[test]
    fn aggregates_stay_in_range(accs in prop::collection::vec(0.0f64..=100.0, 1..12)) {
        let records: Vec<Record> = accs
            .iter()
            .enumerate()
            .map(|(i, &a)| rec("recttt", if i % 2 == 0 { "contrast" } else { "blur" }, (i / 2) as u64, a))
            .collect();
        let r = Report::new("h", records);
        for row in &r.rows {
            prop_assert!((0.0..=100.0 + 1e-9).contains(&row.accuracy));
            if let Some(s) = row.accuracy_std {
                prop_assert!(s >= 0.0);
            }
        }
    }
}
