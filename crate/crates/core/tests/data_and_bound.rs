use std::fs;

use afmvc::bound::{read_bound_report, sweep, theorem_bound, write_bound_report};
use afmvc::cluster::{kmeans, kmeans_plus_plus, lloyd, read_assignments_csv, write_assignments_csv};
use afmvc::data::{
    load_dataset, seeded_rng, subsample, synthesize_sensitive, write_dataset, DatasetManifest,
    MultiViewDataset, SensitiveSource,
};
use afmvc::synth::{gaussian_blobs, two_view_blobs, BlobSpec};
use afmvc::Error;
use ndarray::array;

fn tiny() -> MultiViewDataset {
    MultiViewDataset::new(
        "tiny",
        vec![
            array![[0.1, 1.0 / 3.0], [2.5e-300, -7.0], [1e10, 0.0]],
            array![[1.0], [2.0], [3.0]],
        ],
        Some(vec![0, 1, 1]),
        vec![1, 0, 1],
    )
    .unwrap()
}

#[test]
fn dataset_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny();
    write_dataset(&data, dir.path(), 2).unwrap();
    let manifest = DatasetManifest::from_path(dir.path().join("manifest.toml")).unwrap();
    let loaded = load_dataset(&manifest).unwrap();
    assert_eq!(loaded.views, data.views);
    assert_eq!(loaded.labels, data.labels);
    assert_eq!(loaded.sensitive, data.sensitive);
}

#[test]
fn ragged_and_non_numeric_rows_report_position() {
    let dir = tempfile::tempdir().unwrap();
    let view = dir.path().join("v.csv");
    fs::write(&view, "1,2\n3,x\n").unwrap();
    fs::write(dir.path().join("s.csv"), "0\n1\n").unwrap();
    let text = "view_paths = [\"v.csv\"]\nsensitive_path = \"s.csv\"\nk = 2\n";
    fs::write(dir.path().join("m.toml"), text).unwrap();
    let manifest = DatasetManifest::from_path(dir.path().join("m.toml")).unwrap();
    match load_dataset(&manifest) {
        Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (2, 2)),
        other => panic!("expected parse error, got {other:?}"),
    }
    fs::write(&view, "1,2\n3\n").unwrap();
    assert!(load_dataset(&manifest).is_err());
}

#[test]
fn mismatched_view_lengths_are_structural() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.csv"), "1\n2\n3\n").unwrap();
    fs::write(dir.path().join("b.csv"), "1\n2\n").unwrap();
    fs::write(dir.path().join("s.csv"), "0\n1\n0\n").unwrap();
    let text = "view_paths = [\"a.csv\", \"b.csv\"]\nsensitive_path = \"s.csv\"\nk = 2\n";
    fs::write(dir.path().join("m.toml"), text).unwrap();
    let manifest = DatasetManifest::from_path(dir.path().join("m.toml")).unwrap();
    assert!(matches!(load_dataset(&manifest), Err(Error::Structural(_))));
}

#[test]
fn manifest_rejects_missing_fields() {
    assert!(DatasetManifest::from_toml_str("k = 2\n").is_err());
    assert!(DatasetManifest::from_toml_str("view_paths = [\"a.csv\"]\nk = 2\n").is_err());
    let m = DatasetManifest::from_toml_str(
        "view_paths = [\"a.csv\"]\nk = 3\nsensitive_source = \"synthetic\"\nbernoulli_p = 0.3\n",
    )
    .unwrap();
    assert_eq!(m.sensitive_source, SensitiveSource::Synthetic);
    assert!(m.standardize);
}

#[test]
fn subsample_is_deterministic_and_ordered() {
    let data = two_view_blobs(&BlobSpec {
        n: 200,
        ..BlobSpec::default()
    })
    .unwrap();
    let a = subsample(&data, 50, 9).unwrap();
    let b = subsample(&data, 50, 9).unwrap();
    assert_eq!(a.views, b.views);
    assert_eq!(a.n_samples(), 50);
    assert_ne!(subsample(&data, 50, 10).unwrap().views, a.views);
    assert!(subsample(&data, 201, 0).is_err());
}

#[test]
fn synthetic_groups_follow_bernoulli_rate() {
    let p = 0.3;
    let mut total = 0.0;
    for seed in 0..100 {
        let s = synthesize_sensitive(500, p, seed).unwrap();
        total += s.iter().filter(|&&g| g == 1).count() as f64 / 500.0;
    }
    // standard error of the mean fraction is about 0.002
    assert!((total / 100.0 - p).abs() < 0.01);
}

#[test]
fn lloyd_inertia_never_increases() {
    for seed in 0..5 {
        let (x, _) = gaussian_blobs(&BlobSpec {
            n: 300,
            k: 5,
            dim: 3,
            separation: 2.0,
            spread: 1.5,
            seed,
        })
        .unwrap();
        let init = kmeans_plus_plus(&x, 5, &mut seeded_rng(seed));
        let run = lloyd(&x, init, 300);
        for w in run.inertia_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", run.inertia_history);
        }
    }
}

#[test]
fn kmeans_recovers_separated_blobs() {
    let (x, truth) = gaussian_blobs(&BlobSpec::default()).unwrap();
    let r = kmeans(&x, 4, 0).unwrap();
    assert_eq!(afmvc::metrics::accuracy(&r.labels, &truth).unwrap(), 1.0);
    assert_eq!(kmeans(&x, 4, 0).unwrap(), r);
}

#[test]
fn assignments_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("assignments.csv");
    write_assignments_csv(&path, &[2, 0, 1, 1]).unwrap();
    assert!(fs::read_to_string(&path).unwrap().starts_with("instance_index,cluster_id"));
    assert_eq!(read_assignments_csv(&path).unwrap(), vec![2, 0, 1, 1]);
}

#[test]
fn sweep_rows_and_report() {
    let eps = [0.2, 0.05, 0.01];
    let rows = sweep(2, 2, &eps, 500, 3).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].max_i <= w[0].max_i * 1.05);
    }
    for r in &rows {
        assert_eq!(r.pinsker_pass_rate, 1.0);
        assert_eq!(r.leading_term, theorem_bound(r.epsilon).unwrap().leading_term);
    }
    assert_eq!(sweep(2, 2, &eps, 500, 3).unwrap(), rows);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bound_report.csv");
    write_bound_report(&path, &rows).unwrap();
    assert_eq!(read_bound_report(&path).unwrap(), rows);
    assert!(matches!(sweep(2, 2, &[0.0], 10, 0), Err(Error::Domain(_))));
}
