use std::fs;

use rcp1::artifact::CalibrationArtifact;
use rcp1::conformal::{calibrate_vanilla, evaluate, predict_sets};
use rcp1::risk::{load_grid, threshold_mask, write_mask, Mask};
use rcp1::scores::{load_score_table, write_score_table, ScoreKind, ScoreTable, TableFormat};
use rcp1::simulate::{beta_coverage_samples, run_coverage_experiment, ExperimentConfig};

#[test]
fn uniform_special_case_passes_ks() {
    let n = 200_000;
    let mut d = beta_coverage_samples(1, 0.5, n, 17).unwrap().samples;
    d.sort_by(f64::total_cmp);
    let ks = d
        .iter()
        .enumerate()
        .map(|(i, x)| (x - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - x).abs()))
        .fold(0.0, f64::max);
    // 1% critical value of the one-sample KS statistic.
    assert!(ks < 1.63 / (n as f64).sqrt(), "D = {ks}");
}

#[test]
fn zero_radius_keeps_clean_coverage() {
    let config = ExperimentConfig {
        radius: 0.0,
        trials: 400,
        n_test: 200,
        seed: 3,
        ..Default::default()
    };
    let s = run_coverage_experiment(&config).unwrap();
    let c = s.rcp1_clean_coverage;
    assert!(c.mean >= 0.9 - 3.0 * c.se, "{c:?}");
    assert_eq!(s.rcp1_clean_coverage, s.vanilla_clean_coverage);
    assert!((s.adjusted_alpha - 0.1).abs() < 1e-15);
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<Vec<f64>> = (0..40)
        .map(|i| (0..4).map(|k| ((i * 7 + k * 3) % 11) as f64 / 3.0 - 1.5).collect())
        .collect();
    let labels: Vec<usize> = (0..40).map(|i| (i * 5) % 4).collect();
    let table = ScoreTable::from_rows(rows, Some(labels)).unwrap();
    for (name, format) in [("s.csv", TableFormat::Csv), ("s.tsv", TableFormat::Tsv)] {
        let path = dir.path().join(name);
        write_score_table(fs::File::create(&path).unwrap(), &table, format).unwrap();
        assert_eq!(TableFormat::from_path(&path), format);
        assert_eq!(load_score_table(&path, format).unwrap(), table);
    }

    let calib = calibrate_vanilla(&table, ScoreKind::Tps, 0.2).unwrap();
    let artifact = CalibrationArtifact::new(calib.clone(), ScoreKind::Tps, 9);
    let path = dir.path().join("cal.rcp1");
    artifact.write(fs::File::create(&path).unwrap()).unwrap();
    let back = CalibrationArtifact::parse(std::io::BufReader::new(fs::File::open(&path).unwrap())).unwrap();
    assert_eq!(back, artifact);

    let sets = predict_sets(&ScoreKind::Tps.apply(&table).unwrap(), &back.result);
    let m = evaluate(&sets, table.labels().unwrap(), &[1, 2]).unwrap();
    assert!(m.coverage >= 0.8 - 1.0 / 41.0);

    let grid_path = dir.path().join("g.csv");
    fs::write(&grid_path, "0.2,0.95,0.6\n0.8,0.1,0.4\n").unwrap();
    let grid = load_grid(&grid_path).unwrap();
    let mask = threshold_mask(&grid, 0.5);
    let mask_path = dir.path().join("m.csv");
    write_mask(fs::File::create(&mask_path).unwrap(), &mask).unwrap();
    assert_eq!(fs::read_to_string(&mask_path).unwrap(), "0,1,1\n1,0,0\n");
    assert_eq!(Mask::from_grid(&load_grid(&mask_path).unwrap()).unwrap(), mask);
}
