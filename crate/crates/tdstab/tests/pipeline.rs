use tdstab::cases;
use tdstab::estimator::{estimate_window, EstimatorConfig};
use tdstab::indices::BOUNDARY_BAND;
use tdstab::measurement::{
    excitation_points, read_frames, sample_points, write_frames, MeasurementWindow,
};
use tdstab::monitor::assess_latest;
use tdstab::powerflow::SolverOptions;

#[test]
fn csv_round_trip_leaves_estimates_unchanged() {
    let m = cases::unbalanced_chain(2);
    let points = excitation_points(0.6, 20, 0.05, 11);
    let frames = sample_points(&m, &points, &["LD".to_string()], &SolverOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("frames.csv");
    write_frames(&frames, &path).unwrap();
    let back = read_frames(&path).unwrap();
    assert_eq!(back, frames);

    let config = EstimatorConfig::default();
    let a = estimate_window(&MeasurementWindow::new(frames).unwrap(), &config).unwrap();
    let b = estimate_window(&MeasurementWindow::new(back).unwrap(), &config).unwrap();
    assert_eq!(a[0].z_eq_t, b[0].z_eq_t);
    assert_eq!(a[0].z_eq_d, b[0].z_eq_d);
}

#[test]
fn weak_feeder_substation_is_reported_distribution_limited() {
    let m = cases::two_substation(2.8, 1.0);
    let nose = tdstab::powerflow::find_lambda_max(&m).unwrap();
    let at = 0.9 * nose.lambda_max;
    let points = excitation_points(at, 20, 1e-3, 2);
    let frames = sample_points(&m, &points, &m.load_nodes(), &SolverOptions::default()).unwrap();
    let a = assess_latest(&frames, 20, &EstimatorConfig::default(), BOUNDARY_BAND).unwrap();
    let crit = a.report.critical();
    assert!(crit.node.starts_with("A_"), "{}", crit.node);
    assert!(crit.tddi < 0.0);
    assert!(a.report.vsi_t("SA").unwrap() < crit.vsi_3ph);
}
