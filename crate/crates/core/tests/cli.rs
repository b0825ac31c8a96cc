use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dbhmap::cli::{ReportFile, RunManifest};
use dbhmap::dbh::{estimate_trees, EstimateRecord, EstimateStatus, EstimationConfig, MethodChain, TreeRecord};
use dbhmap::dtm::{build_dtm, DtmConfig};
use dbhmap::geom::{PointCloud, RigidTransform, Vector};
use dbhmap::io::{load_cloud, read_json, write_json, write_poses, CloudFormat};
use dbhmap::metrics::compute_metrics;
use dbhmap::synth::{Clutter, GroundPlane, SceneSpec, StemSpec};

fn dbhmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dbhmap")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = dbhmap(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_stand(seed: u64) -> SceneSpec {
    SceneSpec {
        stems: (0..4)
            .map(|k| StemSpec {
                bark_sigma: 0.005,
                ..StemSpec::vertical([3.0 * (k % 2) as f64, 3.0 * (k / 2) as f64, 0.0], 0.2 + 0.05 * k as f64, 3.0)
            })
            .collect(),
        ground: GroundPlane::default(),
        ground_roughness: 0.005,
        ground_density: 200.0,
        stem_density: 2000.0,
        clutter: Clutter::FractionOfStem(0.1),
        ground_margin: 3.0,
        box_margin: 0.15,
        seed,
    }
}

/// `synth` into `dir/synth`; returns (cloud path, trees path).
fn synth(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let config = dir.join("scene_config.json");
    write_json(&config, &small_stand(seed)).unwrap();
    let out = dir.join("synth");
    ok(&[
        "synth",
        "--config",
        s(&config),
        "--seed",
        &seed.to_string(),
        "--out",
        s(&out),
        "--quiet",
    ]);
    (out.join("scene.ply"), out.join("trees.json"))
}

#[test]
fn estimate_and_report_match_library_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (cloud, trees_path) = synth(dir.path(), 3);
    let est_dir = dir.path().join("est");
    ok(&[
        "estimate",
        "--map",
        s(&cloud),
        "--trees",
        s(&trees_path),
        "--method",
        "A_LLS+C_NLSN",
        "--seed",
        "9",
        "--out",
        s(&est_dir),
        "--quiet",
    ]);
    let records: Vec<EstimateRecord> = read_json(&est_dir.join("estimates.json")).unwrap();

    let map = load_cloud(&cloud, CloudFormat::Ply).unwrap();
    let trees: Vec<TreeRecord> = read_json(&trees_path).unwrap();
    let dtm = build_dtm(&map, &DtmConfig::default()).unwrap();
    let config = MethodChain::parse("A_LLS+C_NLSN").unwrap().apply(EstimationConfig::default());
    let direct: Vec<EstimateRecord> = trees
        .iter()
        .zip(estimate_trees(&map, &trees, &dtm, &config, 9))
        .map(|(t, e)| EstimateRecord::new(t.id, &e))
        .collect();
    assert_eq!(records, direct);
    assert!(records.iter().all(|r| r.status == EstimateStatus::Ok));

    let rep_dir = dir.path().join("rep");
    ok(&[
        "report",
        "--estimates",
        s(&est_dir.join("estimates.json")),
        "--trees",
        s(&trees_path),
        "--out",
        s(&rep_dir),
        "--quiet",
    ]);
    let report: ReportFile = read_json(&rep_dir.join("report.json")).unwrap();
    let obs = dbhmap::metrics::observations(&trees, &direct, None, None).unwrap();
    assert_eq!(report.metrics, compute_metrics(&obs, 0.2, 10.0).unwrap());
}

#[test]
fn box_outside_map_fails_that_tree_only() {
    let dir = tempfile::tempdir().unwrap();
    let (cloud, trees_path) = synth(dir.path(), 4);
    let mut trees: Vec<TreeRecord> = read_json(&trees_path).unwrap();
    let mut far = trees[0].clone();
    far.id = 99;
    far.box_min[0] += 500.0;
    far.box_max[0] += 500.0;
    trees.push(far);
    let edited = dir.path().join("trees.json");
    write_json(&edited, &trees).unwrap();
    let out = dir.path().join("est");
    ok(&["estimate", "--map", s(&cloud), "--trees", s(&edited), "--out", s(&out), "--quiet"]);
    let records: Vec<EstimateRecord> = read_json(&out.join("estimates.json")).unwrap();
    assert_eq!(records.len(), 5);
    assert_eq!(records[4].status, EstimateStatus::EmptySlice);
    assert_eq!(records[4].diameter_m, None);
    assert!(records[..4].iter().all(|r| r.status == EstimateStatus::Ok));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (cloud, _) = synth(dir.path(), 5);
    let out = s(dir.path());

    let empty = dir.path().join("none.json");
    fs::write(&empty, "[]").unwrap();
    let r = dbhmap(&["estimate", "--map", s(&cloud), "--trees", s(&empty), "--out", out]);
    assert_eq!(r.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&r.stderr).contains("no trees"));

    let r = dbhmap(&["estimate", "--map", s(&cloud), "--trees", "/no/such/trees.json", "--out", out]);
    assert_eq!(r.status.code(), Some(3));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"band_count": 3, "no_such_key": 1}"#).unwrap();
    let r = dbhmap(&[
        "estimate",
        "--config",
        s(&bad),
        "--map",
        s(&cloud),
        "--trees",
        s(&empty),
        "--out",
        out,
    ]);
    assert_eq!(r.status.code(), Some(2));

    let grid = dir.path().join("grid.json");
    fs::write(&grid, r#"{"q": [15], "n_cyls": [1], "h": [0.6], "epsilon": [0.0]}"#).unwrap();
    let r = dbhmap(&[
        "sweep",
        "--map",
        "/no/such/map.ply",
        "--trees",
        "/no/such.json",
        "--grid",
        s(&grid),
        "--out",
        out,
    ]);
    assert_eq!(r.status.code(), Some(2), "grid is validated before any input is read");

    let r = dbhmap(&["estimate", "--map", s(&cloud), "--trees", s(&empty), "--h", "-0.5", "--out", out]);
    assert_eq!(r.status.code(), Some(2));

    let r = dbhmap(&["frobnicate"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let (cloud, trees) = synth(dir.path(), 6);
    let config = dir.path().join("est.json");
    fs::write(&config, r#"{"band_count": 2, "slice_thickness": 0.4}"#).unwrap();
    let out = dir.path().join("est");
    ok(&[
        "estimate",
        "--config",
        s(&config),
        "--n-cyls",
        "3",
        "--map",
        s(&cloud),
        "--trees",
        s(&trees),
        "--out",
        s(&out),
        "--quiet",
    ]);
    let records: Vec<EstimateRecord> = read_json(&out.join("estimates.json")).unwrap();
    assert!(records.iter().all(|r| r.per_band_diameters.len() == 3));
}

#[test]
fn map_count_mismatch_names_both_counts() {
    let dir = tempfile::tempdir().unwrap();
    let scans = dir.path().join("scans");
    fs::create_dir(&scans).unwrap();
    let cloud = dbhmap::synth::generate_stem_cloud(&StemSpec::vertical([3.0, 0.0, -1.0], 0.3, 2.0), 500.0, 1)
        .unwrap()
        .0;
    for i in 0..3 {
        dbhmap::io::save_cloud(&scans.join(format!("s{i}.ply")), &cloud, CloudFormat::Ply).unwrap();
    }
    let odo = dir.path().join("odo.csv");
    write_poses(&odo, &[0.0, 1.0], &[RigidTransform::identity(); 2]).unwrap();
    let r = dbhmap(&["map", "--scans", s(&scans), "--odometry", s(&odo), "--out", s(dir.path())]);
    assert_ne!(r.status.code(), Some(0));
    let msg = String::from_utf8_lossy(&r.stderr);
    assert!(msg.contains('3') && msg.contains('2'), "{msg}");
}

#[test]
fn single_scan_map_is_the_filtered_scan() {
    let dir = tempfile::tempdir().unwrap();
    let scans = dir.path().join("scans");
    fs::create_dir(&scans).unwrap();
    let cloud = dbhmap::synth::generate_stem_cloud(&StemSpec::vertical([3.0, 0.0, -1.0], 0.3, 2.0), 2000.0, 1)
        .unwrap()
        .0;
    dbhmap::io::save_cloud(&scans.join("scan.ply"), &cloud, CloudFormat::Ply).unwrap();
    let odo = dir.path().join("odo.csv");
    write_poses(&odo, &[0.0], &[RigidTransform::from_yaw(0.3, Vector::new(1.0, 2.0, 0.0))]).unwrap();
    let out = dir.path().join("m");
    ok(&["map", "--scans", s(&scans), "--odometry", s(&odo), "--out", s(&out), "--quiet"]);
    let map = load_cloud(&out.join("map.ply"), CloudFormat::Ply).unwrap();
    let expected = dbhmap::icp::build_map(
        &[cloud],
        &dbhmap::icp::Trajectory::from_poses(vec![RigidTransform::identity()]),
        &dbhmap::icp::IcpConfig::default(),
        &dbhmap::icp::MapOptions::default(),
    )
    .unwrap()
    .map;
    assert_eq!(map.points(), expected.points());
}

/// synth → simulate (10 poses) → map → estimate → report; returns the RMSE.
fn full_chain(dir: &Path) -> f64 {
    let (cloud, trees) = synth(dir, 8);
    let path = dir.join("path.csv");
    let poses: Vec<RigidTransform> = (0..10)
        .map(|i| RigidTransform::from_yaw(0.0, Vector::new(-1.5 + 0.6 * i as f64, -1.5, 0.6)))
        .collect();
    let stamps: Vec<f64> = (0..10).map(f64::from).collect();
    write_poses(&path, &stamps, &poses).unwrap();
    let sim_config = dir.join("sim.json");
    fs::write(
        &sim_config,
        r#"{"sensor": {"range_noise": 0.003}, "odometry_noise": {"translation_sigma": 0.01, "yaw_sigma": 0.002}}"#,
    )
    .unwrap();
    let sim = dir.join("sim");
    ok(&[
        "simulate",
        "--cloud",
        s(&cloud),
        "--path",
        s(&path),
        "--config",
        s(&sim_config),
        "--seed",
        "2",
        "--out",
        s(&sim),
        "--quiet",
    ]);
    let map = dir.join("map");
    ok(&[
        "map",
        "--scans",
        s(&sim.join("scans")),
        "--odometry",
        s(&sim.join("odometry.csv")),
        "--anchor",
        "odometry",
        "--out",
        s(&map),
        "--quiet",
    ]);
    let est = dir.join("est");
    ok(&[
        "estimate",
        "--map",
        s(&map.join("map.ply")),
        "--trees",
        s(&trees),
        "--out",
        s(&est),
        "--quiet",
    ]);
    let rep = dir.join("rep");
    ok(&[
        "report",
        "--estimates",
        s(&est.join("estimates.json")),
        "--trees",
        s(&trees),
        "--trajectory",
        s(&map.join("trajectory.csv")),
        "--profile-bin",
        "2",
        "--out",
        s(&rep),
        "--quiet",
    ]);
    assert!(rep.join("distance_profile.csv").exists());
    let report: ReportFile = read_json(&rep.join("report.json")).unwrap();
    assert_eq!(report.metrics.n_failed, 0);
    report.metrics.rmse_cm.unwrap()
}

#[test]
fn full_chain_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = full_chain(a.path());
    let rb = full_chain(b.path());
    assert_eq!(ra.to_bits(), rb.to_bits());
    assert!(ra < 2.0, "rmse {ra} cm");
    let map_a = fs::read(a.path().join("map/map.ply")).unwrap();
    let map_b = fs::read(b.path().join("map/map.ply")).unwrap();
    assert_eq!(map_a, map_b);
}

#[test]
fn manifest_replay_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (cloud, trees) = synth(dir.path(), 10);
    let out = dir.path().join("est");
    ok(&[
        "estimate",
        "--map",
        s(&cloud),
        "--trees",
        s(&trees),
        "--seed",
        "4",
        "--out",
        s(&out),
        "--quiet",
    ]);
    let manifest: RunManifest = read_json(&out.join("estimate.manifest.json")).unwrap();
    assert_eq!(manifest.command, "estimate");
    assert_eq!(manifest.seed, 4);
    assert_eq!(manifest.inputs, vec![cloud.clone(), trees.clone()]);
    assert!(manifest.outputs.contains(&out.join("estimates.json")));
    let first = fs::read(out.join("estimates.json")).unwrap();
    let input_before = fs::read(&cloud).unwrap();

    fs::remove_file(out.join("estimates.json")).unwrap();
    let args: Vec<&str> = manifest.args.iter().skip(1).map(String::as_str).collect();
    ok(&args);
    assert_eq!(fs::read(out.join("estimates.json")).unwrap(), first);
    assert_eq!(fs::read(&cloud).unwrap(), input_before);
}

#[test]
fn sweep_one_cell_grid_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let (cloud, trees) = synth(dir.path(), 11);
    let grid = dir.path().join("grid.json");
    fs::write(&grid, r#"{"q": [15], "n_cyls": [5], "h": [0.6], "epsilon": [0.02]}"#).unwrap();
    let out = dir.path().join("sweep");
    ok(&[
        "sweep",
        "--map",
        s(&cloud),
        "--trees",
        s(&trees),
        "--grid",
        s(&grid),
        "--methods",
        "A_N+C_NLS",
        "--out",
        s(&out),
        "--quiet",
    ]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("A_N+C_NLS,15,5,0.6,0.02,"));
    let best = fs::read_to_string(out.join("sweep_best.csv")).unwrap();
    assert_eq!(best.lines().nth(1), csv.lines().nth(1));
}

#[test]
fn report_on_perfect_estimates_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let trees = vec![TreeRecord {
        id: 1,
        box_min: [0.0; 3],
        box_max: [1.0; 3],
        truth_dbh_m: Some(0.30),
        species: None,
    }];
    let est = vec![EstimateRecord {
        id: 1,
        diameter_m: Some(0.30),
        status: EstimateStatus::Ok,
        per_band_diameters: vec![Some(0.30)],
        inlier_counts: vec![50],
    }];
    let (t, e) = (dir.path().join("t.json"), dir.path().join("e.json"));
    write_json(&t, &trees).unwrap();
    write_json(&e, &est).unwrap();
    ok(&["report", "--estimates", s(&e), "--trees", s(&t), "--out", s(dir.path()), "--quiet"]);
    let report: ReportFile = read_json(&dir.path().join("report.json")).unwrap();
    assert_eq!(report.metrics.rmse_cm, Some(0.0));
    assert_eq!(report.metrics.bias_cm, Some(0.0));
}

#[test]
fn synth_writes_scene_and_trees() {
    let dir = tempfile::tempdir().unwrap();
    let (cloud, trees) = synth(dir.path(), 12);
    let cloud: PointCloud = load_cloud(&cloud, CloudFormat::Ply).unwrap();
    let trees: Vec<TreeRecord> = read_json(&trees).unwrap();
    assert_eq!(trees.len(), 4);
    assert!(cloud.len() > 1000);
    let spec: SceneSpec = read_json(&dir.path().join("synth/scene.json")).unwrap();
    assert_eq!(spec, small_stand(12));
}
