//! The `dbhmap` command-line tool.
//!
//! Every command reads JSON configs whose keys mirror the library structs;
//! flags override file values, which override defaults. Each run writes a
//! `<command>.manifest.json` next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dbh::{estimate_trees, EstimateRecord, EstimationConfig, MethodChain, TreeRecord, Voting};
use crate::dtm::{build_dtm, DtmConfig};
use crate::error::{Error, Result};
use crate::geom::{BoundingBox, PointCloud};
use crate::icp::{build_map, FailurePolicy, IcpConfig, MapOptions, Trajectory};
use crate::io::{load_cloud, read_json, read_poses, save_cloud, write_atomic, write_json, write_poses, CloudFormat};
use crate::metrics::{
    compute_metrics, distance_profile, distance_profile_csv, min_observation_distance, observations, sweep, MetricsReport, Protocol,
    SweepGrid, SweepInput, TreeObservation,
};
use crate::synth::{benchmark_stand, generate_scene, serpentine_path, simulate_scans, OdometryNoise, SceneSpec, SensorModel};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_PROCESSING: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "dbhmap", version, about = "Lidar mapping and tree DBH estimation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config for the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Random seed; defaults to 0, or to the scene file's seed for `synth`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register scans into a map (config: IcpConfig).
    Map(MapArgs),
    /// Build a terrain raster (config: DtmConfig).
    Dtm(DtmArgs),
    /// Estimate DBH for every tree box (config: EstimationConfig).
    Estimate(EstimateArgs),
    /// Score estimates against truth (config: Protocol).
    Report(ReportArgs),
    /// Run every method over a hyperparameter grid (config: EstimationConfig).
    Sweep(SweepArgs),
    /// Materialize a synthetic stand (config: SceneSpec).
    Synth(SynthArgs),
    /// Scan a cloud along a path (config: SimulationConfig).
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct MapArgs {
    /// Directory of scans (.ply or .csv), taken in file-name order.
    #[arg(long)]
    pub scans: PathBuf,
    /// Odometry CSV `timestamp,tx,ty,tz,qx,qy,qz,qw`, one row per scan.
    #[arg(long)]
    pub odometry: PathBuf,
    /// Map voxel edge, meters.
    #[arg(long, default_value_t = 0.02)]
    pub cell_edge: f64,
    /// Stop at the first failed registration instead of keeping odometry.
    #[arg(long)]
    pub abort_on_failure: bool,
    /// Frame of the first scan.
    #[arg(long, value_enum, default_value_t = Anchor::Identity)]
    pub anchor: Anchor,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub trim_ratio: Option<f64>,
    #[arg(long)]
    pub q: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Anchor {
    /// The first scan defines the map frame.
    Identity,
    /// The map is expressed in the odometry frame.
    Odometry,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct DtmArgs {
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub cell_size: Option<f64>,
    #[arg(long)]
    pub percentile: Option<f64>,
}

/// Flags shared by `estimate` and `sweep`.
#[derive(Debug, Args)]
pub struct EstimationFlags {
    /// Method chain, e.g. `A_N+C_NLS`.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub n_cyls: Option<usize>,
    /// Slice thickness, meters.
    #[arg(long)]
    pub h: Option<f64>,
    /// RANSAC tolerance, meters.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, value_enum)]
    pub voting: Option<VotingArg>,
    #[arg(long)]
    pub dtm_cell_size: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VotingArg {
    Median,
    Mean,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct EstimateArgs {
    #[arg(long)]
    pub map: PathBuf,
    /// JSON list of tree records.
    #[arg(long)]
    pub trees: PathBuf,
    #[command(flatten)]
    pub flags: EstimationFlags,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct ReportArgs {
    #[arg(long)]
    pub estimates: PathBuf,
    /// Tree records carrying `truth_dbh_m`.
    #[arg(long)]
    pub trees: PathBuf,
    /// Trajectory CSV for observation distances; without it every
    /// observation is at distance 0.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    #[arg(long)]
    pub trajectory_id: Option<String>,
    /// Meters.
    #[arg(long)]
    pub fail_threshold: Option<f64>,
    /// Meters.
    #[arg(long)]
    pub max_distance: Option<f64>,
    /// Also write a distance profile with this bin width, meters.
    #[arg(long)]
    pub profile_bin: Option<f64>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct SweepArgs {
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub trees: PathBuf,
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// JSON `{"q": [...], "n_cyls": [...], "h": [...], "epsilon": [...]}`;
    /// defaults to the full grid.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Comma-separated method chains; defaults to all six.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    #[arg(long)]
    pub fail_threshold: Option<f64>,
    #[arg(long)]
    pub max_distance: Option<f64>,
    #[arg(long)]
    pub dtm_cell_size: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Write a CSV cloud instead of PLY.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scene cloud to scan.
    #[arg(long)]
    pub cloud: PathBuf,
    /// Sensor poses CSV; defaults to lanes across the cloud's footprint.
    #[arg(long)]
    pub path: Option<PathBuf>,
}

/// Config of `simulate`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub sensor: SensorModel,
    pub odometry_noise: OdometryNoise,
    pub lanes: LaneLayout,
}

/// Automatic sensor path: lanes parallel to x, inset from the cloud's
/// bounds by `inset` and spaced `spacing` apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaneLayout {
    pub inset: f64,
    pub spacing: f64,
    pub step: f64,
    pub sensor_height: f64,
}

impl Default for LaneLayout {
    fn default() -> Self {
        LaneLayout {
            inset: 2.0,
            spacing: 4.0,
            step: 2.0,
            sensor_height: 0.6,
        }
    }
}

/// Provenance written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub tool_version: String,
    pub duration_s: f64,
    /// Full argument vector; rerunning it reproduces the outputs.
    pub args: Vec<String>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let argv = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => EXIT_IO,
        _ => EXIT_PROCESSING,
    }
}

fn execute(cli: &Cli, args: Vec<String>) -> Result<()> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        // A pool may already exist when called repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
    let start = Instant::now();
    let mut seed = c.seed();
    let (name, inputs, outputs) = match &cli.command {
        Command::Map(a) => ("map", vec![a.scans.clone(), a.odometry.clone()], cmd_map(c, a)?),
        Command::Dtm(a) => ("dtm", vec![a.map.clone()], cmd_dtm(c, a)?),
        Command::Estimate(a) => ("estimate", vec![a.map.clone(), a.trees.clone()], cmd_estimate(c, a)?),
        Command::Report(a) => {
            let mut inputs = vec![a.estimates.clone(), a.trees.clone()];
            inputs.extend(a.trajectory.clone());
            ("report", inputs, cmd_report(c, a)?)
        }
        Command::Sweep(a) => {
            let mut inputs = vec![a.map.clone(), a.trees.clone()];
            inputs.extend(a.trajectory.clone());
            inputs.extend(a.grid.clone());
            ("sweep", inputs, cmd_sweep(c, a)?)
        }
        Command::Synth(a) => {
            let (outputs, scene_seed) = cmd_synth(c, a)?;
            seed = scene_seed;
            ("synth", c.config.iter().cloned().collect(), outputs)
        }
        Command::Simulate(a) => {
            let mut inputs = vec![a.cloud.clone()];
            inputs.extend(a.path.clone());
            ("simulate", inputs, cmd_simulate(c, a)?)
        }
    };
    let manifest = RunManifest {
        command: name.into(),
        config: c.config.clone(),
        inputs,
        outputs,
        seed,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        duration_s: start.elapsed().as_secs_f64(),
        args,
    };
    write_json(&c.out.join(format!("{name}.manifest.json")), &manifest)
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_config)
}

/// Malformed config files are configuration errors; unreadable ones stay I/O errors.
fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    read_json(path).map_err(|e| match e {
        Error::Parse { path, at, message } => Error::Config(format!("{}: {at}: {message}", path.display())),
        other => other,
    })
}

impl Common {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn log(c: &Common, msg: impl AsRef<str>) {
    if !c.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn load_any_cloud(path: &Path) -> Result<PointCloud> {
    load_cloud(path, CloudFormat::from_path(path)?)
}

fn read_trajectory(path: &Path) -> Result<Trajectory> {
    read_poses(path)?.try_into()
}

fn cmd_map(c: &Common, a: &MapArgs) -> Result<Vec<PathBuf>> {
    let mut config: IcpConfig = load_config(c.config.as_deref())?;
    if let Some(v) = a.max_iterations {
        config.max_iterations = v;
    }
    if let Some(v) = a.trim_ratio {
        config.trim_ratio = v;
    }
    if let Some(v) = a.q {
        config.normal_neighbors = v;
    }
    config.validate()?;
    let odometry = read_trajectory(&a.odometry)?;
    let mut files: Vec<PathBuf> = fs::read_dir(&a.scans)
        .map_err(|e| Error::io(&a.scans, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| CloudFormat::from_path(p).is_ok())
        .collect();
    files.sort();
    let scans = files.iter().map(|p| load_any_cloud(p)).collect::<Result<Vec<_>>>()?;
    log(c, format!("mapping {} scans", scans.len()));
    let options = MapOptions {
        cell_edge: a.cell_edge,
        policy: if a.abort_on_failure {
            FailurePolicy::Abort
        } else {
            FailurePolicy::Fallback
        },
        initial_pose: match (a.anchor, odometry.poses().first()) {
            (Anchor::Odometry, Some(p)) => *p,
            _ => crate::geom::RigidTransform::identity(),
        },
        dynamic_filter: None,
    };
    let result = build_map(&scans, &odometry, &config, &options)?;
    let map_path = c.out.join("map.ply");
    let traj_path = c.out.join("trajectory.csv");
    let status_path = c.out.join("scan_status.json");
    save_cloud(&map_path, &result.map, CloudFormat::Ply)?;
    write_poses(&traj_path, result.trajectory.timestamps(), result.trajectory.poses())?;
    write_json(&status_path, &result.statuses)?;
    log(c, format!("map holds {} points", result.map.len()));
    Ok(vec![map_path, traj_path, status_path])
}

fn cmd_dtm(c: &Common, a: &DtmArgs) -> Result<Vec<PathBuf>> {
    let mut config: DtmConfig = load_config(c.config.as_deref())?;
    if let Some(v) = a.cell_size {
        config.cell_size = v;
    }
    if let Some(v) = a.percentile {
        config.percentile = v;
    }
    config.validate()?;
    let dtm = build_dtm(&load_any_cloud(&a.map)?, &config)?;
    let csv = c.out.join("dtm.csv");
    let sidecar = c.out.join("dtm.json");
    write_atomic(&csv, dtm.to_csv().as_bytes())?;
    write_json(&sidecar, &dtm.sidecar())?;
    Ok(vec![csv, sidecar])
}

fn estimation_config(c: &Common, f: &EstimationFlags) -> Result<EstimationConfig> {
    let mut config: EstimationConfig = load_config(c.config.as_deref())?;
    if let Some(m) = &f.method {
        let chain = MethodChain::parse(m).ok_or_else(|| Error::Config(format!("unknown method chain {m:?}")))?;
        config = chain.apply(config);
    }
    if let Some(v) = f.q {
        config.normal_neighbors = v;
    }
    if let Some(v) = f.n_cyls {
        config.band_count = v;
    }
    if let Some(v) = f.h {
        config.slice_thickness = v;
    }
    if let Some(v) = f.epsilon {
        config.ransac_tolerance = v;
    }
    if let Some(v) = f.voting {
        config.voting = match v {
            VotingArg::Median => Voting::Median,
            VotingArg::Mean => Voting::Mean,
        };
    }
    config.validate()?;
    Ok(config)
}

fn dtm_config(cell_size: Option<f64>) -> Result<DtmConfig> {
    let mut config = DtmConfig::default();
    if let Some(v) = cell_size {
        config.cell_size = v;
    }
    config.validate()?;
    Ok(config)
}

fn read_trees(path: &Path) -> Result<Vec<TreeRecord>> {
    let trees: Vec<TreeRecord> = read_json(path)?;
    for t in &trees {
        t.bounding_box()?;
    }
    Ok(trees)
}

fn cmd_estimate(c: &Common, a: &EstimateArgs) -> Result<Vec<PathBuf>> {
    let config = estimation_config(c, &a.flags)?;
    let dtm_config = dtm_config(a.flags.dtm_cell_size)?;
    let trees = read_trees(&a.trees)?;
    if trees.is_empty() {
        return Err(Error::Validation(format!("{} lists no trees", a.trees.display())));
    }
    let map = load_any_cloud(&a.map)?;
    let dtm = build_dtm(&map, &dtm_config)?;
    log(c, format!("estimating {} trees with {}", trees.len(), config.method()));
    let estimates = estimate_trees(&map, &trees, &dtm, &config, c.seed());
    let records: Vec<EstimateRecord> = trees.iter().zip(&estimates).map(|(t, e)| EstimateRecord::new(t.id, e)).collect();
    let failed = records.iter().filter(|r| r.diameter_m.is_none()).count();
    log(c, format!("{} estimated, {failed} failed", records.len() - failed));
    let path = c.out.join("estimates.json");
    write_json(&path, &records)?;
    Ok(vec![path])
}

/// Written by `report`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub protocol: Protocol,
    pub metrics: MetricsReport,
    pub observations: Vec<TreeObservation>,
}

fn protocol(c: &Common, fail_threshold: Option<f64>, max_distance: Option<f64>) -> Result<Protocol> {
    let mut p: Protocol = load_config(c.config.as_deref())?;
    if let Some(v) = fail_threshold {
        p.fail_threshold = v;
    }
    if let Some(v) = max_distance {
        p.max_distance = v;
    }
    p.validate()?;
    Ok(p)
}

fn cmd_report(c: &Common, a: &ReportArgs) -> Result<Vec<PathBuf>> {
    let protocol = protocol(c, a.fail_threshold, a.max_distance)?;
    let estimates: Vec<EstimateRecord> = read_json(&a.estimates)?;
    let trees = read_trees(&a.trees)?;
    let trajectory = a.trajectory.as_deref().map(read_trajectory).transpose()?;
    let obs = observations(&trees, &estimates, trajectory.as_ref(), a.trajectory_id.as_deref())?;
    let metrics = compute_metrics(&obs, protocol.fail_threshold, protocol.max_distance)?;
    if !c.quiet {
        let cm = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3} cm"));
        println!(
            "RMSE {}  bias {}  fail rate {:.1}%  ({} observations, {} excluded)",
            cm(metrics.rmse_cm),
            cm(metrics.bias_cm),
            100.0 * metrics.fail_rate,
            metrics.n_total,
            metrics.n_excluded
        );
    }
    let path = c.out.join("report.json");
    let mut outputs = vec![path.clone()];
    if let Some(w) = a.profile_bin {
        let bins = distance_profile(&obs, w, protocol.fail_threshold)?;
        let profile = c.out.join("distance_profile.csv");
        write_atomic(&profile, distance_profile_csv(&bins)?.as_bytes())?;
        outputs.push(profile);
    }
    write_json(
        &path,
        &ReportFile {
            protocol,
            metrics,
            observations: obs,
        },
    )?;
    Ok(outputs)
}

fn cmd_sweep(c: &Common, a: &SweepArgs) -> Result<Vec<PathBuf>> {
    let base: EstimationConfig = load_config(c.config.as_deref())?;
    base.validate()?;
    let protocol = protocol_from_flags(a.fail_threshold, a.max_distance)?;
    let grid = match &a.grid {
        Some(p) => read_config(p)?,
        None => SweepGrid::full(),
    };
    grid.validate()?;
    let methods = if a.methods.is_empty() {
        MethodChain::ALL.to_vec()
    } else {
        a.methods
            .iter()
            .map(|m| MethodChain::parse(m).ok_or_else(|| Error::Config(format!("unknown method chain {m:?}"))))
            .collect::<Result<_>>()?
    };
    let trees = read_trees(&a.trees)?;
    let map = load_any_cloud(&a.map)?;
    let dtm = build_dtm(&map, &dtm_config(a.dtm_cell_size)?)?;
    let distances = match &a.trajectory {
        Some(p) => {
            let t = read_trajectory(p)?;
            trees
                .iter()
                .map(|tree| min_observation_distance(&t, &tree.bounding_box()?))
                .collect::<Result<Vec<_>>>()?
        }
        None => vec![0.0; trees.len()],
    };
    log(c, format!("sweeping {} methods x {} cells", methods.len(), grid.len()));
    let input = SweepInput {
        map: &map,
        dtm: &dtm,
        trees: &trees,
        distances: &distances,
    };
    let table = sweep(input, &methods, &grid, &base, protocol, c.seed())?;
    let csv = c.out.join("sweep.csv");
    let best = c.out.join("sweep_best.csv");
    let json = c.out.join("sweep.json");
    write_atomic(&csv, table.to_csv().as_bytes())?;
    let best_table = crate::metrics::SweepTable {
        rows: table.best.iter().filter_map(|(_, i)| i.map(|i| table.rows[i].clone())).collect(),
        best: Vec::new(),
    };
    write_atomic(&best, best_table.to_csv().as_bytes())?;
    write_json(&json, &table)?;
    if !c.quiet {
        for row in &best_table.rows {
            let r = row.report.as_ref().expect("best rows have reports");
            println!(
                "{:<14} q={} n_cyls={} h={} eps={}  RMSE {:.3} cm",
                row.cell.method.name(),
                row.cell.q,
                row.cell.n_cyls,
                row.cell.h,
                row.cell.epsilon,
                r.rmse_cm.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(vec![csv, best, json])
}

fn protocol_from_flags(fail_threshold: Option<f64>, max_distance: Option<f64>) -> Result<Protocol> {
    let p = Protocol {
        fail_threshold: fail_threshold.unwrap_or(crate::metrics::FAIL_THRESHOLD),
        max_distance: max_distance.unwrap_or(crate::metrics::MAX_DISTANCE),
    };
    p.validate()?;
    Ok(p)
}

fn cmd_synth(c: &Common, a: &SynthArgs) -> Result<(Vec<PathBuf>, u64)> {
    let spec = match c.config.as_deref() {
        Some(p) => {
            let mut spec: SceneSpec = read_config(p)?;
            if let Some(seed) = c.seed {
                spec.seed = seed;
            }
            spec
        }
        None => benchmark_stand(c.seed()),
    };
    let scene = generate_scene(&spec)?;
    let (cloud_path, format) = if a.csv {
        (c.out.join("scene.csv"), CloudFormat::Csv)
    } else {
        (c.out.join("scene.ply"), CloudFormat::Ply)
    };
    let trees = c.out.join("trees.json");
    let spec_path = c.out.join("scene.json");
    save_cloud(&cloud_path, &scene.cloud, format)?;
    write_json(&trees, &scene.trees)?;
    write_json(&spec_path, &spec)?;
    log(c, format!("{} points, {} trees", scene.cloud.len(), scene.trees.len()));
    Ok((vec![cloud_path, trees, spec_path], spec.seed))
}

fn cmd_simulate(c: &Common, a: &SimulateArgs) -> Result<Vec<PathBuf>> {
    let config: SimulationConfig = load_config(c.config.as_deref())?;
    config.sensor.validate()?;
    config.odometry_noise.validate()?;
    let cloud = load_any_cloud(&a.cloud)?;
    let path = match &a.path {
        Some(p) => read_trajectory(p)?,
        None => {
            let bounds = cloud
                .bounds()
                .ok_or_else(|| Error::Validation("cannot derive a path from an empty cloud".into()))?;
            lanes_over(&bounds, &config.lanes)?
        }
    };
    let sim = simulate_scans(&cloud, &path, &config.sensor, &config.odometry_noise, c.seed())?;
    let scan_dir = c.out.join("scans");
    fs::create_dir_all(&scan_dir).map_err(|e| Error::io(&scan_dir, e))?;
    let width = sim.scans.len().to_string().len().max(4);
    let mut outputs = Vec::new();
    for (i, scan) in sim.scans.iter().enumerate() {
        let p = scan_dir.join(format!("scan_{i:0width$}.ply"));
        save_cloud(&p, scan, CloudFormat::Ply)?;
        outputs.push(p);
    }
    let odometry = c.out.join("odometry.csv");
    let exact = c.out.join("odometry_exact.csv");
    let empty = c.out.join("empty_scans.json");
    write_poses(&odometry, sim.noisy.timestamps(), sim.noisy.poses())?;
    write_poses(&exact, sim.exact.timestamps(), sim.exact.poses())?;
    write_json(&empty, &sim.empty)?;
    log(
        c,
        format!("{} scans, {} empty", sim.scans.len(), sim.empty.iter().filter(|e| **e).count()),
    );
    outputs.extend([odometry, exact, empty]);
    Ok(outputs)
}

/// Lanes across `bounds` per `layout`.
pub fn lanes_over(bounds: &BoundingBox, layout: &LaneLayout) -> Result<Trajectory> {
    let (lo, hi) = (bounds.min(), bounds.max());
    if !(layout.spacing > 0.0) {
        return Err(Error::Config(format!("lane spacing must be positive, got {}", layout.spacing)));
    }
    let (y0, y1) = (lo.y + layout.inset, hi.y - layout.inset);
    let (x0, x1) = (lo.x + layout.inset, hi.x - layout.inset);
    if !(y0 <= y1 && x0 < x1) {
        return Err(Error::Config("lane inset leaves no room inside the cloud".into()));
    }
    let n = ((y1 - y0) / layout.spacing + 1e-9).floor() as usize;
    let lanes: Vec<f64> = (0..=n).map(|k| y0 + k as f64 * layout.spacing).collect();
    serpentine_path(&lanes, (x0, x1), layout.step, lo.z + layout.sensor_height)
}
