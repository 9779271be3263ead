//! Command-line front end: `run`, `eval`, `synth` and `mesh`.
//!
//! Every configuration key is also a `--<key> <value>` flag of `run` and
//! `mesh`; flags override values from `--config`.

use anyhow::{anyhow, Context};
use clap::{Arg, ArgGroup, ArgMatches, Command};
use planeslam::config::{Config, KEYS};
use planeslam::evaluation::{ate, pose_alignment, reconstruction_rmse, rpe, MetricReport, Trajectory};
use planeslam::features::fit_plane;
use planeslam::io::ply::{LabeledCloud, PlyFormat};
use planeslam::meshing::{mesh_instances, MeshReport, PlanarMesh};
use planeslam::nalgebra::Vector3;
use planeslam::sensor::{generate_synthetic_scene, load_tum_sequence, write_tum_dataset, RgbdFrame, SceneSpec};
use planeslam::system::{FrameLog, Slam};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATASET: i32 = 2;
pub const EXIT_INIT: i32 = 3;

/// Grid spacing of the reference cloud written by `synth` (metres).
pub const MODEL_STEP: f64 = 0.02;

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl std::error::Error for CliError {}

fn usage(error: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        error: error.into(),
    }
}

fn dataset(error: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: EXIT_DATASET,
        error: error.into(),
    }
}

type CliResult<T> = Result<T, CliError>;

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("key = value configuration file"),
    );
    KEYS.iter().fold(cmd, |cmd, key| {
        cmd.arg(
            Arg::new(key.name)
                .long(key.name)
                .value_name("VALUE")
                .help_heading("Configuration")
                .help(format!("{} [{}, {}]", key.help, key.min, key.max)),
        )
    })
}

pub fn command() -> Command {
    let run = Command::new("run")
        .about("Track a sequence and export trajectory, map and mesh")
        .arg(
            Arg::new("dataset")
                .long("dataset")
                .value_name("DIR")
                .value_parser(clap::value_parser!(PathBuf))
                .help("TUM-layout dataset directory"),
        )
        .arg(
            Arg::new("scene")
                .long("scene")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("Synthetic scene description rendered in memory"),
        )
        .group(ArgGroup::new("input").args(["dataset", "scene"]).required(true))
        .arg(output_arg());
    let eval = Command::new("eval")
        .about("Compare an estimated trajectory with ground truth")
        .arg(path_arg("estimate", "FILE", "Estimated trajectory (TUM format)").required(true))
        .arg(path_arg("ground-truth", "FILE", "Ground-truth trajectory (TUM format)").required(true))
        .arg(
            Arg::new("tolerance")
                .long("tolerance")
                .value_parser(clap::value_parser!(f64))
                .default_value("0.02")
                .help("Timestamp association tolerance (seconds)"),
        )
        .arg(
            Arg::new("interval")
                .long("interval")
                .value_parser(clap::value_parser!(usize))
                .default_value("1")
                .help("Frame interval of the relative pose error"),
        )
        .arg(path_arg("predicted-cloud", "PLY", "Reconstructed point cloud").requires("model-cloud"))
        .arg(path_arg("model-cloud", "PLY", "Reference point cloud").requires("predicted-cloud"))
        .arg(path_arg("errors", "FILE", "Write per-pair errors here"));
    let synth = Command::new("synth")
        .about("Render a synthetic scene into a TUM-layout dataset")
        .arg(path_arg("scene", "FILE", "Scene description").required(true))
        .arg(output_arg());
    let mesh = Command::new("mesh")
        .about("Re-mesh a labeled point cloud, one mesh per plane instance")
        .arg(path_arg("cloud", "PLY", "Labeled point cloud").required(true))
        .arg(path_arg("out", "PLY", "Output mesh").required(true))
        .arg(path_arg("obj", "FILE", "Also write the mesh as OBJ"));
    Command::new("planeslam")
        .about("Point-line-plane RGB-D SLAM with planar meshing")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_args(run))
        .subcommand(eval)
        .subcommand(synth)
        .subcommand(config_args(mesh))
}

fn path_arg(name: &'static str, value: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name(value)
        .value_parser(clap::value_parser!(PathBuf))
        .help(help)
}

fn output_arg() -> Arg {
    path_arg("out", "DIR", "Output directory").required(true)
}

/// Defaults, then the config file, then flag overrides.
pub fn resolve_config(m: &ArgMatches) -> CliResult<Config> {
    let mut config = Config::default();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(usage)?;
        config
            .apply_kv_str(&text)
            .with_context(|| format!("in {}", path.display()))
            .map_err(usage)?;
    }
    for key in KEYS {
        if let Some(value) = m.get_one::<String>(key.name) {
            config.set(key.name, value).map_err(usage)?;
        }
    }
    config.validate().map_err(usage)?;
    Ok(config)
}

fn create_file(path: &Path) -> CliResult<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(usage)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(usage)
}

fn write_mesh(mesh: &PlanarMesh, ply: &Path, obj: Option<&Path>) -> CliResult<()> {
    let mut w = create_file(ply)?;
    mesh.write_ply_ascii(&mut w)
        .and_then(|_| w.flush())
        .with_context(|| format!("writing {}", ply.display()))
        .map_err(usage)?;
    if let Some(obj) = obj {
        let mut w = create_file(obj)?;
        mesh.write_obj(&mut w)
            .and_then(|_| w.flush())
            .with_context(|| format!("writing {}", obj.display()))
            .map_err(usage)?;
    }
    Ok(())
}

fn mesh_summary(report: &MeshReport) -> String {
    let mut s = format!("meshed {} plane instance(s)", report.meshed);
    for (id, why) in &report.skipped {
        let _ = write!(s, "\nskipped instance {id}: {why}");
    }
    s
}

/// Files written by `run`.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub trajectory: PathBuf,
    pub map: PathBuf,
    pub mesh: PathBuf,
    pub mesh_obj: PathBuf,
    pub log: PathBuf,
    pub config: PathBuf,
    pub dump: PathBuf,
    pub ground_truth: Option<PathBuf>,
}

impl RunOutputs {
    fn new(out: &Path, synthetic: bool) -> Self {
        Self {
            trajectory: out.join("trajectory.txt"),
            map: out.join("map.ply"),
            mesh: out.join("mesh.ply"),
            mesh_obj: out.join("mesh.obj"),
            log: out.join("run_log.txt"),
            config: out.join("effective_config.txt"),
            dump: out.join("map_dump.txt"),
            ground_truth: synthetic.then(|| out.join("groundtruth.txt")),
        }
    }
}

/// Where `run` takes its frames from.
pub enum RunInput<'a> {
    Dataset(&'a Path),
    Scene(&'a Path),
}

/// Tracks every frame, then writes the trajectory (TUM), the labeled map
/// cloud (PLY), the mesh (PLY and OBJ), the map dump, the effective config
/// and the per-frame log.
pub fn cmd_run(input: RunInput<'_>, out: &Path, config: &Config) -> CliResult<RunOutputs> {
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(usage)?;
    let outputs = RunOutputs::new(out, matches!(input, RunInput::Scene(_)));
    let mut slam = Slam::new(config);
    let mut process = |frame: &RgbdFrame| -> CliResult<()> {
        slam.process(frame).map(|_| ()).map_err(|e| CliError {
            code: EXIT_INIT,
            error: e.into(),
        })
    };

    match input {
        RunInput::Scene(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(usage)?;
            let spec = SceneSpec::parse(&text)
                .with_context(|| format!("in {}", path.display()))
                .map_err(usage)?;
            let scene = generate_synthetic_scene(&spec).map_err(usage)?;
            for frame in &scene.frames {
                process(frame)?;
            }
            if let Some(gt) = &outputs.ground_truth {
                scene.ground_truth().write_tum(gt).map_err(usage)?;
            }
        }
        RunInput::Dataset(dir) => {
            let sequence = load_tum_sequence(dir, &config.load_options()).map_err(dataset)?;
            let (tx, rx) = sync_channel(config.prefetch);
            std::thread::scope(|s| -> CliResult<()> {
                let seq = &sequence;
                s.spawn(move || {
                    for frame in seq.frames() {
                        let stop = frame.is_err();
                        if tx.send(frame).is_err() || stop {
                            break;
                        }
                    }
                });
                for frame in rx {
                    process(&frame.map_err(dataset)?)?;
                }
                Ok(())
            })?;
        }
    }

    if !slam.is_initialized() {
        return Err(CliError {
            code: EXIT_INIT,
            error: anyhow!("the sequence ended before tracking could be initialized"),
        });
    }
    let trajectory = slam.trajectory().map_err(usage)?;
    trajectory.write_tum(&outputs.trajectory).map_err(usage)?;

    let mut w = create_file(&outputs.map)?;
    slam.map()
        .labeled_cloud()
        .write(&mut w, PlyFormat::Ascii)
        .and_then(|_| w.flush())
        .with_context(|| format!("writing {}", outputs.map.display()))
        .map_err(usage)?;

    let (mesh, report) = slam.mesh(config);
    write_mesh(&mesh, &outputs.mesh, Some(&outputs.mesh_obj))?;
    write_text(&outputs.dump, &slam.map().dump())?;
    write_text(&outputs.config, &config.to_kv_string())?;
    write_text(&outputs.log, &run_log(config, slam.logs(), &report))?;
    Ok(outputs)
}

fn run_log(config: &Config, logs: &[FrameLog], report: &MeshReport) -> String {
    let mut s = String::from("# effective configuration\n");
    for (k, v) in config.entries() {
        let _ = writeln!(s, "# {k} = {v}");
    }
    for line in mesh_summary(report).lines() {
        let _ = writeln!(s, "# {line}");
    }
    let _ = writeln!(s, "{}", FrameLog::HEADER);
    for log in logs {
        let _ = writeln!(s, "{}", log.to_line());
    }
    s
}

pub struct EvalOptions<'a> {
    pub tolerance: f64,
    pub interval: usize,
    /// Predicted and reference clouds for the reconstruction error.
    pub clouds: Option<(&'a Path, &'a Path)>,
    pub errors: Option<&'a Path>,
}

fn read_cloud(path: &Path) -> CliResult<LabeledCloud> {
    let file = fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(dataset)?;
    LabeledCloud::read(BufReader::new(file))
        .with_context(|| format!("reading {}", path.display()))
        .map_err(dataset)
}

/// ATE and RPE, plus the reconstruction error of the predicted cloud after
/// aligning the estimated poses to the ground truth, when both clouds are given.
pub fn cmd_eval(estimate: &Path, ground_truth: &Path, options: &EvalOptions<'_>) -> CliResult<MetricReport> {
    let est = Trajectory::read_tum(estimate).map_err(dataset)?;
    let gt = Trajectory::read_tum(ground_truth).map_err(dataset)?;
    let mut report = MetricReport::compute(&est, &gt, options.interval, options.tolerance).map_err(dataset)?;
    if let Some((predicted, model)) = options.clouds {
        // The map lives in the estimate's world frame.
        let alignment = pose_alignment(&est, &gt, options.tolerance).map_err(dataset)?;
        let predicted: Vec<_> = read_cloud(predicted)?
            .points
            .iter()
            .map(|p| alignment.transform_point(p))
            .collect();
        let model = read_cloud(model)?;
        report.reconstruction_rmse = Some(reconstruction_rmse(&predicted, &model.points).map_err(dataset)?);
    }
    if let Some(path) = options.errors {
        let a = ate(&est, &gt, options.tolerance).map_err(dataset)?;
        let r = rpe(&est, &gt, options.interval, options.tolerance).map_err(dataset)?;
        let mut s = String::from("# ate: timestamp position_error\n");
        for (t, e) in &a.errors {
            let _ = writeln!(s, "ate {t:.6} {e:.9}");
        }
        let _ = writeln!(s, "# rpe: timestamp translation_error rotation_error_deg");
        for (t, et, er) in &r.errors {
            let _ = writeln!(s, "rpe {t:.6} {et:.9} {er:.9}");
        }
        write_text(path, &s)?;
    }
    Ok(report)
}

/// Renders a scene into a TUM-layout dataset with ground truth, the scene
/// description and a labeled reference cloud of the scene planes.
pub fn cmd_synth(scene: &Path, out: &Path) -> CliResult<usize> {
    let text = fs::read_to_string(scene)
        .with_context(|| format!("reading {}", scene.display()))
        .map_err(usage)?;
    let spec = SceneSpec::parse(&text)
        .with_context(|| format!("in {}", scene.display()))
        .map_err(usage)?;
    let scene = generate_synthetic_scene(&spec).map_err(usage)?;
    write_tum_dataset(out, &scene.frames, Some(&scene.ground_truth())).map_err(dataset)?;
    write_text(&out.join("scene.txt"), &spec.to_kv_string())?;
    let model = scene.model_cloud(MODEL_STEP);
    let path = out.join("model.ply");
    let mut w = create_file(&path)?;
    model
        .write(&mut w, PlyFormat::BinaryLittleEndian)
        .and_then(|_| w.flush())
        .with_context(|| format!("writing {}", path.display()))
        .map_err(usage)?;
    Ok(scene.frames.len())
}

/// Fits a plane per label and triangulates each instance.
pub fn cmd_mesh(cloud: &Path, out: &Path, obj: Option<&Path>, config: &Config) -> CliResult<MeshReport> {
    let cloud = read_cloud(cloud)?;
    let instances: Vec<_> = cloud
        .instances()
        .into_iter()
        .filter_map(|(id, points)| {
            let centroid = points.iter().sum::<Vector3<f64>>() / points.len().max(1) as f64;
            let plane = fit_plane(&points, &centroid)?.canonical();
            Some((id, plane, points))
        })
        .collect();
    let (mesh, report) = mesh_instances(&instances, &config.mesh_params());
    write_mesh(&mesh, out, obj)?;
    Ok(report)
}

/// Parses `args` and runs the selected command. Returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&matches) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn dispatch(matches: &ArgMatches) -> CliResult<()> {
    match matches.subcommand() {
        Some(("run", m)) => {
            let config = resolve_config(m)?;
            let out = m.get_one::<PathBuf>("out").expect("required");
            let input = match (m.get_one::<PathBuf>("dataset"), m.get_one::<PathBuf>("scene")) {
                (Some(d), _) => RunInput::Dataset(d),
                (None, Some(s)) => RunInput::Scene(s),
                (None, None) => unreachable!("clap enforces one input"),
            };
            let outputs = cmd_run(input, out, &config)?;
            println!("trajectory: {}", outputs.trajectory.display());
            println!("mesh:       {}", outputs.mesh.display());
            Ok(())
        }
        Some(("eval", m)) => {
            let path = |k: &str| m.get_one::<PathBuf>(k).map(PathBuf::as_path);
            let options = EvalOptions {
                tolerance: *m.get_one::<f64>("tolerance").expect("default"),
                interval: *m.get_one::<usize>("interval").expect("default"),
                clouds: path("predicted-cloud").zip(path("model-cloud")),
                errors: path("errors"),
            };
            let report = cmd_eval(
                path("estimate").expect("required"),
                path("ground-truth").expect("required"),
                &options,
            )?;
            print!("{}", report.to_text());
            Ok(())
        }
        Some(("synth", m)) => {
            let scene = m.get_one::<PathBuf>("scene").expect("required");
            let out = m.get_one::<PathBuf>("out").expect("required");
            let n = cmd_synth(scene, out)?;
            println!("wrote {n} frames to {}", out.display());
            Ok(())
        }
        Some(("mesh", m)) => {
            let config = resolve_config(m)?;
            let cloud = m.get_one::<PathBuf>("cloud").expect("required");
            let out = m.get_one::<PathBuf>("out").expect("required");
            let obj = m.get_one::<PathBuf>("obj").map(PathBuf::as_path);
            let report = cmd_mesh(cloud, out, obj, &config)?;
            eprintln!("{}", mesh_summary(&report));
            Ok(())
        }
        _ => Err(usage(anyhow!("unknown command"))),
    }
}
