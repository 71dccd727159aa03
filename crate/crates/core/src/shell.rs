//! Command-line front end: run configuration, the five subcommands and
//! exit-code mapping (0 success, 2 usage, 1 runtime failure).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::curation::{curate_directory, CurationConfig};
use crate::dataworld::{
    build_pseudo_real_set, build_synthetic_set, load_eval_set, load_real_set, load_synthetic_set, shape_for,
    DataConfig, DatasetInfo, TrainingReader, DATASET_FILE, PSEUDO_REAL_DIR, SYNTHETIC_DIR,
};
use crate::digest::config_hash;
use crate::error::{io_err, Error, Result};
use crate::evalharness::{
    camera_at, nvs_suite, self_consistency_suite, semantic_schedule, semantic_similarity_suite, summary_table,
    EvalConfig, OracleModel, Reconstruct, Suite, TrainedModel,
};
use crate::geometry::RelativePose;
use crate::image::{Image, BACKGROUND_GRAY};
use crate::perceptual::RandomConvPyramid;
use crate::renderfield::{composite_background, RenderSettings};
use crate::selftrain::{fit, read_checkpoint, Ablation, FitOptions, GradientHistogramEmbedder, TrainConfig};

/// Relative output paths are resolved under this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "SELFRECON_OUTPUT_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Output of `generate-data --kind synthetic`.
    pub synthetic: Option<PathBuf>,
    /// Single-view training images: a pseudo-real set or curated `kept/` crops.
    pub single_view: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataPaths,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/default"),
            data: DataPaths::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

#[derive(Debug, Parser)]
#[command(name = "selfrecon", version, about = "Single-view 3D reconstruction with self-training")]
pub struct Cli {
    /// Run every parallel section on one thread (bitwise-reproducible).
    #[arg(long, global = true)]
    pub single_thread: bool,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    pub output_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a procedural dataset.
    GenerateData(GenerateArgs),
    /// Filter instance crops from segmented scenes.
    Curate(CurateArgs),
    /// Train the reconstructor.
    Train(TrainArgs),
    /// Run evaluation suites.
    Eval(EvalArgs),
    /// Reconstruct one image and render it from chosen viewpoints.
    Render(RenderArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    Synthetic,
    PseudoReal,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub kind: DataKind,
    #[arg(long)]
    pub shapes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub eval_resolution: Option<usize>,
    #[arg(long)]
    pub samples_per_ray: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Category labels to drop.
    #[arg(long, value_delimiter = ',')]
    pub deny: Vec<String>,
    /// TOML file with curation thresholds.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, value_parser = parse_ablation)]
    pub ablate: Option<Ablation>,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Nvs,
    Semantic,
    SelfConsistency,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub suite: SuiteArg,
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Score the ground-truth shapes instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub oracle: bool,
    /// Pseudo-real dataset with sealed views.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration whose `[eval]` table is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub samples_per_ray: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub azimuths: Vec<f64>,
    /// One value per azimuth, or a single value for all.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub elevations: Vec<f64>,
    /// Number of evenly spaced 360° frames at elevation 0.
    #[arg(long)]
    pub turntable: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub samples_per_ray: Option<usize>,
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    Ablation::parse(s).map_err(|_| {
        let names: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let threads = if cli.single_thread { 1 } else { 0 };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Runtime(Error::Config(format!("thread pool: {e}"))))?;
    pool.install(|| match &cli.command {
        Command::GenerateData(a) => cmd_generate_data(cli, a),
        Command::Curate(a) => cmd_curate(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Render(a) => cmd_render(cli, a),
    })
}

fn output_path(cli: &Cli, p: &Path) -> PathBuf {
    match &cli.output_root {
        Some(root) if p.is_relative() => root.join(p),
        _ => p.to_path_buf(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn cmd_generate_data(cli: &Cli, a: &GenerateArgs) -> CliResult<()> {
    let mut cfg = DataConfig::default();
    if let Some(r) = a.resolution {
        cfg.resolution = r;
    }
    if let Some(r) = a.eval_resolution {
        cfg.eval_resolution = r;
    }
    if let Some(s) = a.samples_per_ray {
        cfg.samples_per_ray = s;
    }
    if let Some(v) = a.views {
        match a.kind {
            DataKind::Synthetic => cfg.supervision_views = v,
            DataKind::PseudoReal => cfg.eval_views = v,
        }
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if a.shapes == 0 {
        return Err(CliError::Usage("--shapes must be at least 1".into()));
    }
    let out = output_path(cli, &a.out);
    let dir = match a.kind {
        DataKind::Synthetic => build_synthetic_set(&out, a.shapes, a.seed, &cfg)?,
        DataKind::PseudoReal => build_pseudo_real_set(&out, a.shapes, a.seed, &cfg)?,
    };
    println!("wrote {} shapes to {}", a.shapes, dir.display());
    Ok(())
}

pub fn cmd_curate(cli: &Cli, a: &CurateArgs) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => toml::from_str(&fs::read_to_string(p).map_err(io_err(p))?).map_err(Error::from)?,
        None => CurationConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if !a.input.is_dir() {
        return Err(CliError::Usage(format!("input directory {} does not exist", a.input.display())));
    }
    let report = curate_directory(&a.input, &output_path(cli, &a.output), &a.deny, &cfg)?;
    println!("scenes/instances read: {} instances, kept {}", report.input_count, report.kept);
    for (reason, n) in &report.dropped {
        println!("  dropped {reason:<20} {n}");
    }
    if !report.unreadable.is_empty() {
        println!("  unreadable scenes: {}", report.unreadable.len());
    }
    Ok(())
}

/// Accepts either a dataset root or the set folder itself.
fn set_dir(path: &Path, sub: &str) -> PathBuf {
    let nested = path.join(sub);
    if nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

pub fn cmd_train(cli: &Cli, a: &TrainArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(&a.config).map_err(|e| CliError::Usage(format!("{}: {e}", a.config.display())))?;
    if let Some(ab) = a.ablate {
        cfg.train.apply_ablation(ab);
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let synth_dir = cfg.data.synthetic.clone().ok_or_else(|| CliError::Usage("config has no data.synthetic".into()))?;
    let reader = TrainingReader::new();
    let synth = load_synthetic_set(&set_dir(&synth_dir, SYNTHETIC_DIR), &reader)?;
    let real = match (&cfg.data.single_view, cfg.train.weights.self_training_enabled()) {
        (Some(dir), true) => load_real_set(&set_dir(dir, PSEUDO_REAL_DIR), &reader)?,
        (None, true) => return Err(CliError::Usage("self-training needs data.single_view".into())),
        (_, false) => Vec::new(),
    };
    let out = output_path(cli, a.out.as_deref().unwrap_or(&cfg.output_dir));
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;
    let opts =
        FitOptions { out_dir: out.clone(), resume: a.resume.clone(), single_thread: cli.single_thread, stop_at: None };
    let outcome = fit(cfg.train.clone(), &synth, &real, &opts)?;
    println!(
        "trained {} steps (j = {}), config {} seed {}, checkpoint {}",
        outcome.steps_run,
        outcome.state.j,
        outcome.state.config.hash(),
        outcome.state.config.seed,
        outcome.checkpoint.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> CliResult<TrainedModel> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    let state = read_checkpoint(path)?;
    let fingerprint = config_hash(&(state.config.hash(), state.j));
    Ok(TrainedModel { params: state.params, fingerprint })
}

fn oracle_model(dir: &Path, input_resolution: usize) -> CliResult<OracleModel> {
    let info_path = dir.join(DATASET_FILE);
    let info: DatasetInfo =
        serde_json::from_str(&fs::read_to_string(&info_path).map_err(io_err(&info_path))?).map_err(Error::from)?;
    let shapes = (0..info.n_shapes).map(|i| (crate::dataworld::shape_id(i), shape_for(info.kind, info.seed, i)));
    Ok(OracleModel { shapes: shapes.collect(), input_resolution })
}

pub fn cmd_eval(cli: &Cli, a: &EvalArgs) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?.eval,
        None => EvalConfig::default(),
    };
    if let Some(r) = a.resolution {
        cfg.render_resolution = r;
    }
    if let Some(s) = a.samples_per_ray {
        cfg.samples_per_ray = s;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let data = set_dir(&a.data, PSEUDO_REAL_DIR);
    let instances = load_eval_set(&data)?;
    let model: Box<dyn Reconstruct> = match (&a.checkpoint, a.oracle) {
        (_, true) => {
            let res = instances.first().map_or(1, |i| i.input.width());
            Box::new(oracle_model(&data, res)?)
        }
        (Some(p), false) => Box::new(load_model(p)?),
        (None, false) => return Err(CliError::Usage("--checkpoint is required".into())),
    };
    let perceptual = RandomConvPyramid::default();
    let inputs: Vec<(String, Image)> = instances.iter().map(|i| (i.id.clone(), i.input.clone())).collect();
    let suites = match a.suite {
        SuiteArg::Nvs => vec![Suite::Nvs],
        SuiteArg::Semantic => vec![Suite::Semantic],
        SuiteArg::SelfConsistency => vec![Suite::SelfConsistency],
        SuiteArg::All => Suite::ALL.to_vec(),
    };
    let out = output_path(cli, &a.out);
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let mut reports = Vec::new();
    for suite in suites {
        let report = match suite {
            Suite::Nvs => nvs_suite(model.as_ref(), &instances, &perceptual, &cfg)?,
            Suite::Semantic => {
                semantic_similarity_suite(model.as_ref(), &inputs, &GradientHistogramEmbedder, &perceptual, &cfg)?
            }
            Suite::SelfConsistency => self_consistency_suite(model.as_ref(), &inputs, &perceptual, &cfg)?,
        };
        report.write(&report_path(&out, suite))?;
        reports.push(report);
    }
    print!("{}", summary_table(&reports));
    Ok(())
}

pub fn report_path(dir: &Path, suite: Suite) -> PathBuf {
    dir.join(format!("{}.json", suite.name()))
}

/// Poses for `render`: explicit azimuth/elevation pairs, then turntable frames.
pub fn render_poses(azimuths: &[f64], elevations: &[f64], turntable: Option<usize>) -> Result<Vec<RelativePose>> {
    let elevation_at = |k: usize| match elevations.len() {
        0 => Ok(0.0),
        1 => Ok(elevations[0]),
        n if n == azimuths.len() => Ok(elevations[k]),
        n => Err(Error::InvalidArgument(format!("{} azimuths but {n} elevations", azimuths.len()))),
    };
    let mut poses = azimuths
        .iter()
        .enumerate()
        .map(|(k, &az)| Ok(RelativePose { azimuth_deg: az, elevation_deg: elevation_at(k)? }))
        .collect::<Result<Vec<_>>>()?;
    if azimuths.is_empty() && !elevations.is_empty() {
        return Err(Error::InvalidArgument("elevations given without azimuths".into()));
    }
    if let Some(n) = turntable {
        if n == 0 {
            return Err(Error::InvalidArgument("turntable frame count must be positive".into()));
        }
        poses.extend(semantic_schedule(n));
    }
    Ok(poses)
}

#[derive(Serialize)]
struct RenderManifest<'a> {
    checkpoint_config_hash: String,
    seed: u64,
    resolution: usize,
    samples_per_ray: usize,
    frames: Vec<(&'a str, RelativePose)>,
}

pub fn cmd_render(cli: &Cli, a: &RenderArgs) -> CliResult<()> {
    let poses = render_poses(&a.azimuths, &a.elevations, a.turntable).map_err(|e| CliError::Usage(e.to_string()))?;
    if poses.is_empty() {
        return Err(CliError::Usage("nothing to render: give --azimuths or --turntable".into()));
    }
    if !a.checkpoint.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", a.checkpoint.display())));
    }
    let state = read_checkpoint(&a.checkpoint)?;
    let image = Image::load_png(&a.image)?;
    let res = a.resolution.unwrap_or(state.config.model.input_resolution);
    let spp = a.samples_per_ray.unwrap_or(state.config.samples_per_ray);
    let settings = RenderSettings::new(res, spp);
    settings.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let hash = state.config.hash();
    let seed = state.config.seed;
    let model = TrainedModel { fingerprint: hash.clone(), params: state.params };
    let scene = model.reconstruct("input", &image)?;
    let out = output_path(cli, &a.out);
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let n_explicit = a.azimuths.len();
    let names: Vec<String> = poses
        .iter()
        .enumerate()
        .map(|(k, p)| {
            if k < n_explicit {
                format!("view_{k:03}_az{}_el{}.png", p.azimuth_deg, p.elevation_deg)
            } else {
                format!("turntable_{:03}.png", k - n_explicit)
            }
        })
        .collect();
    for (name, pose) in names.iter().zip(&poses) {
        let view = scene.render(&camera_at(&settings.rig, *pose)?, &settings)?;
        composite_background(&view, [BACKGROUND_GRAY; 3]).save_png(&out.join(name))?;
    }
    let manifest = RenderManifest {
        checkpoint_config_hash: hash,
        seed,
        resolution: res,
        samples_per_ray: spp,
        frames: names.iter().map(String::as_str).zip(poses.iter().copied()).collect(),
    };
    let path = out.join("render.json");
    write_text(&path, &(serde_json::to_string_pretty(&manifest).map_err(Error::from)? + "\n"))?;
    println!("wrote {} frames to {}", poses.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.train.apply_ablation(Ablation::E2eCycle);
        cfg.data.synthetic = Some("data/synth".into());
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults_and_validates() {
        let cfg = RunConfig::from_toml("[train]\nj_max = 10\n[train.model]\nblocks = 1\n").unwrap();
        assert_eq!(cfg.train.j_max, 10);
        assert_eq!(cfg.train.model.blocks, 1);
        assert_eq!(cfg.train.weights, Default::default());
        assert!(matches!(RunConfig::from_toml("[train]\nbatch_size = 3\n"), Err(Error::InvalidArgument(_))));
        assert!(RunConfig::from_toml("[train]\nunknown_key = 1\n").is_err());
    }

    #[test]
    fn render_pose_lists() {
        let p = render_poses(&[0.0, 90.0], &[10.0], Some(4)).unwrap();
        assert_eq!(p.len(), 6);
        assert_eq!(p[1], RelativePose { azimuth_deg: 90.0, elevation_deg: 10.0 });
        assert_eq!(p[5].azimuth_deg, 270.0);
        assert!(render_poses(&[0.0, 1.0, 2.0], &[1.0, 2.0], None).is_err());
        assert!(render_poses(&[], &[], Some(0)).is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_from_args(["selfrecon", "generate-data", "--kind", "synthetic", "--shapes", "2"]), 2);
        assert_eq!(
            run_from_args(["selfrecon", "eval", "--suite", "bogus", "--oracle", "--data", "x", "--out", "y"]),
            2
        );
        assert_eq!(run_from_args(["selfrecon", "train", "--config", "c.toml", "--ablate", "nope"]), 2);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.bin");
        let args = ["selfrecon", "render", "--checkpoint", missing.to_str().unwrap(), "--image", "x.png", "--out"];
        let mut args: Vec<&str> = args.to_vec();
        args.extend([dir.path().to_str().unwrap(), "--azimuths", "0"]);
        assert_eq!(run_from_args(args), 2);
    }
}
