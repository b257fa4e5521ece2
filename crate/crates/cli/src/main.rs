use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use rootskel::bundle::{read_json, write_atomic, write_json, write_scene, BundleWriteOptions, SceneSpec};
use rootskel::config::DampingChoice;
use rootskel::metrics::{aggregate, write_metrics_csv};
use rootskel::pipeline::{render_overlay, run_pipeline, run_stage, Stage};
use rootskel::synthetic::{NoiseSpec, RenderSpec, RootSystemSpec, Scene};
use rootskel::{Error, ErrorKind, PipelineConfig};

#[derive(Parser)]
#[command(name = "rootskel", version, about = "Multi-view 3D root skeleton reconstruction")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    matching_threshold: Option<u32>,
    #[arg(long, global = true)]
    sba_iterations: Option<usize>,
    #[arg(long, global = true, value_enum)]
    damping_policy: Option<Damping>,
    #[arg(long, global = true)]
    angle_weight: Option<f64>,
    /// Third-view pruning threshold in pixels.
    #[arg(long, global = true)]
    dist_threshold: Option<f64>,
    /// Derive keypoint matches from the bundle's ground truth.
    #[arg(long, global = true)]
    oracle_matches: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Damping {
    Constant,
    Adaptive,
}

#[derive(Args)]
struct StageArgs {
    bundle: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene bundle.
    Generate(GenerateArgs),
    /// Pair boxes between consecutive views.
    Match(StageArgs),
    /// Triangulate, fuse and prune lateral roots.
    Triangulate(StageArgs),
    /// Refine poses and endpoints by bundle adjustment.
    Sba(StageArgs),
    /// Connect laterals into a main root.
    Connect(StageArgs),
    /// Score the skeleton against the bundle's ground truth.
    Evaluate(StageArgs),
    /// Write the skeleton as PLY.
    Export(StageArgs),
    /// Draw the reprojected skeleton over one view as SVG.
    RenderOverlay {
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long, default_value_t = 0)]
        view: usize,
    },
    /// Run every stage on one or more bundles.
    Run {
        #[arg(required = true)]
        bundles: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    output: PathBuf,
    /// Scene description (`root`, `render`, `noise`); flags below override it.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    cameras: Option<usize>,
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    laterals: Option<Vec<usize>>,
    #[arg(long)]
    keypoint_sigma: Option<f64>,
    #[arg(long)]
    detection_dropout: Option<f64>,
    #[arg(long)]
    match_outlier_rate: Option<f64>,
    #[arg(long)]
    match_dropout_rate: Option<f64>,
    #[arg(long)]
    pose_rotation_deg: Option<f64>,
    #[arg(long)]
    pose_translation_frac: Option<f64>,
    /// Store detections as raw prediction grids.
    #[arg(long)]
    raw_grids: bool,
    /// Leave out the matches files.
    #[arg(long)]
    no_matches: bool,
}

fn config(o: &Overrides) -> Result<PipelineConfig, Error> {
    let mut cfg = match &o.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.jobs {
        cfg.jobs = v;
    }
    if let Some(v) = o.matching_threshold {
        cfg.matching_threshold = v;
    }
    if let Some(v) = o.sba_iterations {
        cfg.sba_iterations = v;
    }
    if let Some(v) = o.damping_policy {
        cfg.damping_policy = match v {
            Damping::Constant => DampingChoice::Constant,
            Damping::Adaptive => DampingChoice::Adaptive,
        };
    }
    if let Some(v) = o.angle_weight {
        cfg.angle_weight = v;
    }
    if let Some(v) = o.dist_threshold {
        cfg.dist_threshold = v;
    }
    cfg.oracle_matches |= o.oracle_matches;
    cfg.validate()?;
    Ok(cfg)
}

fn generate(args: &GenerateArgs, cfg: &PipelineConfig) -> Result<(), Error> {
    let mut spec = match &args.scene {
        Some(p) => read_json(p)?,
        None => SceneSpec {
            root: RootSystemSpec::default(),
            render: RenderSpec::default(),
            noise: NoiseSpec::default(),
        },
    };
    spec.root.seed = cfg.seed;
    spec.noise.seed = cfg.seed;
    if let Some(n) = args.cameras {
        spec.render.camera_count = n;
    }
    if let Some(r) = &args.laterals {
        spec.root.lateral_count = [r[0], r[1]];
    }
    let noise = &mut spec.noise;
    for (value, field) in [
        (args.keypoint_sigma, &mut noise.keypoint_sigma),
        (args.detection_dropout, &mut noise.detection_dropout),
        (args.match_outlier_rate, &mut noise.match_outlier_rate),
        (args.match_dropout_rate, &mut noise.match_dropout_rate),
        (args.pose_rotation_deg, &mut noise.pose_rotation_deg),
        (args.pose_translation_frac, &mut noise.pose_translation_frac),
    ] {
        if let Some(v) = value {
            *field = v;
        }
    }
    let scene = Scene::synthesize(&spec.root, &spec.render, &spec.noise)?;
    write_scene(
        &scene,
        &args.output,
        BundleWriteOptions {
            raw_grids: args.raw_grids,
            matches: !args.no_matches,
        },
    )
}

fn run_many(bundles: &[PathBuf], output: &Path, cfg: &PipelineConfig) -> Result<(), Error> {
    if let [single] = bundles {
        run_pipeline(single, output, cfg)?;
        return Ok(());
    }
    let names: Vec<String> = bundles
        .iter()
        .enumerate()
        .map(|(i, b)| b.file_name().map_or_else(|| format!("scene_{i}"), |n| n.to_string_lossy().into_owned()))
        .collect();
    let results = bundles
        .par_iter()
        .zip(&names)
        .map(|(b, name)| run_pipeline(b, &output.join(name), cfg).map(|r| (name.clone(), r.metrics)))
        .collect::<Result<Vec<_>, Error>>()?;
    let rows: Vec<_> = results.into_iter().filter_map(|(n, m)| m.map(|m| (n, m))).collect();
    if !rows.is_empty() {
        let mut csv = Vec::new();
        write_metrics_csv(&rows, &mut csv)?;
        write_atomic(&output.join("metrics.csv"), &csv)?;
        let all: Vec<_> = rows.into_iter().map(|(_, m)| m).collect();
        write_json(&output.join("summary.json"), &aggregate(&all))?;
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), Error> {
    let cfg = config(&cli.overrides)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))?;
    let stage = |s: Stage, a: &StageArgs| run_stage(s, &a.bundle, &a.output, &cfg);
    match &cli.command {
        Command::Generate(args) => generate(args, &cfg),
        Command::Match(a) => stage(Stage::Match, a),
        Command::Triangulate(a) => stage(Stage::Triangulate, a),
        Command::Sba(a) => stage(Stage::Sba, a),
        Command::Connect(a) => stage(Stage::Connect, a),
        Command::Evaluate(a) => stage(Stage::Evaluate, a),
        Command::Export(a) => stage(Stage::Export, a),
        Command::RenderOverlay { stage: a, view } => {
            let path = render_overlay(&a.bundle, &a.output, *view, &cfg)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Run { bundles, output } => run_many(bundles, output, &cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Validation => 2,
        ErrorKind::Numerical => 3,
        ErrorKind::Io => 4,
    }
}
