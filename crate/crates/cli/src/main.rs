//! `terramesh` command line: synthetic data, initialization, refinement, training,
//! evaluation, incremental merging and export.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use terramesh::init::{initialize_mesh, DEFAULT_W_REG};
use terramesh::io::{self, KeyValues, ManifestEntry};
use terramesh::losses::{eval_metrics, FrameTarget, LossWeights, SemanticVariant};
use terramesh::merge::{merge_local, GlobalMesh, MergeConfig, DEFAULT_COVERAGE_THRESHOLD};
use terramesh::mesh::{make_grid_mesh, to_global, DEFAULT_CLASSES, DEFAULT_SAMPLE_COUNT};
use terramesh::refine::{
    refine_frame, semantic_init, train_toy, FrameInputs, GcnWeights, Optimizer, RefineConfig, TrainingFrame,
};
use terramesh::synth::{
    desk_camera, generate_frames, generate_scene, sweep_trajectory, FrameConfig, SceneConfig, TrajectoryConfig,
};
use terramesh::{Camera64, Error, Mesh64, Raster64, Result};

const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "terramesh", version, about = "Metric-semantic terrain meshes from sparse depth")]
struct Cli {
    /// Key-value file supplying defaults for any flag; flags on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-frame work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic sweep and write its frames plus a manifest.
    Synth(SynthArgs),
    /// Closed-form initial mesh from sparse depth.
    Init(InitArgs),
    /// Refine an initialized mesh with trained weights.
    Refine(RefineArgs),
    /// Train refinement weights on the frames of a manifest.
    Train(TrainArgs),
    /// Print evaluation metrics of a mesh against a ground-truth frame.
    Eval(EvalArgs),
    /// Merge the keyframes of a manifest into one global mesh.
    Merge(MergeArgs),
    /// Convert a mesh to another format.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InitArgs {
    #[arg(long)]
    sparse: PathBuf,
    #[arg(long)]
    camera: PathBuf,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    wreg: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RefineArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    rgb: PathBuf,
    #[arg(long)]
    sparse: PathBuf,
    #[arg(long)]
    segfeat: Option<PathBuf>,
    #[arg(long)]
    camera: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_weights: PathBuf,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    wreg: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    sem: Option<PathBuf>,
    #[arg(long)]
    camera: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct MergeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    wreg: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Ply,
    Obj,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long, value_enum, default_value = "ply")]
    format: Format,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Flag values layered over an optional config file.
struct Settings {
    kv: KeyValues,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        Ok(Self { kv: path.map(KeyValues::load).transpose()?.unwrap_or_default() })
    }

    fn usize(&self, flag: Option<usize>, key: &str, default: usize) -> Result<usize> {
        Ok(flag.or(self.kv.integer(key)?).unwrap_or(default))
    }

    fn u64(&self, flag: Option<u64>, key: &str, default: u64) -> Result<u64> {
        Ok(flag.or(self.kv.integer(key)?.map(|v| v as u64)).unwrap_or(default))
    }

    fn f64(&self, flag: Option<f64>, key: &str, default: f64) -> Result<f64> {
        Ok(flag.or(self.kv.number(key)?).unwrap_or(default))
    }

    fn refine_config(&self, seed: Option<u64>, epochs: Option<usize>) -> Result<RefineConfig<f64>> {
        let mut cfg = RefineConfig::<f64>::default();
        cfg.seed = self.u64(seed, "seed", cfg.seed)?;
        cfg.epochs = self.usize(epochs, "epochs", cfg.epochs)?;
        cfg.stages = self.usize(None, "stages", cfg.stages)?;
        cfg.hidden = self.usize(None, "hidden", cfg.hidden)?;
        cfg.learning_rate = self.f64(None, "learning_rate", cfg.learning_rate)?;
        cfg.depth_scale = self.f64(None, "depth_scale", cfg.depth_scale)?;
        cfg.step_scale = self.f64(None, "step_scale", cfg.step_scale)?;
        cfg.loss.samples = self.usize(None, "samples", cfg.loss.samples)?;
        if let Some(opt) = self.kv.string("optimizer")? {
            cfg.optimizer = opt.parse::<Optimizer>()?;
        }
        if let Some(v) = self.kv.string("semantic_loss")? {
            cfg.loss.variant = v.parse::<SemanticVariant>()?;
        }
        if let Some(w) = self.kv.numbers("loss_weights", 6)? {
            cfg.loss.weights = LossWeights::new([w[0], w[1], w[2], w[3], w[4], w[5]])?;
        }
        cfg.semantic = self.kv.boolean("semantic")?.unwrap_or(cfg.loss.weights.uses_semantics());
        if cfg.semantic && !cfg.loss.weights.uses_semantics() {
            cfg.loss.weights = LossWeights::metric_semantic();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("ERR usage: {first}");
            eprintln!("{}", e.render());
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("ERR {}: {message}", e.code());
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    let jobs = settings.usize(cli.jobs, "jobs", 1)?.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Synth(a) => synth(&settings, a),
        Command::Init(a) => init(&settings, a),
        Command::Refine(a) => refine(&settings, a),
        Command::Train(a) => train(&settings, a),
        Command::Eval(a) => eval(&settings, a),
        Command::Merge(a) => merge(&settings, a),
        Command::Export(a) => export(a),
    })
}

fn synth(settings: &Settings, a: SynthArgs) -> Result<()> {
    let seed = settings.u64(a.seed, "seed", 0)?;
    let frames = settings.usize(a.frames, "frames", 5)?;
    let rows = settings.usize(a.rows, "rows", 1)?.max(1);
    if frames == 0 {
        return Err(Error::InvalidArgument("--frames must be positive".into()));
    }
    let mut frame_cfg = FrameConfig::default();
    frame_cfg.sparse_count = settings.usize(None, "sparse_count", frame_cfg.sparse_count)?;
    frame_cfg.sparse_sigma = settings.f64(None, "sparse_sigma", frame_cfg.sparse_sigma)?;
    frame_cfg.seg_noise = settings.f64(None, "seg_noise", frame_cfg.seg_noise)?;
    let cam = desk_camera();
    let scene = generate_scene(seed, &SceneConfig::default())?;
    let traj = TrajectoryConfig {
        altitude: settings.f64(None, "altitude", 100.0)?,
        row_spacing: 35.0,
        along_spacing: 35.0,
        rows,
        frames_per_row: frames.div_ceil(rows),
        start: [60.0, if rows == 1 { 150.0 } else { 60.0 }],
    };
    let mut poses = sweep_trajectory(&traj, &cam)?;
    poses.truncate(frames);
    let frames = generate_frames(&scene, &poses, &cam, &frame_cfg, seed)?;
    let mut entries = Vec::with_capacity(frames.len());
    for f in &frames {
        let dir = a.out.join(format!("frame_{:03}", f.id));
        let entry = ManifestEntry {
            frame_id: f.id,
            rgb: dir.join("rgb.tmr"),
            depth: dir.join("depth.tmr"),
            sem: dir.join("sem.tmr"),
            sparse: dir.join("sparse.csv"),
            camera: dir.join("camera.txt"),
            segfeat: Some(dir.join("segfeat.tmr")),
        };
        io::save_raster(&entry.rgb, &f.truth.rgb)?;
        io::save_raster(&entry.depth, &f.truth.depth)?;
        io::save_raster(&entry.sem, &f.truth.semantics)?;
        io::write_file(&entry.sparse, io::format_sparse(&f.sparse).as_bytes())?;
        io::write_file(&entry.camera, io::format_camera(&f.camera).as_bytes())?;
        if let Some(p) = &entry.segfeat {
            io::save_raster(p, &f.seg_scores)?;
        }
        entries.push(entry);
    }
    io::write_file(&a.out.join("manifest.txt"), io::format_manifest(&entries, &a.out).as_bytes())?;
    println!("frames {}", entries.len());
    Ok(())
}

/// Initial mesh of a keyframe in its camera frame.
fn local_init(camera: &Camera64, sparse: &Path, side: usize, w_reg: f64) -> Result<Mesh64> {
    let sparse = io::load_sparse(sparse, camera.width, camera.height)?;
    let local = camera.local();
    initialize_mesh(&make_grid_mesh(side, &local)?, &sparse, &local, w_reg)
}

fn init(settings: &Settings, a: InitArgs) -> Result<()> {
    let side = settings.usize(a.side, "side", 32)?;
    let w_reg = settings.f64(a.wreg, "wreg", DEFAULT_W_REG)?;
    let camera: Camera64 = io::load_camera(&a.camera)?;
    let mesh = local_init(&camera, &a.sparse, side, w_reg)?;
    io::save_mesh(&a.out, &to_global(&mesh, &camera.pose())?)
}

fn refine_config_for(settings: &Settings, weights: &GcnWeights<f64>) -> Result<RefineConfig<f64>> {
    let mut cfg = settings.refine_config(None, None)?;
    cfg.semantic = weights.has_semantic_head();
    cfg.stages = weights.stages.len();
    Ok(cfg)
}

/// Refined camera-frame mesh of a world-frame initial mesh.
fn refine_local(
    init_world: Mesh64,
    rgb: &Path,
    sparse: &Path,
    segfeat: Option<&Path>,
    camera: &Camera64,
    weights: &GcnWeights<f64>,
    cfg: &RefineConfig<f64>,
) -> Result<Mesh64> {
    let rgb: Raster64 = io::load_raster(rgb)?;
    let sparse = io::load_sparse(sparse, camera.width, camera.height)?;
    let seg: Option<Raster64> = segfeat.map(io::load_raster).transpose()?;
    if cfg.semantic && seg.is_none() {
        return Err(Error::InvalidArgument("weights have a semantic head; --segfeat is required".into()));
    }
    let context = if cfg.semantic { seg.clone() } else { None };
    let frame = FrameInputs::prepare(init_world, &rgb, &sparse, context, camera, cfg)?;
    let refined = refine_frame(&frame, weights, cfg.step_scale)?;
    match seg {
        // a geometric-only head leaves the scores untouched, so they come from the segmentation
        Some(seg) if !cfg.semantic => {
            let scores = semantic_init(&refined, &seg, &camera.local())?;
            Ok(refined.with_semantics(scores))
        }
        _ => Ok(refined),
    }
}

fn refine(settings: &Settings, a: RefineArgs) -> Result<()> {
    let camera: Camera64 = io::load_camera(&a.camera)?;
    let weights = io::load_weights(&a.weights)?;
    let cfg = refine_config_for(settings, &weights)?;
    let mesh = io::load_mesh(&a.mesh)?;
    let local = refine_local(mesh, &a.rgb, &a.sparse, a.segfeat.as_deref(), &camera, &weights, &cfg)?;
    io::save_mesh(&a.out, &to_global(&local, &camera.pose())?)
}

fn train(settings: &Settings, a: TrainArgs) -> Result<()> {
    let side = settings.usize(a.side, "side", 32)?;
    let w_reg = settings.f64(a.wreg, "wreg", DEFAULT_W_REG)?;
    let cfg = settings.refine_config(a.seed, a.epochs)?;
    let entries = io::load_manifest(&a.manifest)?;
    let frames = entries
        .par_iter()
        .enumerate()
        .map(|(k, e)| -> Result<TrainingFrame<f64>> {
            let camera: Camera64 = io::load_camera(&e.camera)?;
            let init = to_global(&local_init(&camera, &e.sparse, side, w_reg)?, &camera.pose())?;
            let rgb: Raster64 = io::load_raster(&e.rgb)?;
            let sparse = io::load_sparse(&e.sparse, camera.width, camera.height)?;
            let seg = match (&e.segfeat, cfg.semantic) {
                (Some(p), true) => Some(io::load_raster(p)?),
                (None, true) => {
                    return Err(Error::Validation(format!("frame {}: semantic training needs segfeat", e.frame_id)))
                }
                _ => None,
            };
            let truth_sem = cfg.semantic.then(|| io::load_raster(&e.sem)).transpose()?;
            let inputs = FrameInputs::prepare(init, &rgb, &sparse, seg, &camera, &cfg)?;
            TrainingFrame::new(
                inputs,
                io::load_raster(&e.depth)?,
                truth_sem,
                cfg.loss.samples,
                cfg.seed.wrapping_add(k as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let result = train_toy(&frames, &cfg)?;
    io::save_weights(&a.out_weights, &result.weights)?;
    if let (Some(first), Some(last)) = (result.history.first(), result.history.last()) {
        println!("initial_loss {:?}", first.total);
        println!("final_loss {:?}", last.total);
    }
    Ok(())
}

fn eval(settings: &Settings, a: EvalArgs) -> Result<()> {
    let threshold = settings.f64(a.threshold, "threshold", 0.5)?;
    let samples = settings.usize(a.samples, "samples", DEFAULT_SAMPLE_COUNT)?;
    let seed = settings.u64(a.seed, "seed", 0)?;
    let camera: Camera64 = io::load_camera(&a.camera)?;
    let mesh: Mesh64 = io::load_mesh(&a.mesh)?;
    let depth = io::load_raster(&a.depth)?;
    let sem = a.sem.as_deref().map(io::load_raster).transpose()?;
    let target = FrameTarget::new(camera, depth, sem, samples, seed)?;
    let metrics = eval_metrics(&mesh, &target, threshold, samples, seed.wrapping_add(1))?;
    print!("{}", metrics.to_kv());
    Ok(())
}

fn merge(settings: &Settings, a: MergeArgs) -> Result<()> {
    let side = settings.usize(a.side, "side", 32)?;
    let w_reg = settings.f64(a.wreg, "wreg", DEFAULT_W_REG)?;
    let mut cfg = MergeConfig::<f64> {
        threshold: settings.f64(a.threshold, "threshold", DEFAULT_COVERAGE_THRESHOLD)?,
        ..MergeConfig::default()
    };
    cfg.seed = settings.u64(a.seed, "seed", cfg.seed)?;
    let weights = a.weights.as_deref().map(io::load_weights::<f64>).transpose()?;
    let rcfg = weights.as_ref().map(|w| refine_config_for(settings, w)).transpose()?;
    let entries = io::load_manifest(&a.manifest)?;
    let locals = entries
        .par_iter()
        .map(|e| -> Result<(Camera64, Mesh64)> {
            let camera: Camera64 = io::load_camera(&e.camera)?;
            let init = local_init(&camera, &e.sparse, side, w_reg)?;
            let mesh = match (&weights, &rcfg) {
                (Some(w), Some(c)) => {
                    let world = to_global(&init, &camera.pose())?;
                    refine_local(world, &e.rgb, &e.sparse, e.segfeat.as_deref(), &camera, w, c)?
                }
                _ => match &e.segfeat {
                    Some(p) => {
                        let seg = io::load_raster(p)?;
                        let scores = semantic_init(&init, &seg, &camera.local())?;
                        init.with_semantics(scores)
                    }
                    None => init,
                },
            };
            Ok((camera, mesh))
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = locals.first().map_or(DEFAULT_CLASSES, |(_, m)| m.classes());
    let mut global = GlobalMesh::empty(classes);
    let stdout = std::io::stdout();
    let mut log = stdout.lock();
    for (e, (camera, local)) in entries.iter().zip(&locals) {
        let report = merge_local(&mut global, e.frame_id, local, camera, &cfg)?;
        writeln!(log, "{report}")?;
    }
    io::save_mesh(&a.out, &global.mesh)
}

fn export(a: ExportArgs) -> Result<()> {
    let mesh: Mesh64 = io::load_mesh(&a.mesh)?;
    let text = match a.format {
        Format::Ply => io::format_ply(&mesh),
        Format::Obj => io::format_obj(&mesh),
    };
    match &a.out {
        Some(p) => io::write_file(p, text.as_bytes()),
        None => match std::io::stdout().lock().write_all(text.as_bytes()) {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
            other => Ok(other?),
        },
    }
}
