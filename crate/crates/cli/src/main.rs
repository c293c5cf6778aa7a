//! `mpiforge`: synthetic scenes, MPI refinement, rendering, training and
//! evaluation from the command line.
//!
//! Exit codes: 0 success, 2 usage error, 1 runtime error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mpiforge::geometry::{make_depth_planes, PinholeCamera};
use mpiforge::io::args::{parse_color, parse_list, parse_range, parse_size, parse_views};
use mpiforge::io::{
    load_scene_dir, read_checkpoint, read_mpi, read_png, read_rig, read_weights, write_checkpoint, write_mpi,
    write_png, write_rig, write_scene_file, Checkpoint,
};
use mpiforge::metrics::image_metrics;
use mpiforge::refiner::{run_refiner_with, RefinerConfig, RefinerContext};
use mpiforge::render::{render_novel_view, Mpi, Reduction};
use mpiforge::training::{
    evaluate, generate_scene, test_pool, Curriculum, EvalProtocol, SceneFamily, SceneSpec, TrainConfig, Trainer,
};
use mpiforge::{Error, Image, ImageStack};

#[derive(Parser)]
#[command(name = "mpiforge", version, about = "Multi-plane image view synthesis")]
struct Cli {
    /// Machine-readable JSON on standard output.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads (defaults to MPIFORGE_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic scenes with analytic ground truth.
    #[command(subcommand)]
    Scene(SceneCommand),
    /// Build an MPI from input views with the recurrent refiner.
    Refine(RefineArgs),
    /// Render an MPI into a camera.
    Render(RenderArgs),
    /// Train the refiner on synthetic scenes.
    Train(TrainArgs),
    /// Image metrics: PSNR, SSIM and MAE.
    Eval(EvalArgs),
}

#[derive(Subcommand)]
enum SceneCommand {
    Generate(GenerateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "64x64")]
    size: String,
    /// Number of rig views to write, row-major from c00.
    #[arg(long, default_value_t = 9)]
    views: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 1.5)]
    znear: f64,
    /// Planes of the ground-truth MPI; layer depths snap onto them.
    #[arg(long, default_value_t = 8)]
    planes: usize,
    #[arg(long, default_value_t = mpiforge::training::TOY_BASELINE)]
    baseline: f64,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    cameras: PathBuf,
    #[arg(long)]
    images: PathBuf,
    /// Comma-separated camera names, e.g. c00,c02,c20,c22.
    #[arg(long)]
    views: String,
    #[arg(long)]
    planes: usize,
    #[arg(long, default_value_t = 1.5)]
    znear: f64,
    #[arg(long, default_value_t = 4)]
    iters: usize,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Order-independent reductions; output is byte-identical for any view order.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    mpi: PathBuf,
    /// Rig file holding the target camera.
    #[arg(long)]
    camera: PathBuf,
    /// Camera name, required when the rig file holds several.
    #[arg(long)]
    view: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "#000000")]
    background: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory with scene.json, or with one sub-directory per scene.
    #[arg(long, conflicts_with = "procedural", required_unless_present = "procedural")]
    scenes: Option<PathBuf>,
    /// A fresh synthetic scene every step.
    #[arg(long)]
    procedural: bool,
    #[arg(long)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path; the sidecar goes to <out>.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    deterministic: bool,
    #[arg(long, default_value = "32x32")]
    size: String,
    #[arg(long, default_value = "2,5")]
    views_range: String,
    #[arg(long, default_value = "8,16")]
    planes_range: String,
    #[arg(long, default_value_t = 1.5)]
    znear: f64,
    #[arg(long)]
    lr: Option<f64>,
    /// Constant number of refinement steps instead of the curriculum.
    #[arg(long)]
    k: Option<usize>,
    /// JSON-lines metrics file (default <out>.metrics.jsonl).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, requires = "target")]
    pred: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long, requires_all = ["cameras", "images", "target_view"])]
    mpi: Option<PathBuf>,
    #[arg(long)]
    cameras: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    target_view: Option<String>,
    #[arg(long, default_value = "#000000")]
    background: String,
    /// Held-out table over refinement counts for these weights.
    #[arg(long, requires = "k")]
    weights: Option<PathBuf>,
    /// Comma-separated refinement counts.
    #[arg(long)]
    k: Option<String>,
    /// Test scenes for the table; defaults to a generated pool.
    #[arg(long)]
    scenes: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pool: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "32x32")]
    size: String,
    #[arg(long, default_value_t = 8)]
    planes: usize,
    #[arg(long, default_value_t = 1.5)]
    znear: f64,
}

/// Usage errors exit with 2, everything else with 1.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Domain(_) | Error::Shape(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Runtime context for errors that are not the caller's fault.
fn runtime<T>(r: mpiforge::Result<T>, what: &str) -> Outcome<T> {
    r.map_err(|e| Failure::Runtime(format!("{what}: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = cli.threads.or_else(|| std::env::var("MPIFORGE_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        if n == 0 {
            eprintln!("error: thread count must be positive");
            return ExitCode::from(2);
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Scene(SceneCommand::Generate(a)) => scene_generate(a, cli.json),
        Command::Refine(a) => refine(a, cli.json),
        Command::Render(a) => render(a, cli.json),
        Command::Train(a) => train(a, cli.json),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn report(json: bool, value: serde_json::Value, human: String) {
    if json {
        println!("{value}");
    } else {
        println!("{human}");
    }
}

fn scene_generate(a: GenerateArgs, json: bool) -> Outcome {
    let (width, height) = parse_size(&a.size)?;
    if !(1..=9).contains(&a.views) {
        return Err(usage("--views must be between 1 and 9"));
    }
    if a.layers < 2 {
        return Err(usage("--layers must be at least 2"));
    }
    let spec = SceneSpec {
        width,
        height,
        layers: a.layers,
        z_near: a.znear,
        baseline: a.baseline,
        family: if a.layers == 2 {
            SceneFamily::TwoPlane
        } else {
            SceneFamily::Layered
        },
        snap_planes: Some(a.planes),
        ..SceneSpec::two_plane(width, height)
    };
    let scene = generate_scene(a.seed, &spec)?;
    let planes = make_depth_planes(a.planes, f64::INFINITY, a.znear)?;
    std::fs::create_dir_all(&a.out)?;
    let cams = &scene.rig[..a.views];
    for cam in cams {
        runtime(write_png(a.out.join(format!("{}.png", cam.name)), &scene.render(cam)), "writing image")?;
    }
    runtime(write_rig(a.out.join("cameras.json"), cams), "writing cameras")?;
    let truth = scene.ground_truth_mpi(&scene.rig[4], &planes)?;
    let truth = Mpi {
        data: truth.data.cast::<f32>(),
        planes: truth.planes,
        reference: truth.reference,
    };
    runtime(write_mpi(a.out.join("ground_truth.mpiv"), &truth), "writing MPI")?;
    runtime(write_scene_file(&a.out, &scene), "writing scene file")?;
    report(
        json,
        serde_json::json!({"out": a.out, "views": cams.iter().map(|c| &c.name).collect::<Vec<_>>(), "planes": a.planes}),
        format!("wrote {} views and a {}-plane ground truth to {}", cams.len(), a.planes, a.out.display()),
    );
    Ok(())
}

fn select_cameras(rig: &[PinholeCamera], names: &[String]) -> Outcome<Vec<PinholeCamera>> {
    names
        .iter()
        .map(|n| {
            rig.iter()
                .find(|c| &c.name == n)
                .cloned()
                .ok_or_else(|| usage(format!("camera {n:?} is not in the rig file")))
        })
        .collect()
}

fn load_view(dir: &Path, cam: &PinholeCamera) -> Outcome<Image<f32>> {
    let img: Image<f32> = runtime(read_png(dir.join(format!("{}.png", cam.name))), &format!("reading {}", cam.name))?;
    if (img.width, img.height) != (cam.width, cam.height) {
        return Err(usage(format!(
            "image {}.png is {}x{} but the camera says {}x{}",
            cam.name, img.width, img.height, cam.width, cam.height
        )));
    }
    Ok(img)
}

fn refine(a: RefineArgs, json: bool) -> Outcome {
    let names = parse_views(&a.views)?;
    if a.planes < 2 {
        return Err(usage("--planes must be at least 2"));
    }
    let rig = runtime(read_rig(&a.cameras), "reading cameras")?;
    let cams = select_cameras(&rig, &names)?;
    let images = cams.iter().map(|c| load_view(&a.images, c)).collect::<Outcome<Vec<_>>>()?;
    let (w, h) = (cams[0].width, cams[0].height);
    if w % 4 != 0 || h % 4 != 0 || a.planes % 4 != 0 {
        let snap = |v: usize| (v / 4 * 4).max(4);
        return Err(usage(format!(
            "images are {w}x{h} with {} planes; the refiner needs multiples of 4, e.g. {}x{} and --planes {}",
            a.planes,
            snap(w),
            snap(h),
            snap(a.planes)
        )));
    }
    let params = runtime(read_weights(&a.weights), "reading weights")?;
    let planes = make_depth_planes(a.planes, f64::INFINITY, a.znear)?;
    let mut config = RefinerConfig::new(a.iters, planes.clone())?;
    config.reduction = if a.deterministic {
        Reduction::Sorted
    } else {
        Reduction::Ordered
    };
    let stack = ImageStack::new(images, cams)?;
    let ctx = RefinerContext::new(&stack, &planes)?;
    let mut clock = Instant::now();
    let mpi = run_refiner_with(&ctx, &config, &params, |k, _| {
        eprintln!("iteration {k}: {:.1} ms", clock.elapsed().as_secs_f64() * 1e3);
        clock = Instant::now();
    })
    .map_err(|e| match e {
        Error::NonFinite(m) => Failure::Runtime(format!("refinement diverged: {m}")),
        other => other.into(),
    })?;
    runtime(write_mpi(&a.out, &mpi), "writing MPI")?;
    report(
        json,
        serde_json::json!({"out": a.out, "width": w, "height": h, "planes": a.planes, "iterations": a.iters}),
        format!("wrote {w}x{h}x{} MPI after {} iterations to {}", a.planes, a.iters, a.out.display()),
    );
    Ok(())
}

fn pick_camera(path: &Path, view: Option<&str>) -> Outcome<PinholeCamera> {
    let rig = runtime(read_rig(path), "reading camera")?;
    match view {
        Some(name) => Ok(select_cameras(&rig, &[name.to_string()])?.remove(0)),
        None if rig.len() == 1 => Ok(rig[0].clone()),
        None => Err(usage(format!("{} holds {} cameras; pick one with --view", path.display(), rig.len()))),
    }
}

fn render_to(mpi: &Mpi<f32>, cam: &PinholeCamera, background: [f64; 3]) -> Outcome<Image<f32>> {
    if (cam.width, cam.height) != (mpi.reference.width, mpi.reference.height) {
        return Err(usage(format!(
            "camera {:?} is {}x{} but the MPI is {}x{}",
            cam.name, cam.width, cam.height, mpi.reference.width, mpi.reference.height
        )));
    }
    let comp = render_novel_view(mpi, cam)?;
    Ok(comp.over_background(background.map(|v| v as f32)))
}

fn render(a: RenderArgs, json: bool) -> Outcome {
    let background = parse_color(&a.background)?;
    let mpi = runtime(read_mpi(&a.mpi), "reading MPI")?;
    let cam = pick_camera(&a.camera, a.view.as_deref())?;
    let img = render_to(&mpi, &cam, background)?;
    runtime(write_png(&a.out, &img), "writing image")?;
    report(
        json,
        serde_json::json!({"out": a.out, "camera": cam.name}),
        format!("rendered {} to {}", cam.name, a.out.display()),
    );
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn train(a: TrainArgs, json: bool) -> Outcome {
    let scenes = a.scenes.as_ref().map(|d| runtime(load_scene_dir(d), "reading scenes")).transpose()?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = runtime(read_checkpoint(path), "reading checkpoint")?;
            let mut t = Trainer::resume(&ckpt.meta, ckpt.params, ckpt.adam)?;
            t.config.total_iterations = a.iters;
            t
        }
        None => {
            let (width, height) = parse_size(&a.size)?;
            let mut config = TrainConfig::toy(a.iters, width, a.seed);
            match &scenes {
                Some(s) => config.scene = s[0].spec.clone(),
                None => config.scene = SceneSpec::two_plane(width, height),
            }
            config.n_views_range = parse_range(&a.views_range)?;
            config.d_planes_range = parse_range(&a.planes_range)?;
            config.z_near = a.znear;
            config.scene.z_near = config.scene.z_near.max(a.znear);
            config.deterministic = a.deterministic;
            if let Some(lr) = a.lr {
                config.adam.learning_rate = lr;
            }
            if let Some(k) = a.k {
                config.curriculum = Curriculum::constant(k);
            }
            Trainer::new(config)?
        }
    };
    if let Some(s) = scenes {
        trainer.use_scenes(s)?;
    }
    let metrics_path = a.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.jsonl"));
    let mut metrics = BufWriter::new(if a.resume.is_some() {
        File::options().create(true).append(true).open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    });
    let save = |t: &Trainer| {
        let ckpt = Checkpoint {
            params: t.params.clone(),
            adam: t.adam.clone(),
            meta: t.meta(),
        };
        write_checkpoint(&a.out, &ckpt)
    };
    let every = a.checkpoint_every.unwrap_or(0);
    let started = Instant::now();
    while trainer.iteration < trainer.config.total_iterations {
        let record = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                let dump = with_suffix(&a.out, ".diagnostics.json");
                let body = serde_json::json!({"error": e.to_string(), "meta": trainer.meta()});
                let _ = std::fs::write(&dump, format!("{body:#}\n"));
                return Err(match e {
                    Error::NonFinite(m) => Failure::Runtime(format!("training diverged ({}): {m}", dump.display())),
                    other => other.into(),
                });
            }
        };
        serde_json::to_writer(&mut metrics, &record)?;
        metrics.write_all(b"\n")?;
        if every > 0 && record.iter % every == 0 {
            runtime(save(&trainer), "writing checkpoint")?;
        }
    }
    metrics.flush()?;
    runtime(save(&trainer), "writing checkpoint")?;
    report(
        json,
        serde_json::json!({"out": a.out, "iterations": trainer.iteration, "metrics": metrics_path}),
        format!(
            "trained {} iterations in {:.1} s; checkpoint {}",
            trainer.iteration,
            started.elapsed().as_secs_f64(),
            a.out.display()
        ),
    );
    Ok(())
}

fn print_metrics(pred: &Image<f32>, target: &Image<f32>) -> Outcome {
    let m = image_metrics(pred, target)?.capped();
    println!("{}", serde_json::json!({"psnr": m.psnr, "ssim": m.ssim, "mae": m.mae}));
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    if let (Some(pred), Some(target)) = (&a.pred, &a.target) {
        let p: Image<f32> = runtime(read_png(pred), "reading prediction")?;
        let t: Image<f32> = runtime(read_png(target), "reading target")?;
        return print_metrics(&p, &t);
    }
    if let Some(mpi_path) = &a.mpi {
        let (cameras, images, name) = (
            a.cameras.as_ref().expect("required by clap"),
            a.images.as_ref().expect("required by clap"),
            a.target_view.as_deref().expect("required by clap"),
        );
        let mpi = runtime(read_mpi(mpi_path), "reading MPI")?;
        let cam = pick_camera(cameras, Some(name))?;
        let truth = load_view(images, &cam)?;
        let pred = render_to(&mpi, &cam, parse_color(&a.background)?)?;
        return print_metrics(&pred, &truth);
    }
    if let Some(weights) = &a.weights {
        let ks = parse_list(a.k.as_deref().expect("required by clap"))?;
        let params = runtime(read_weights(weights), "reading weights")?;
        let scenes = match &a.scenes {
            Some(dir) => runtime(load_scene_dir(dir), "reading scenes")?,
            None => {
                let (w, h) = parse_size(&a.size)?;
                let mut config = TrainConfig::toy(1, w, a.seed);
                config.scene = SceneSpec::two_plane(w, h);
                test_pool(&config, a.pool)?
            }
        };
        let rows = evaluate(&params, &scenes, &ks, &EvalProtocol::corners(a.planes, a.znear))?;
        println!("{}", serde_json::to_string(&rows)?);
        return Ok(());
    }
    Err(usage(
        "give --pred and --target, or --mpi with --cameras, --images and --target-view, or --weights with --k",
    ))
}
