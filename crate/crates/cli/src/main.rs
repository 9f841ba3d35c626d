use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use frugal_core::adapt::{adapt_train_ray, TrainViews};
use frugal_core::checkpoint::{load_checkpoint, save_checkpoint};
use frugal_core::config::{apply_override, config_help, Config};
use frugal_core::data::{
    affine_mono_depth, fixture_cameras, generate_fixture, generate_synthetic, load_scene, save_scene,
    sparse_points_from_gt, FixtureOptions, SceneDataset, SyntheticSceneSpec,
};
use frugal_core::geometry::{ray_for_pixel, Camera, PixelCoord};
use frugal_core::poses::spiral_poses;
use frugal_core::raster::DepthMap;
use frugal_core::render::{render_ray, sample_points, RenderOptions};
use frugal_core::train::{
    evaluate_views, grad_check, grad_check_problem, render_view, worker_threads, GradCheckOptions,
    LossSelector, TrainContext, Trainer, GRAD_CHECK_OVERRIDES,
};
use frugal_core::FrugalError;

#[derive(Parser)]
#[command(name = "frugal", version, about = "Few-shot voxel radiance fields", after_help = config_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file (missing keys take their defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set grid.base_res=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn all_overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("train.seed={s}"));
        }
        o
    }

    fn load(&self) -> Result<Config, FrugalError> {
        Config::load(self.config.as_deref(), &self.all_overrides())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a field on a scene; writes losses.csv, checkpoints and renders.
    #[command(after_help = config_help())]
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Scene directory (overrides data.scene).
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint; its config is the base for --set.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render views of a checkpoint to PNG and PFM depth.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which poses: `train`, `test`, `all`, `spiral` or comma-separated view indices.
        #[arg(long, default_value = "test")]
        views: String,
        /// Voxel scale to render (0 = finest).
        #[arg(long, default_value_t = 0)]
        scale: usize,
    },
    /// Evaluate a checkpoint on the test views; writes eval.csv and eval.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic textured scene (or one from a spec file).
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// JSON scene spec; the built-in scene when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        width: usize,
        #[arg(long, default_value_t = 100)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        sparse_per_view: usize,
        #[arg(long)]
        no_mono: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every loss adjoint on a small grid.
    CheckGrads {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Maximum accepted relative error.
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 64)]
        params: usize,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
    },
    /// Per-ray adaptation records for sampled pixels of a training view, as CSV.
    WarpDebug {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Position in the training split.
        #[arg(long, default_value_t = 0)]
        view: usize,
        #[arg(long, default_value_t = 256)]
        rays: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    Usage(String),
    Core(FrugalError),
    GradCheck(String),
}

impl From<FrugalError> for CliError {
    fn from(e: FrugalError) -> Self {
        CliError::Core(e)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(FrugalError::io(path, e))
}

fn exit_code(e: &CliError) -> u8 {
    match e {
        CliError::Usage(_) | CliError::Core(FrugalError::Config(_)) => 1,
        CliError::Core(FrugalError::NonFinite { .. }) | CliError::GradCheck(_) => 3,
        CliError::Core(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = match &e {
                CliError::Usage(m) | CliError::GradCheck(m) => m.clone(),
                CliError::Core(c) => c.to_string(),
            };
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train { cfg, scene, out, resume } => cmd_train(&cfg, scene, &out, resume),
        Command::Render { checkpoint, scene, out, views, scale } => cmd_render(&checkpoint, &scene, &out, &views, scale),
        Command::Eval { checkpoint, scene, out } => cmd_eval(&checkpoint, &scene, &out),
        Command::Synth { out, spec, width, height, sparse_per_view, no_mono, seed } => {
            cmd_synth(&out, spec.as_deref(), width, height, sparse_per_view, !no_mono, seed)
        }
        Command::CheckGrads { cfg, tol, params, step } => cmd_check_grads(&cfg, tol, params, step),
        Command::WarpDebug { checkpoint, scene, view, rays, seed, out } => {
            cmd_warp_debug(&checkpoint, &scene, view, rays, seed, &out)
        }
    }
}

fn mkdir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| io_err(p, e))
}

fn loss_header() -> &'static str {
    "iteration,total,ms_color,geo,tv_density,tv_appearance,depth_smoothness,l1,distortion,occlusion,sparse_depth,mono_depth,lr\n"
}

fn cmd_train(args: &ConfigArgs, scene: Option<PathBuf>, out: &Path, resume: Option<PathBuf>) -> Result<(), CliError> {
    let (cfg, mut trainer) = match &resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let mut value = ck.config.to_value();
            for o in args.all_overrides() {
                apply_override(&mut value, &o)?;
            }
            let cfg = Config::from_value(value)?;
            let t = Trainer::from_parts(cfg.clone(), ck.field, ck.adam, ck.iteration)?;
            (cfg, t)
        }
        None => {
            let cfg = args.load()?;
            (cfg.clone(), Trainer::new(cfg)?)
        }
    };
    let scene = scene
        .or_else(|| cfg.data.scene.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::Usage("no scene given (--scene or data.scene)".into()))?;
    let ds = load_scene(&scene)?;
    let ctx = TrainContext::new(&ds, &cfg)?;
    trainer = trainer.with_threads(worker_threads())?;
    mkdir(out)?;
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, format!("{:#}\n", cfg.to_value())).map_err(|e| io_err(&cfg_path, e))?;

    let csv_path = out.join("losses.csv");
    let fresh = resume.is_none() || !csv_path.exists();
    let mut csv = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&csv_path)
        .map_err(|e| io_err(&csv_path, e))?;
    if fresh {
        csv.write_all(loss_header().as_bytes()).map_err(|e| io_err(&csv_path, e))?;
    }
    let t = &cfg.train;
    while trainer.iteration < t.iterations {
        let r = trainer.step(&ctx).map_err(|e| {
            eprintln!("diagnostic: aborting at iteration {}", trainer.iteration);
            e
        })?;
        let m = &r.terms;
        let line = format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.iteration,
            r.total,
            m.ms_color,
            m.geo,
            m.tv_density,
            m.tv_appearance,
            m.depth_smoothness,
            m.l1,
            m.distortion,
            m.occlusion,
            m.sparse_depth,
            m.mono_depth.map(|v| v.to_string()).unwrap_or_default(),
            r.lr
        );
        csv.write_all(line.as_bytes()).map_err(|e| io_err(&csv_path, e))?;
        let done = trainer.iteration;
        if t.log_every > 0 && (done % t.log_every == 0 || done == t.iterations) {
            eprintln!("iter {done:>6}  loss {:.5}  color {:.5}  lr {:.5}", r.total, m.ms_color, r.lr);
        }
        if t.checkpoint_every > 0 && done % t.checkpoint_every == 0 && done < t.iterations {
            let p = out.join(format!("checkpoint_{done:06}.bin"));
            save_checkpoint(&p, &cfg, done, &trainer.field, &trainer.adam)?;
        }
        if t.render_every > 0 && done % t.render_every == 0 {
            render_tests(&trainer, &ds, &out.join("renders"), done)?;
        }
    }
    save_checkpoint(&out.join("checkpoint.bin"), &cfg, trainer.iteration, &trainer.field, &trainer.adam)?;
    Ok(())
}

fn render_tests(trainer: &Trainer, ds: &SceneDataset, dir: &Path, iteration: usize) -> Result<(), CliError> {
    mkdir(dir)?;
    for &v in &ds.test {
        let (img, _) = trainer.render(&ds.cameras[v], 0)?;
        img.save_png8(&dir.join(format!("test_{v:03}_{iteration:06}.png")))?;
    }
    Ok(())
}

fn cmd_render(checkpoint: &Path, scene: &Path, out: &Path, views: &str, scale: usize) -> Result<(), CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let ds = load_scene(scene)?;
    let cams: Vec<(String, Camera)> = match views {
        "train" => ds.train.iter().map(|&i| (format!("view_{i:03}"), ds.cameras[i].clone())).collect(),
        "test" => ds.test.iter().map(|&i| (format!("view_{i:03}"), ds.cameras[i].clone())).collect(),
        "all" => ds.cameras.iter().enumerate().map(|(i, c)| (format!("view_{i:03}"), c.clone())).collect(),
        "spiral" => spiral_poses(&ds.train_cameras(), &ck.config.novel_poses)?
            .into_iter()
            .enumerate()
            .map(|(i, c)| (format!("spiral_{i:03}"), c))
            .collect(),
        list => list
            .split(',')
            .map(|s| {
                let i: usize = s.trim().parse().map_err(|_| CliError::Usage(format!("bad view list `{list}`")))?;
                let c = ds.cameras.get(i).ok_or_else(|| CliError::Usage(format!("view {i} out of range")))?;
                Ok((format!("view_{i:03}"), c.clone()))
            })
            .collect::<Result<_, CliError>>()?,
    };
    if scale >= ck.field.config.num_scales() {
        return Err(CliError::Usage(format!(
            "--scale {scale} exceeds the coarsest scale {}",
            ck.field.config.num_scales() - 1
        )));
    }
    mkdir(out)?;
    let opts = RenderOptions {
        background: ck.config.render.background,
    };
    for (name, cam) in cams {
        let (img, depth) = render_view(&ck.field, &cam, scale, ck.config.n_samples(), &opts)?;
        img.save_png(&out.join(format!("{name}_s{scale}.png")))?;
        depth.save_pfm(&out.join(format!("{name}_s{scale}.pfm")))?;
    }
    Ok(())
}

fn load_gt_depth(scene: &Path, ds: &SceneDataset) -> Option<Vec<DepthMap>> {
    let dir = scene.join("gt_depth");
    if !dir.is_dir() {
        return None;
    }
    ds.files
        .iter()
        .map(|f| {
            let stem = Path::new(f).file_stem()?.to_string_lossy().into_owned();
            DepthMap::load_pfm(&dir.join(format!("{stem}.pfm"))).ok()
        })
        .collect()
}

fn cmd_eval(checkpoint: &Path, scene: &Path, out: &Path) -> Result<(), CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let ds = load_scene(scene)?;
    let gt = load_gt_depth(scene, &ds);
    let report = evaluate_views(&ck.field, &ds, &ds.test, gt.as_deref(), &ck.config)?;
    mkdir(out)?;
    report.write(out)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_synth(
    out: &Path,
    spec: Option<&Path>,
    width: usize,
    height: usize,
    sparse_per_view: usize,
    mono: bool,
    seed: u64,
) -> Result<(), CliError> {
    let (mut ds, gt) = match spec {
        None => generate_fixture(&FixtureOptions {
            width,
            height,
            sparse_per_view,
            mono_depth: mono,
            seed,
        })?,
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let spec: SyntheticSceneSpec =
                serde_json::from_str(&text).map_err(|e| FrugalError::json(p.display().to_string(), e))?;
            spec.validate()?;
            let cams = fixture_cameras(width, height)?;
            let (mut ds, gt) = generate_synthetic(&spec, &cams, &[0, 1], &[2])?;
            if sparse_per_view > 0 {
                ds.sparse_depth = Some(sparse_points_from_gt(&ds, &gt, sparse_per_view, seed));
            }
            if mono {
                ds.mono_depth = Some(
                    ds.train
                        .iter()
                        .map(|&i| affine_mono_depth(&gt[i], ds.cameras[i].far, 0.6, 0.4))
                        .collect(),
                );
            }
            (ds, gt)
        }
    };
    if sparse_per_view == 0 {
        ds.sparse_depth = None;
    }
    save_scene(&ds, out)?;
    let gdir = out.join("gt_depth");
    mkdir(&gdir)?;
    for (d, f) in gt.iter().zip(&ds.files) {
        let stem = Path::new(f).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        d.save_pfm(&gdir.join(format!("{stem}.pfm")))?;
    }
    Ok(())
}

fn cmd_check_grads(args: &ConfigArgs, tol: f64, params: usize, step: f64) -> Result<(), CliError> {
    let mut overrides: Vec<String> = GRAD_CHECK_OVERRIDES.iter().map(|s| s.to_string()).collect();
    overrides.extend(args.all_overrides());
    let cfg = Config::load(args.config.as_deref(), &overrides)?;
    let (field, ctx) = grad_check_problem(&cfg)?;
    let opts = GradCheckOptions {
        n_params: params,
        h: step,
        seed: cfg.train.seed,
        ..Default::default()
    };
    let mut failures = Vec::new();
    println!("{:<18} {:>14} {:>9}", "term", "max_rel_err", "compared");
    for sel in LossSelector::ALL {
        let r = grad_check(&field, &ctx, &cfg, sel, &opts)?;
        let ok = r.max_rel_error < tol && r.compared > 0;
        println!(
            "{:<18} {:>14.3e} {:>9} {}",
            sel.name(),
            r.max_rel_error,
            r.compared,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failures.push(sel.name());
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(format!("gradient check failed for {}", failures.join(", "))))
    }
}

fn cmd_warp_debug(checkpoint: &Path, scene: &Path, view: usize, rays: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let ds = load_scene(scene)?;
    let images = ds.train_images();
    let cameras = ds.train_cameras();
    if view >= cameras.len() {
        return Err(CliError::Usage(format!("--view {view} exceeds the {} training views", cameras.len())));
    }
    let views = TrainViews {
        images: &images,
        cameras: &cameras,
    };
    let cfg = &ck.config;
    let n = cfg.n_samples();
    let opts = RenderOptions {
        background: cfg.render.background,
    };
    let scales = ck.field.config.num_scales();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = &cameras[view];
    let mut csv = String::from("x,y");
    for l in 0..scales {
        let _ = write!(csv, ",depth_{l}");
    }
    for l in 0..scales {
        let _ = write!(csv, ",error_{l}");
    }
    csv.push_str(",selected,pseudo_depth,valid\n");
    for _ in 0..rays {
        let x = rng.gen_range(0..cam.width);
        let y = rng.gen_range(0..cam.height);
        let rec = adapt_train_ray(&ck.field, &views, view, (x, y), n, &cfg.adapt, &opts)?;
        let ray = ray_for_pixel(cam, PixelCoord::new(x as f64, y as f64))?;
        let s = sample_points(&ray, n, None)?;
        let _ = write!(csv, "{x},{y}");
        for l in 0..scales {
            let d = render_ray(&ck.field, &ray, l, &s, &opts)?.0.depth;
            let _ = write!(csv, ",{d}");
        }
        for e in &rec.errors {
            let _ = write!(csv, ",{e}");
        }
        let _ = writeln!(csv, ",{},{},{}", rec.selected, rec.pseudo_depth, rec.valid as u8);
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    fs::write(out, csv).map_err(|e| io_err(out, e))?;
    Ok(())
}
