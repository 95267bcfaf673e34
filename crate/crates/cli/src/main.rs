//! `nelf`: generate synthetic light field datasets, train models, render,
//! evaluate, and inspect them.

mod config;
mod error;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nelf::checkpoint::{load_checkpoint, load_model, save_checkpoint};
use nelf::geometry::{Camera, Vec3};
use nelf::metrics::{embedding_pca_image, epi_from_dataset, epi_from_model, EpiAxis, EpiSpec, PcaWarning};
use nelf::scenes::{read_dataset, recipe, write_dataset, GridSpec, ImageFormat, LightFieldDataset, Split, WindowSpec, RECIPES};
use nelf::train::{evaluate, TrainData, TrainState};

use crate::config::TrainKnobs;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "nelf", version, about = "Neural light fields with ray-space embedding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a built-in analytic scene into a camera-grid dataset.
    Generate(GenerateArgs),
    /// Train a model on a dataset's training views.
    Train(TrainArgs),
    /// Render views or a camera path from a checkpoint.
    Render(RenderArgs),
    /// Compute PSNR/SSIM of a checkpoint against a dataset split.
    Eval(EvalArgs),
    /// Extract an epipolar-plane image from a dataset or a model.
    Epi(EpiArgs),
    /// Visualize the first three principal components of ray embeddings.
    Embedviz(EmbedvizArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Png,
    Ppm,
}

impl From<Format> for ImageFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Png => ImageFormat::Png,
            Format::Ppm => ImageFormat::Ppm,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Holdout,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Holdout => Split::Holdout,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AxisArg {
    Horizontal,
    Vertical,
}

#[derive(Args, Debug)]
struct Common {
    /// Root seed; every random stream is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Threads used for rendering and evaluation.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Force single-worker execution for bitwise-reproducible output.
    #[arg(long)]
    deterministic: bool,
}

impl Common {
    fn workers(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.workers.max(1)
        }
    }
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Scene recipe: plane0, plane1, plane3, two-plane-occluder, constant.
    #[arg(long)]
    recipe: String,
    /// Camera grid rows and columns (defaults to the recipe's grid).
    #[arg(long)]
    grid: Option<usize>,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, value_enum, default_value_t = Format::Png)]
    format: Format,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory containing manifest.toml.
    #[arg(long)]
    dataset: PathBuf,
    /// Run directory for the checkpoint, log and report.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write a metrics log line every this many iterations.
    #[arg(long, default_value_t = 100)]
    log_every: u64,
    #[command(flatten)]
    knobs: TrainKnobs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Render the cameras of this dataset.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Which dataset views: all, train, holdout, or a comma-separated list.
    #[arg(long, default_value = "all")]
    views: String,
    /// Camera path on the camera plane, `x0,y0:x1,y1` (used without --dataset).
    #[arg(long)]
    path: Option<String>,
    /// Number of frames along --path.
    #[arg(long, default_value_t = 5)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Print color-network evaluation counts.
    #[arg(long)]
    count_evals: bool,
    #[arg(long, value_enum, default_value_t = Format::Png)]
    format: Format,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Holdout)]
    split: SplitArg,
    /// Directory for report.json and report.txt.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EpiArgs {
    /// Dataset providing the camera grid (and the pixels, without --checkpoint).
    #[arg(long)]
    dataset: PathBuf,
    /// Render the EPI from this model instead of resampling the dataset.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = AxisArg::Horizontal)]
    axis: AxisArg,
    /// Camera grid row (horizontal) or column (vertical).
    #[arg(long, default_value_t = 0)]
    camera_line: usize,
    /// Image row (horizontal) or column (vertical).
    #[arg(long, default_value_t = 0)]
    pixel_line: usize,
    /// Virtual cameras along the slice when rendering from a model.
    #[arg(long)]
    cameras: Option<usize>,
    /// Output image path (.png or .ppm).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EmbedvizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Camera position on the camera plane, `x,y`.
    #[arg(long, default_value = "0,0")]
    camera: String,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Output image path (.png or .ppm).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Epi(a) => cmd_epi(a),
        Command::Embedviz(a) => cmd_embedviz(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Records the files a command produced in `<dir>/outputs.toml`.
fn write_outputs(dir: &Path, command: &str, seed: Option<u64>, files: &[PathBuf]) -> Result<(), CliError> {
    let mut text = format!("command = \"{command}\"\n");
    if let Some(s) = seed {
        text.push_str(&format!("seed = {s}\n"));
    }
    text.push_str("files = [\n");
    for f in files {
        let name = f.strip_prefix(dir).unwrap_or(f);
        text.push_str(&format!("    {:?},\n", name.display().to_string()));
    }
    text.push_str("]\n");
    write_text(&dir.join("outputs.toml"), &text)
}

fn cmd_generate(a: GenerateArgs) -> Result<(), CliError> {
    let mut r = recipe(&a.recipe)
        .ok_or_else(|| CliError::Usage(format!("unknown recipe {:?}; known: {}", a.recipe, RECIPES.join(", "))))?;
    if let Some(n) = a.grid {
        if n == 0 {
            return Err(CliError::Usage("--grid must be >= 1".into()));
        }
        r.grid = GridSpec { rows: n, cols: n, ..r.grid };
    }
    let ds = r.generate(a.size, a.size)?;
    let files = write_dataset(&a.out, &ds, a.format.into())?;
    write_outputs(&a.out, "generate", a.common.seed, &files)?;
    let train = ds.view_indices(Split::Train).len();
    println!(
        "recipe {} views {} (train {train}, holdout {}) size {}x{} z_xy {} z_uv {} -> {}",
        a.recipe,
        ds.num_views(),
        ds.num_views() - train,
        ds.width,
        ds.height,
        ds.param.z_xy,
        ds.param.z_uv,
        a.out.display()
    );
    Ok(())
}

pub const CHECKPOINT_FILE: &str = "checkpoint.nelf";

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let ds = read_dataset(&a.dataset)?;
    create_dir(&a.out)?;
    let mut state = match &a.resume {
        Some(p) => {
            let mut st = load_checkpoint(p)?;
            if let Some(n) = a.knobs.iters {
                st.config.total_iters = n;
            }
            st
        }
        None => {
            let file = match &a.config {
                Some(p) => TrainKnobs::from_file(p)?,
                None => TrainKnobs::default(),
            };
            let mut knobs = a.knobs.clone().over(file);
            if a.common.seed.is_some() {
                knobs.seed = a.common.seed;
            }
            TrainState::new(knobs.build(ds.param)?)?
        }
    };
    let data = TrainData::new(&state.model, &ds, Split::Train)?;
    let holdout = ds.view_indices(Split::Holdout);
    let ckpt = a.out.join(CHECKPOINT_FILE);
    let log_path = a.out.join("metrics.log");
    let mut log = String::new();
    let workers = a.common.workers();
    let (eval_every, ckpt_every) = (state.config.eval_every, state.config.checkpoint_every);
    state.run(&data, |st, stats| {
        if a.log_every > 0 && (stats.iteration % a.log_every == 0 || st.iteration == st.config.total_iters) {
            let line = stats.log_line();
            println!("{line}");
            log.push_str(&line);
            log.push('\n');
        }
        if eval_every > 0 && st.iteration % eval_every == 0 && !holdout.is_empty() {
            let r = evaluate(&st.model, &ds, Split::Holdout, workers)?;
            let line = format!("eval iter {} holdout_psnr {:.3} holdout_ssim {:.4}", st.iteration, r.mean_psnr, r.mean_ssim);
            println!("{line}");
            log.push_str(&line);
            log.push('\n');
        }
        if ckpt_every > 0 && st.iteration % ckpt_every == 0 {
            save_checkpoint(&ckpt, st)?;
        }
        Ok(())
    })?;
    save_checkpoint(&ckpt, &state)?;
    // append so a resumed run extends the original log
    let mut full = fs::read_to_string(&log_path).unwrap_or_default();
    full.push_str(&log);
    write_text(&log_path, &full)?;
    let mut files = vec![ckpt, log_path];
    if !holdout.is_empty() {
        let report = evaluate(&state.model, &ds, Split::Holdout, workers)?;
        print!("{}", report.to_text());
        files.extend(write_report(&a.out, &report)?);
    }
    write_outputs(&a.out, "train", Some(state.config.seed), &files)?;
    Ok(())
}

fn write_report(dir: &Path, report: &nelf::metrics::MetricsReport) -> Result<Vec<PathBuf>, CliError> {
    let json = dir.join("report.json");
    let txt = dir.join("report.txt");
    write_text(&json, &report.to_json())?;
    write_text(&txt, &report.to_text())?;
    Ok(vec![json, txt])
}

fn parse_pair(s: &str) -> Result<[f64; 2], CliError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("bad coordinate pair {s:?}: {e}")))?;
    match v.as_slice() {
        [x, y] => Ok([*x, *y]),
        _ => Err(CliError::Usage(format!("expected `x,y`, got {s:?}"))),
    }
}

fn select_views(ds: &LightFieldDataset, spec: &str) -> Result<Vec<usize>, CliError> {
    match spec {
        "all" => Ok((0..ds.num_views()).collect()),
        "train" => Ok(ds.view_indices(Split::Train)),
        "holdout" => Ok(ds.view_indices(Split::Holdout)),
        list => list
            .split(',')
            .map(|p| {
                let i: usize = p.trim().parse().map_err(|e| CliError::Usage(format!("bad view index {p:?}: {e}")))?;
                if i >= ds.num_views() {
                    return Err(CliError::Usage(format!("view {i} out of range (dataset has {})", ds.num_views())));
                }
                Ok(i)
            })
            .collect(),
    }
}

fn window_camera(origin: Vec3, window: WindowSpec) -> Camera {
    let h = window.half_extent;
    Camera { origin, window_z: window.z, window_min: [-h, -h], window_max: [h, h] }
}

fn cmd_render(a: RenderArgs) -> Result<(), CliError> {
    let model = load_model(&a.checkpoint)?;
    create_dir(&a.out)?;
    let workers = a.common.workers();
    let ext = ImageFormat::from(a.format).extension();
    let mut jobs: Vec<(String, Camera, usize, usize)> = Vec::new();
    match (&a.dataset, &a.path) {
        (Some(dir), None) => {
            let ds = read_dataset(dir)?;
            for v in select_views(&ds, &a.views)? {
                jobs.push((format!("view_{v:03}.{ext}"), ds.views[v].camera, ds.width, ds.height));
            }
        }
        (None, Some(path)) => {
            let (p0, p1) = path
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("--path must look like x0,y0:x1,y1, got {path:?}")))?;
            let (p0, p1) = (parse_pair(p0)?, parse_pair(p1)?);
            if a.frames == 0 {
                return Err(CliError::Usage("--frames must be >= 1".into()));
            }
            for f in 0..a.frames {
                let t = if a.frames == 1 { 0.0 } else { f as f64 / (a.frames - 1) as f64 };
                let origin = Vec3::new(p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1]), model.config.param.z_xy);
                jobs.push((format!("frame_{f:03}.{ext}"), window_camera(origin, WindowSpec::default()), a.width, a.height));
            }
        }
        _ => return Err(CliError::Usage("give exactly one of --dataset or --path".into())),
    }
    let mut files = Vec::new();
    let mut report = String::from("image,width,height,color_evals,embed_evals,evals_per_ray,seconds\n");
    let (mut total, mut rays) = (0usize, 0usize);
    for (name, cam, w, h) in jobs {
        let (img, stats) = model.render_image(&cam, w, h, workers)?;
        let p = a.out.join(&name);
        img.write(&p)?;
        files.push(p);
        total += stats.color_evals;
        rays += stats.rays;
        report.push_str(&format!(
            "{name},{w},{h},{},{},{:.4},{:.4}\n",
            stats.color_evals,
            stats.embed_evals,
            stats.evals_per_ray(),
            stats.seconds
        ));
        if a.count_evals {
            println!("{name} color_evals {} rays {} evals_per_ray {:.4}", stats.color_evals, stats.rays, stats.evals_per_ray());
        }
    }
    let rp = a.out.join("render_report.csv");
    write_text(&rp, &report)?;
    files.push(rp);
    if a.count_evals {
        println!("total color_evals {total} rays {rays}");
    }
    write_outputs(&a.out, "render", a.common.seed, &files)
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let model = load_model(&a.checkpoint)?;
    let ds = read_dataset(&a.dataset)?;
    create_dir(&a.out)?;
    let report = evaluate(&model, &ds, a.split.into(), a.common.workers())?;
    print!("{}", report.to_text());
    let files = write_report(&a.out, &report)?;
    write_outputs(&a.out, "eval", a.common.seed, &files)
}

fn cmd_epi(a: EpiArgs) -> Result<(), CliError> {
    let ds = read_dataset(&a.dataset)?;
    let spec = EpiSpec {
        axis: match a.axis {
            AxisArg::Horizontal => EpiAxis::Horizontal,
            AxisArg::Vertical => EpiAxis::Vertical,
        },
        camera_line: a.camera_line,
        pixel_line: a.pixel_line,
    };
    let img = match &a.checkpoint {
        None => epi_from_dataset(&ds, spec)?,
        Some(ckpt) => {
            let model = load_model(ckpt)?;
            let grid = ds.grid.ok_or_else(|| CliError::Usage("dataset has no camera grid".into()))?;
            let cam = ds.views[0].camera;
            let window = WindowSpec { z: cam.window_z, half_extent: cam.window_max[0] };
            let n = a.cameras.unwrap_or(match spec.axis {
                EpiAxis::Horizontal => grid.cols,
                EpiAxis::Vertical => grid.rows,
            });
            epi_from_model(&model, grid, window, ds.width, ds.height, spec, n)?
        }
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    img.write(&a.out)?;
    println!("epi {}x{} -> {}", img.width, img.height, a.out.display());
    Ok(())
}

fn cmd_embedviz(a: EmbedvizArgs) -> Result<(), CliError> {
    let model = load_model(&a.checkpoint)?;
    let [x, y] = parse_pair(&a.camera)?;
    let cam = window_camera(Vec3::new(x, y, model.config.param.z_xy), WindowSpec::default());
    let (img, warning) = embedding_pca_image(&model, &cam, a.width, a.height)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    img.write(&a.out)?;
    if warning == Some(PcaWarning::ConstantEmbedding) {
        eprintln!("warning: embedding is constant over all rays; wrote a mid-gray image");
    }
    println!("embedding pca {}x{} -> {}", img.width, img.height, a.out.display());
    Ok(())
}
