//! `splatseg` command-line tool.
//!
//! Settings merge in the order defaults, `--config` file, `--set KEY=VALUE`,
//! then the named flags. The effective configuration is echoed to stderr
//! before any work starts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use splatseg::autodiff::{Checkpoint, GradCheckOptions};
use splatseg::config::{ConfigError, Settings};
use splatseg::data::{write_synthetic_dataset, DataError, Dataset, SyntheticDataset};
use splatseg::eval::{evaluate, EvalError, Protocol};
use splatseg::gsr::{predict_semantics, GsrError, GsrParams};
use splatseg::raster::{encode_ppm, render, save_label_image, Channels, ImageError, LabelImage, RasterError};
use splatseg::scene::io::{load_camera, load_point_cloud, load_scene, save_dense_map, save_scene};
use splatseg::scene::{transfer_labels, CameraRig, DenseTargetMap, SceneError, IGNORE_LABEL};
use splatseg::train::{gradient_suite, train, GradientSuite, Model, TrainError};

#[derive(Parser, Debug)]
#[command(name = "splatseg", version, about = "Open-vocabulary segmentation of 3D Gaussian scenes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON file of dotted keys, e.g. {"gsr.voxel_size": 0.05}.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    voxel_size: Option<f64>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Comma-separated class names withheld from training.
    #[arg(long, global = true)]
    unseen: Option<String>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    vocabulary: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset: scenes, point clouds, cameras and a manifest.
    Synth(SynthArgs),
    /// Copy labels from a point cloud onto the nearest Gaussians.
    LabelTransfer(TransferArgs),
    /// Render one view to PPM / PGM / SDM1 files.
    Render(RenderArgs),
    /// Train the semantic network on a manifest.
    Train(TrainArgs),
    /// Score a checkpoint under one or more protocols.
    Eval(EvalArgs),
    /// Run the end-to-end gradient check.
    Gradcheck(GradArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Comma-separated class names.
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    gaussians_per_class: Option<usize>,
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    val_scenes: Option<usize>,
    #[arg(long)]
    cross_domain_scenes: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    held_out_views: Option<usize>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    /// Also write dense label-embedding targets.
    #[arg(long)]
    targets: bool,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    cloud: PathBuf,
    /// Rewrite the scene file itself.
    #[arg(long, conflicts_with = "output")]
    in_place: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    camera: PathBuf,
    /// Any of color, semantic, depth, label.
    #[arg(long, value_delimiter = ',', default_value = "color")]
    channels: Vec<String>,
    /// Predict semantics with this checkpoint before rendering.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Protocol tag, comma-separated list, or "all".
    #[arg(long, default_value = "CSA3D")]
    protocol: String,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Number of consecutive seeds, starting at --seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Coordinates sampled per tensor; 0 checks every coordinate.
    #[arg(long, default_value_t = 24)]
    max_coords: usize,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

fn data<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Data(e.to_string())
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::File { .. } => Failure::Data(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Failure::Numeric(e.to_string()),
            TrainError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            TrainError::Gsr(GsrError::InvalidConfig(_)) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::UnknownProtocol(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                data(e)
            }
        }
    )*};
}
data_errors!(DataError, SceneError, RasterError, ImageError, GsrError, std::io::Error);

fn settings(c: &Common) -> Result<Settings, Failure> {
    let mut s = Settings::default();
    if let Some(p) = &c.config {
        s.merge_file(p)?;
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        s.set(k.trim(), &Value::String(v.trim().to_string()))?;
    }
    let mut flag = |key: &str, v: Option<Value>| -> Result<(), Failure> {
        if let Some(v) = v {
            s.set(key, &v)?;
        }
        Ok(())
    };
    flag("seed", c.seed.map(Value::from))?;
    flag("gsr.voxel_size", c.voxel_size.map(Value::from))?;
    flag("train.lr", c.lr.map(Value::from))?;
    flag("train.batch", c.batch.map(Value::from))?;
    flag("train.epochs", c.epochs.map(Value::from))?;
    flag("loss.temperature", c.temperature.map(Value::from))?;
    flag("train.unseen", c.unseen.clone().map(Value::from))?;
    flag("data.manifest", c.manifest.as_ref().map(|p| Value::from(p.display().to_string())))?;
    flag("data.vocabulary", c.vocabulary.as_ref().map(|p| Value::from(p.display().to_string())))?;
    Ok(s)
}

fn echo(s: &Settings) {
    let line = serde_json::to_string(&s.effective()).expect("settings serialize");
    eprintln!("effective config: {line}");
}

fn out_dir(c: &Common) -> Result<&Path, Failure> {
    c.out_dir
        .as_deref()
        .ok_or_else(|| Failure::Usage("--out-dir is required for this command".into()))
}

fn manifest(s: &Settings) -> Result<PathBuf, Failure> {
    s.manifest
        .clone()
        .ok_or_else(|| Failure::Usage("--manifest (or data.manifest) is required".into()))
}

fn synth(c: &Common, a: &SynthArgs) -> Result<(), Failure> {
    let dir = out_dir(c)?;
    let mut spec = SyntheticDataset {
        seed: c.seed.unwrap_or(0),
        targets: a.targets,
        ..SyntheticDataset::default()
    };
    if let Some(names) = &a.classes {
        spec.classes = names.split(',').map(str::trim).filter(|n| !n.is_empty()).map(String::from).collect();
    }
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut spec.gaussians_per_class, a.gaussians_per_class);
    set(&mut spec.train_scenes, a.train_scenes);
    set(&mut spec.val_scenes, a.val_scenes);
    set(&mut spec.cross_domain_scenes, a.cross_domain_scenes);
    set(&mut spec.views_per_scene, a.views);
    set(&mut spec.held_out_views, a.held_out_views);
    set(&mut spec.embedding_dim, a.embedding_dim);
    spec.rig = CameraRig {
        width: a.width.unwrap_or(spec.rig.width),
        height: a.height.unwrap_or(spec.rig.height),
        ..spec.rig
    };
    if spec.rig.width == 0 || spec.rig.height == 0 {
        return Err(Failure::Usage("image size must be positive".into()));
    }
    let path = write_synthetic_dataset(dir, &spec)?;
    println!("{}", path.display());
    Ok(())
}

fn label_transfer(c: &Common, a: &TransferArgs) -> Result<(), Failure> {
    let target = match (&a.output, a.in_place) {
        (_, true) => a.scene.clone(),
        (Some(p), false) => p.clone(),
        (None, false) => {
            let name = a.scene.file_name().ok_or_else(|| Failure::Usage("scene path has no file name".into()))?;
            out_dir(c)?.join(name)
        }
    };
    if !a.in_place && same_file(&target, &a.scene) {
        return Err(Failure::Usage("refusing to overwrite the input scene without --in-place".into()));
    }
    let scene = load_scene(&a.scene)?;
    let cloud = load_point_cloud(&a.cloud)?;
    let labeled = transfer_labels(&scene, &cloud)?;
    if let Some(dir) = target.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_scene(&labeled, &target)?;
    println!("{}", target.display());
    Ok(())
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn render_cmd(c: &Common, s: &Settings, a: &RenderArgs) -> Result<(), Failure> {
    let mut channels = Channels::default();
    for ch in &a.channels {
        match ch.trim() {
            "color" => channels.color = true,
            "semantic" => channels.semantic = true,
            "depth" => channels.depth = true,
            "label" => channels.label = true,
            other => return Err(Failure::Usage(format!("unknown channel {other:?}"))),
        }
    }
    let dir = c.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    let mut scene = load_scene(&a.scene)?;
    let cam = load_camera(&a.camera)?;
    if let Some(ck) = &a.checkpoint {
        let ck = Checkpoint::load(ck).map_err(data)?;
        let params = GsrParams::from_checkpoint(&ck, &s.train.gsr)?;
        scene = predict_semantics(&scene, &params, &s.train.gsr)?;
    }
    let out = render(&scene, &cam, channels, &s.train.raster)?;
    let stem = a.scene.file_stem().map_or("render".into(), |s| s.to_string_lossy().into_owned());
    let mut written = Vec::new();
    if let Some(img) = out.color_image() {
        let p = dir.join(format!("{stem}-color.ppm"));
        std::fs::write(&p, encode_ppm(&img))?;
        written.push(p);
    }
    if let Some(map) = out.semantic_dense_map() {
        let p = dir.join(format!("{stem}-semantic.sdm"));
        save_dense_map(&map, &p)?;
        written.push(p);
    }
    if let Some(depth) = &out.depth {
        let p = dir.join(format!("{stem}-depth.sdm"));
        let map = DenseTargetMap::new(out.height, out.width, 1, depth.iter().map(|&v| v as f32).collect())?;
        save_dense_map(&map, &p)?;
        written.push(p);
    }
    if let Some(labels) = out.label_map {
        let classes = labels.iter().filter(|&&l| l != IGNORE_LABEL).map(|&l| l as usize + 1).max().unwrap_or(0);
        let ext = if classes < 256 { "pgm" } else { "slm" };
        let p = dir.join(format!("{stem}-label.{ext}"));
        let img = LabelImage {
            width: out.width,
            height: out.height,
            labels,
        };
        save_label_image(&img, classes, &p)?;
        written.push(p);
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn train_cmd(c: &Common, s: &mut Settings, a: &TrainArgs) -> Result<(), Failure> {
    if let Some(m) = a.max_steps {
        s.set("train.max_steps", &Value::from(m))?;
    }
    let dir = out_dir(c)?;
    let dataset = Dataset::load(&manifest(s)?, s.vocabulary.as_deref())?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), s.to_json())?;
    let outcome = train(&dataset, &s.train, dir, a.resume.as_deref())?;
    if let Some(last) = outcome.losses.last() {
        println!("step {} loss {}", outcome.steps, last.total);
    }
    println!("{}", outcome.final_checkpoint.display());
    Ok(())
}

fn eval_cmd(c: &Common, s: &Settings, a: &EvalArgs) -> Result<(), Failure> {
    let all = a.protocol.eq_ignore_ascii_case("all");
    let protocols: Vec<Protocol> = if all {
        Protocol::ALL.to_vec()
    } else {
        a.protocol.split(',').map(|p| p.trim().parse()).collect::<Result<_, EvalError>>()?
    };
    let dataset = Dataset::load(&manifest(s)?, s.vocabulary.as_deref())?;
    let model = Model::load(&a.checkpoint, &s.train.gsr, dataset.vocabulary.dim())?;
    let mut scored = 0;
    for p in protocols {
        let report = match evaluate(&model, &dataset, p, &s.train) {
            Ok(r) => r,
            Err(EvalError::EmptySplit(why)) if all => {
                eprintln!("skipping {}: {why}", p.tag());
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        scored += 1;
        match &c.out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("report-{}.json", p.tag()));
                std::fs::write(&path, report.to_json())?;
                print!("{}", report.to_table());
                println!("{}", path.display());
            }
            None => println!("{}", report.to_json()),
        }
    }
    if scored == 0 {
        return Err(Failure::Data("no protocol has anything to evaluate".into()));
    }
    Ok(())
}

fn gradcheck_cmd(s: &Settings, a: &GradArgs) -> Result<(), Failure> {
    if !(a.tol > 0.0) {
        return Err(Failure::Usage("--tol must be positive".into()));
    }
    let suite = GradientSuite {
        check: GradCheckOptions {
            tol: a.tol,
            max_coords: (a.max_coords > 0).then_some(a.max_coords),
            ..GradientSuite::default().check
        },
        ..GradientSuite::default()
    };
    let mut worst: f64 = 0.0;
    for seed in s.train.seed..s.train.seed + a.seeds {
        let r = gradient_suite(&suite, seed)?;
        println!(
            "seed {seed} max_rel_err {:e} checked {} skipped_kinks {}",
            r.max_rel_err, r.checked, r.skipped_kinks
        );
        worst = worst.max(r.max_rel_err);
    }
    println!("max_rel_err {worst:e}");
    if worst < a.tol {
        Ok(())
    } else {
        Err(Failure::Numeric(format!("max_rel_err {worst:e} exceeds tolerance {:e}", a.tol)))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut s = settings(&cli.common)?;
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if !matches!(cli.command, Command::Synth(_) | Command::LabelTransfer(_)) {
        echo(&s);
    }
    match &cli.command {
        Command::Synth(a) => synth(&cli.common, a),
        Command::LabelTransfer(a) => label_transfer(&cli.common, a),
        Command::Render(a) => render_cmd(&cli.common, &s, a),
        Command::Train(a) => train_cmd(&cli.common, &mut s, a),
        Command::Eval(a) => eval_cmd(&cli.common, &s, a),
        Command::Gradcheck(a) => gradcheck_cmd(&s, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
