//! `xview` command-line front end.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use xview::dataman::{load_dataset, synth_dataset, synth_homography, write_dataset, LoadedDataset, PairedSample, Split};
use xview::geometry::{
    composite_regions, estimate_homography, make_region_masks, warp_image, Correspondences, Homography, RegionLayout,
};
use xview::metrics::{evaluate, train_classifier, ClassifierTrainConfig, EvalOptions, MetricReport, SceneClassifier};
use xview::trainer::{
    load_checkpoint, load_regions, prepare_samples, synthesize_regions, train, train_h_regions, views, Method, Preset,
    TrainConfig, SUBTASK_FILES,
};
use xview::{Device, Image};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] xview::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Usage(_) => "usage",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "xview", version, about = "Cross-view image synthesis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a manifest, apply its preprocessing and write a normalized dataset.
    PrepareData(PrepareArgs),
    /// Render a synthetic paired dataset.
    SynthData(SynthArgs),
    /// Train one method.
    Train(TrainArgs),
    /// Run a trained checkpoint over a dataset split.
    Synthesize(SynthesizeArgs),
    /// Warp an image with a homography.
    Warp(WarpArgs),
    /// Composite inpainted and car regions into a warped image.
    Composite(CompositeArgs),
    /// Compute the metric battery for a set of generated images.
    Evaluate(EvaluateArgs),
    /// Comparison table and image grid over evaluated runs.
    Report(ReportArgs),
    /// Train the scene classifier used by `evaluate`.
    TrainClassifier(ClassifierArgs),
}

#[derive(Args, Serialize)]
struct PrepareArgs {
    /// Manifest file, or a directory holding `manifest.toml`.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Edge length, 64 or 256.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Fraction of samples placed in the test split.
    #[arg(long, default_value_t = 0.0)]
    test_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    method: String,
    /// overfit8, desk64 or desk256.
    #[arg(long)]
    preset: Option<String>,
    /// TOML training configuration; applied after the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SynthesizeArgs {
    /// Run directory or checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct WarpArgs {
    #[arg(long)]
    image: PathBuf,
    /// 3x3 matrix file.
    #[arg(long, conflicts_with = "correspondences", required_unless_present = "correspondences")]
    homography: Option<PathBuf>,
    /// Four point pairs to estimate the homography from.
    #[arg(long)]
    correspondences: Option<PathBuf>,
    /// Output edge length; defaults to the input size.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct CompositeArgs {
    #[arg(long)]
    inpaint: PathBuf,
    #[arg(long)]
    car: PathBuf,
    #[arg(long)]
    warped: PathBuf,
    #[arg(long)]
    band_width: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    /// Directory of generated PNGs.
    #[arg(long)]
    fake: PathBuf,
    /// Directory of ground-truth PNGs with matching file names.
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    /// Row label in the report; defaults to the method of the run.
    #[arg(long)]
    method: Option<String>,
    #[arg(long, default_value_t = 10)]
    kl_batches: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    /// Run directory from `synthesize` (and `evaluate`), repeatable.
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    /// Sample rows in the image grid.
    #[arg(long, default_value_t = 4)]
    rows: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ClassifierArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint file.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::PrepareData(a) => prepare_data(&a),
        Command::SynthData(a) => synth_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Synthesize(a) => synthesize_cmd(&a),
        Command::Warp(a) => warp_cmd(&a),
        Command::Composite(a) => composite_cmd(&a),
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::Report(a) => report::report_cmd(&a),
        Command::TrainClassifier(a) => classifier_cmd(&a),
    }
}

/// Writes `<command>.resolved.toml` into `dir`.
fn snapshot<T: Serialize>(dir: &Path, command: &str, args: &T) -> Result<()> {
    let mut table = toml::Table::try_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    table.insert("command".into(), command.into());
    std::fs::create_dir_all(dir).map_err(xview::Error::from)?;
    std::fs::write(
        dir.join(format!("{command}.resolved.toml")),
        toml::to_string(&table).expect("table serializes"),
    )
    .map_err(xview::Error::from)?;
    Ok(())
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("manifest.toml")
    } else {
        p.to_path_buf()
    }
}

fn load(data: &Path) -> Result<LoadedDataset> {
    Ok(load_dataset(&manifest_path(data))?)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(CliError::Usage(format!("split must be train or test, got {s:?}"))),
    }
}

fn prepare_data(a: &PrepareArgs) -> Result<()> {
    let ds = load(&a.manifest)?;
    let mut samples: Vec<(PairedSample, Split)> = Vec::new();
    for split in [Split::Train, Split::Test] {
        for s in ds.split(split) {
            let mut s = s.clone();
            if s.warped_aerial.is_none() {
                if let Some(h) = ds.homography_for(&s.id) {
                    s.warped_aerial = Some(warp_image(&s.aerial, h, s.ground.height(), s.ground.width())?.0);
                }
            }
            samples.push((s, split));
        }
    }
    let path = write_dataset(&a.out, &samples, &ds.palette, ds.homography.as_ref())?;
    snapshot(&a.out, "prepare-data", a)?;
    println!(
        "wrote {} pairs ({} skipped) to {}",
        samples.len(),
        ds.skipped.len(),
        path.display()
    );
    Ok(())
}

fn synth_data(a: &SynthArgs) -> Result<()> {
    let samples = synth_dataset(a.n, a.seed, a.size, a.test_fraction)?;
    let palette = xview::dataman::PaletteSpec::default();
    let path = write_dataset(&a.out, &samples, &palette, Some(&synth_homography(a.size)))?;
    snapshot(&a.out, "synth-data", a)?;
    println!("wrote {} pairs to {}", samples.len(), path.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let method = Method::parse(&a.method)?;
    let mut cfg = match &a.preset {
        Some(p) => Preset::parse(p)?.config(method),
        None => TrainConfig {
            method,
            ..Default::default()
        },
    };
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|_| xview::Error::MissingFile(path.clone()))?;
        cfg = TrainConfig::parse_toml(&text)?;
        if cfg.method != method {
            return Err(CliError::Usage(format!(
                "--method {method} but the config file trains {}",
                cfg.method
            )));
        }
    }
    for o in &a.overrides {
        cfg = cfg.apply_override(o)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a)?;
    let ds = load(&a.data)?;
    let samples = prepare_samples(&ds.train, cfg.method, &|id| ds.homography_for(id).cloned())?;
    if samples.is_empty() {
        return Err(xview::Error::Config("the training split is empty".into()).into());
    }
    let dev = Device::Cpu;
    if cfg.method == Method::HRegions {
        let out = train_h_regions(&cfg, samples, &a.out, &dev)?;
        println!(
            "trained h-regions subtasks for {:?} steps into {}",
            out.steps,
            a.out.display()
        );
    } else {
        let out = train(&cfg, samples, &a.out, &dev)?;
        let last = out.last.unwrap_or_default();
        println!(
            "trained {} for {} steps: l1_img {:.4} l1_seg {:.4}; checkpoint {}",
            cfg.method,
            out.steps,
            last.l1_img,
            last.l1_seg,
            out.checkpoint.display()
        );
    }
    Ok(())
}

fn save_all(dir: &Path, items: &[(&str, &Image)]) -> Result<()> {
    for (id, img) in items {
        img.save_png(&dir.join(format!("{id}.png")))?;
    }
    Ok(())
}

fn synthesize_cmd(a: &SynthesizeArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let ds = load(&a.data)?;
    let dev = Device::Cpu;
    let regions = a.checkpoint.is_dir() && a.checkpoint.join(SUBTASK_FILES[0]).exists();
    let (method, direction) = if regions {
        (Method::HRegions, xview::trainer::Direction::A2g)
    } else {
        let ck = load_checkpoint(&a.checkpoint, &dev)?;
        (ck.model.cfg.method, ck.model.cfg.direction)
    };
    let samples = prepare_samples(ds.split(split), method, &|id| ds.homography_for(id).cloned())?;
    if samples.is_empty() {
        return Err(xview::Error::Config(format!("the {} split is empty", a.split)).into());
    }
    let mut ids = Vec::new();
    let (mut conds, mut reals) = (Vec::new(), Vec::new());
    for s in &samples {
        let (c, t, _) = views(s, method, direction)?;
        ids.push(s.id.clone());
        conds.push(c);
        reals.push(t);
    }
    let mut fakes = Vec::new();
    let mut segs = Vec::new();
    let mut comps = Vec::new();
    if regions {
        let mut model = load_regions(&a.checkpoint, &dev)?;
        for (c, r) in synthesize_regions(&mut model, &conds)? {
            comps.push(c);
            fakes.push(r);
        }
    } else {
        let mut model = load_checkpoint(&a.checkpoint, &dev)?.model;
        for chunk in conds.chunks(8) {
            for s in model.infer(chunk)? {
                fakes.push(s.image);
                segs.extend(s.seg);
            }
        }
    }
    let dump = |sub: &str, imgs: &[Image]| -> Result<()> {
        if imgs.is_empty() {
            return Ok(());
        }
        let items: Vec<(&str, &Image)> = ids.iter().map(String::as_str).zip(imgs).collect();
        save_all(&a.out.join(sub), &items)
    };
    dump("input", &conds)?;
    dump("real", &reals)?;
    dump("fake", &fakes)?;
    dump("seg", &segs)?;
    dump("composite", &comps)?;
    #[derive(Serialize)]
    struct Snapshot<'a> {
        #[serde(flatten)]
        args: &'a SynthesizeArgs,
        method: String,
    }
    snapshot(
        &a.out,
        "synthesize",
        &Snapshot {
            args: a,
            method: method.to_string(),
        },
    )?;
    println!("synthesized {} images with {method} into {}", fakes.len(), a.out.display());
    Ok(())
}

fn warp_cmd(a: &WarpArgs) -> Result<()> {
    let img = Image::load_png(&a.image)?;
    let h = match (&a.homography, &a.correspondences) {
        (Some(p), _) => Homography::load(p)?,
        (None, Some(p)) => estimate_homography(&Correspondences::load(p)?)?,
        (None, None) => return Err(CliError::Usage("give --homography or --correspondences".into())),
    };
    let (hh, ww) = a.size.map_or((img.height(), img.width()), |s| (s, s));
    let (warped, valid) = warp_image(&img, &h, hh, ww)?;
    std::fs::create_dir_all(&a.out).map_err(xview::Error::from)?;
    warped.save_png(&a.out.join("warped.png"))?;
    valid.save_png(&a.out.join("valid.png"))?;
    h.save(&a.out.join("homography.txt"))?;
    snapshot(&a.out, "warp", a)?;
    println!("wrote {}", a.out.join("warped.png").display());
    Ok(())
}

fn composite_cmd(a: &CompositeArgs) -> Result<()> {
    let inpaint = Image::load_png(&a.inpaint)?;
    let car = Image::load_png(&a.car)?;
    let warped = Image::load_png(&a.warped)?;
    if inpaint.height() != inpaint.width() {
        return Err(xview::Error::Shape(format!("images must be square, got {:?}", inpaint.dims())).into());
    }
    let mut layout = RegionLayout::default_for(inpaint.height());
    if let Some(b) = a.band_width {
        layout.band_width = b;
    }
    let masks = make_region_masks(inpaint.height(), inpaint.width(), layout)?;
    let out = composite_regions(&inpaint, &car, &warped, &masks)?;
    std::fs::create_dir_all(&a.out).map_err(xview::Error::from)?;
    out.save_png(&a.out.join("composite.png"))?;
    masks.band.save_png(&a.out.join("band.png"))?;
    snapshot(&a.out, "composite", a)?;
    println!("wrote {}", a.out.join("composite.png").display());
    Ok(())
}

/// PNGs of a directory sorted by file name.
fn read_pngs(dir: &Path) -> Result<Vec<(String, Image)>> {
    let entries = std::fs::read_dir(dir).map_err(|_| xview::Error::MissingFile(dir.to_path_buf()))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| Ok((n.trim_end_matches(".png").to_string(), Image::load_png(&dir.join(&n))?)))
        .collect()
}

/// Method recorded by `synthesize` in a run directory.
fn run_method(dir: &Path) -> Option<String> {
    let text = std::fs::read_to_string(dir.join("synthesize.resolved.toml")).ok()?;
    let table: toml::Table = toml::from_str(&text).ok()?;
    table.get("method")?.as_str().map(String::from)
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let fake = read_pngs(&a.fake)?;
    let real = read_pngs(&a.real)?;
    let fake_ids: Vec<&String> = fake.iter().map(|(n, _)| n).collect();
    let real_ids: Vec<&String> = real.iter().map(|(n, _)| n).collect();
    if fake_ids != real_ids {
        return Err(xview::Error::Metric("fake and real directories hold different file names".into()).into());
    }
    let method = a
        .method
        .clone()
        .or_else(|| a.fake.parent().and_then(run_method))
        .unwrap_or_else(|| "unknown".into());
    let clf = SceneClassifier::load(&a.classifier, &Device::Cpu)?;
    let f: Vec<Image> = fake.into_iter().map(|(_, i)| i).collect();
    let r: Vec<Image> = real.into_iter().map(|(_, i)| i).collect();
    let opts = EvalOptions {
        kl_batches: a.kl_batches,
    };
    let rep = evaluate(&method, &f, &r, &clf, &opts)?;
    std::fs::create_dir_all(&a.out).map_err(xview::Error::from)?;
    std::fs::write(a.out.join("metrics.csv"), rep.to_csv()?).map_err(xview::Error::from)?;
    let table = MetricReport::table(std::slice::from_ref(&rep));
    std::fs::write(a.out.join("metrics.txt"), &table).map_err(xview::Error::from)?;
    snapshot(&a.out, "evaluate", a)?;
    print!("{table}");
    Ok(())
}

fn classifier_cmd(a: &ClassifierArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let labeled: Vec<(Image, usize)> = ds
        .train
        .iter()
        .filter_map(|s| s.label.map(|l| (s.ground.clone(), l)))
        .collect();
    if labeled.len() < ds.train.len() {
        log::warn!("{} training samples carry no label", ds.train.len() - labeled.len());
    }
    let classes = xview::dataman::SCENE_CLASSES
        .len()
        .max(labeled.iter().map(|(_, l)| l + 1).max().unwrap_or(0));
    let cfg = ClassifierTrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        seed: a.seed,
        ..Default::default()
    };
    let (clf, acc) = train_classifier(&labeled, classes, &cfg, &Device::Cpu)?;
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(xview::Error::from)?;
    clf.save(&a.out)?;
    snapshot(dir, "train-classifier", a)?;
    println!("classifier training accuracy {:.1}%, saved to {}", 100.0 * acc, a.out.display());
    Ok(())
}
