//! `mrcnet` command-line tool.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use mrcnet::config::RunConfig;
use mrcnet::dataset::{self, load_annotations, load_manifest, DatasetManifest, PointAnnotationSet, Split};
use mrcnet::density::{render_density, sigma_from_gsd, DensityMap, GaussianSpec, GtMode};
use mrcnet::evaluation::{
    counting_metrics, detect_and_match, format_table, CountPair, Detection, DetectionResult, DetectionSummary,
};
use mrcnet::inference::{
    count_from_map, load_items, predict_tiled, CountHead, EvalItem, FullImagePredictor, InferenceConfig,
    OraclePredictor, TiledPredictor,
};
use mrcnet::model::{Model, ModelOutput};
use mrcnet::patches::{generate_samples, write_sample_cache, SourceImage};
use mrcnet::raster::ImageBuf;
use mrcnet::synthetic::{write_fixture, SceneSpec};
use mrcnet::trainer::{train, TiledValidator, TrainOutputs, Validator};

/// Marker left in an output directory until a command finishes.
const INCOMPLETE: &str = "INCOMPLETE";

#[derive(Parser)]
#[command(name = "mrcnet", version, about = "Crowd counting with multi-resolution density maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GtModeArg {
    GsdAdaptive,
    KnnAdaptive,
}

impl From<GtModeArg> for GtMode {
    fn from(m: GtModeArg) -> Self {
        match m {
            GtModeArg::GsdAdaptive => GtMode::GsdAdaptive,
            GtModeArg::KnnAdaptive => GtMode::knn_default(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn select(self, manifest: &DatasetManifest) -> Vec<dataset::ImageRecord> {
        match self {
            SplitArg::Train => dataset::split(manifest, Split::Train),
            SplitArg::Test => dataset::split(manifest, Split::Test),
            SplitArg::All => manifest.records.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render ground-truth density maps for every record of a manifest.
    Gt {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "gsd-adaptive")]
        mode: GtModeArg,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate the training patch cache described by a run configuration.
    Tile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Parent of the run directory.
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
    },
    /// Score a checkpoint (or the ground-truth oracle) on a manifest split.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Predict the rendered ground truth instead of running a network.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Run configuration supplying inference, evaluation and GT settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Also detect and match individual persons (needs GSD per record).
        #[arg(long)]
        detect: bool,
        /// Write density and detection overlays as PNG.
        #[arg(long)]
        overlays: bool,
    },
    /// Predict density maps for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Extract persons from predicted density maps.
    Detect {
        /// Full-resolution density map.
        #[arg(long)]
        high: PathBuf,
        /// Counting map; its sum sets the number of detections.
        #[arg(long)]
        low: PathBuf,
        #[arg(long)]
        gsd: f64,
        #[arg(long)]
        min_sep_px: Option<usize>,
        /// Ground-truth points to match against.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write a synthetic corpus of blob-people scenes.
    Fixture {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 20)]
        min_people: usize,
        #[arg(long, default_value_t = 150)]
        max_people: usize,
        #[arg(long, default_value_t = 0.08)]
        gsd: f64,
        /// Put every n-th image in the test split (0: none).
        #[arg(long, default_value_t = 0)]
        test_every: usize,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gt { manifest, mode, output } => cmd_gt(&manifest, mode.into(), &output),
        Command::Tile { config, output } => cmd_tile(&config, &output),
        Command::Train { config, runs_dir } => cmd_train(&config, &runs_dir).map(|dir| {
            println!("{}", dir.display());
        }),
        Command::Eval {
            checkpoint,
            oracle: _,
            manifest,
            split,
            config,
            output,
            detect,
            overlays,
        } => cmd_eval(&EvalArgs {
            checkpoint,
            manifest,
            split,
            config,
            output,
            detect,
            overlays,
        }),
        Command::Predict {
            checkpoint,
            image,
            config,
            output,
        } => cmd_predict(&checkpoint, &image, config.as_deref(), &output),
        Command::Detect {
            high,
            low,
            gsd,
            min_sep_px,
            annotations,
            output,
        } => cmd_detect(&high, &low, gsd, min_sep_px, annotations.as_deref(), &output),
        Command::Fixture {
            output,
            count,
            seed,
            size,
            min_people,
            max_people,
            gsd,
            test_every,
        } => {
            let spec = SceneSpec {
                height: size,
                width: size,
                min_people,
                max_people,
                gsd,
                ..SceneSpec::default()
            };
            let path = write_fixture(&output, count, &spec, seed, test_every)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(INCOMPLETE), "").with_context(|| format!("writing into {}", dir.display()))
}

fn mark_complete(dir: &Path) -> Result<()> {
    fs::remove_file(dir.join(INCOMPLETE)).with_context(|| format!("finalizing {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_gt(manifest_path: &Path, mode: GtMode, output: &Path) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    create_dir(output)?;
    let mut summary = String::from("image_id,sigma,rendered_mass,annotation_count\n");
    for record in &manifest.records {
        let image_path = manifest.resolve(&record.image_path);
        let (h, w) = ImageBuf::dimensions(&image_path).with_context(|| format!("image {}", record.id))?;
        if (h, w) != (record.height as usize, record.width as usize) {
            bail!(
                "image {}: {} is {w}x{h}, manifest says {}x{}",
                record.id,
                image_path.display(),
                record.width,
                record.height
            );
        }
        let points = manifest.load_annotations(record)?;
        let spec = mode.gaussian_spec(&points, record.gsd)?;
        let map = render_density(&points, (h, w), &spec)?;
        map.write(&output.join(format!("{}.dmap", record.id)))?;
        let sigma = match &spec {
            GaussianSpec::Uniform { sigma_px } => sigma_px.to_string(),
            GaussianSpec::PerPoint { .. } => "knn_adaptive".into(),
        };
        let _ = writeln!(summary, "{},{sigma},{},{}", record.id, map.sum(), points.len());
    }
    write(&output.join("summary.csv"), &summary)?;
    mark_complete(output)
}

fn load_sources(cfg: &RunConfig, split: Split) -> Result<(DatasetManifest, Vec<SourceImage>)> {
    let manifest = load_manifest(&cfg.data.manifest)?;
    let records = dataset::split(&manifest, split);
    let items = load_items(&manifest, &records)?;
    let sources = items
        .iter()
        .map(|item| SourceImage::from_item(item, &cfg.data.gt))
        .collect::<mrcnet::Result<Vec<_>>>()?;
    Ok((manifest, sources))
}

fn cmd_tile(config: &Path, output: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (_, sources) = load_sources(&cfg, cfg.data.split)?;
    let samples = generate_samples(&sources, &cfg.pipeline)?;
    create_dir(output)?;
    write_sample_cache(output, &samples)?;
    log::info!("{} samples from {} images", samples.len(), sources.len());
    mark_complete(output)
}

fn run_dir_name(config_bytes: &[u8]) -> String {
    let digest = Sha256::digest(config_bytes);
    let hash: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f");
    format!("{hash}-{stamp}")
}

fn cmd_train(config: &Path, runs_dir: &Path) -> Result<PathBuf> {
    let bytes = fs::read(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg = RunConfig::load(config)?;
    let run_dir = runs_dir.join(run_dir_name(&bytes));
    create_dir(&run_dir)?;
    fs::write(run_dir.join("config.toml"), &bytes)?;
    write(&run_dir.join("effective_config.toml"), &cfg.to_toml()?)?;

    let (manifest, sources) = load_sources(&cfg, cfg.data.split)?;
    let samples = generate_samples(&sources, &cfg.pipeline)?;
    log::info!("{} training samples from {} images", samples.len(), sources.len());
    drop(sources);

    let model = Model::build(&cfg.model, DType::F32, &Device::Cpu)?;
    model.initialize(&mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;

    let validation_items = match cfg.data.validation_split {
        Some(split) => load_items(&manifest, &dataset::split(&manifest, split))?,
        None => Vec::new(),
    };
    let validator = TiledValidator {
        config: cfg.inference,
        head: cfg.evaluation.count_head,
    };
    let outputs = TrainOutputs {
        run_dir: Some(&run_dir),
        validation: (!validation_items.is_empty())
            .then_some((&validator as &dyn Validator, validation_items.as_slice())),
    };
    let report = train(&model, &samples, &cfg.train, &cfg.loss, &outputs)?;
    if !report.validations.is_empty() {
        let mut csv = String::from("step,mae,mnae,rmse\n");
        for (step, m) in &report.validations {
            let mnae = m.mnae.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(csv, "{step},{},{mnae},{}", m.mae, m.rmse);
        }
        write(&run_dir.join("validation.csv"), &csv)?;
    }
    mark_complete(&run_dir)?;
    Ok(run_dir)
}

struct EvalArgs {
    checkpoint: Option<PathBuf>,
    manifest: PathBuf,
    split: SplitArg,
    config: Option<PathBuf>,
    output: PathBuf,
    detect: bool,
    overlays: bool,
}

/// Loads a checkpoint, checking it against the configuration's model
/// section when one is given.
fn load_model(checkpoint: &Path, cfg: Option<&RunConfig>) -> Result<Model> {
    let model = Model::load_checkpoint(checkpoint, &Device::Cpu)?;
    if let Some(cfg) = cfg {
        let (mut a, mut b) = (model.config().clone(), cfg.model.clone());
        for c in [&mut a, &mut b] {
            c.use_pretrained_encoder = false;
            c.pretrained_path = None;
            c.init_std = 0.0;
        }
        if a != b {
            bail!(
                "checkpoint {} does not match the configured model: checkpoint has {:?}, configuration has {:?}",
                checkpoint.display(),
                model.config(),
                cfg.model
            );
        }
    }
    Ok(model)
}

fn load_config(path: Option<&Path>) -> Result<Option<RunConfig>> {
    path.map(|p| RunConfig::load(p).map_err(anyhow::Error::from)).transpose()
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let inference = cfg.as_ref().map(|c| c.inference).unwrap_or_default();
    let evaluation = cfg.as_ref().map(|c| c.evaluation).unwrap_or_default();
    let gt_mode = cfg.as_ref().map(|c| c.data.gt).unwrap_or_default();

    let manifest = load_manifest(&args.manifest)?;
    let records = args.split.select(&manifest);
    if args.detect {
        for r in &records {
            r.require_gsd()?;
        }
    }
    let model = args
        .checkpoint
        .as_deref()
        .map(|p| load_model(p, cfg.as_ref()))
        .transpose()?;
    let items = load_items(&manifest, &records)?;

    create_dir(&args.output)?;
    let oracle = OraclePredictor { gt_mode };
    let tiled = model.as_ref().map(|m| TiledPredictor { model: m, config: inference });
    let predictor: &dyn FullImagePredictor = match &tiled {
        Some(t) => t,
        None => &oracle,
    };
    let method = if tiled.is_some() { "MRCNet" } else { "GT oracle" };

    let mut pairs = Vec::with_capacity(items.len());
    let mut summaries = Vec::new();
    for item in &items {
        let out = predictor.predict(item)?;
        pairs.push(CountPair::new(
            item.record.id.clone(),
            item.points.len() as f64,
            out.count(evaluation.count_head),
        ));
        let detection = if args.detect {
            let gsd = item.record.require_gsd()?;
            let result = detect_and_match(&out, &item.points, gsd, evaluation.min_sep_px)?;
            write(
                &args.output.join(format!("{}_detections.csv", item.record.id)),
                &result.to_csv(),
            )?;
            summaries.push(result.summary);
            Some(result)
        } else {
            None
        };
        if args.overlays {
            write_overlays(&args.output, item, &out, detection.as_ref())?;
        }
    }
    if pairs.is_empty() {
        log::warn!("no records in the selected split");
        return mark_complete(&args.output);
    }
    let report = counting_metrics(&pairs)?;
    report.write_csv(&args.output.join("metrics.csv"))?;
    let overall = (!summaries.is_empty()).then(|| DetectionSummary::merge(&summaries));
    if let Some(s) = &overall {
        write(
            &args.output.join("detection_summary.csv"),
            &format!(
                "true_positives,detections,ground_truth,precision,recall,f1\n{},{},{},{},{},{}\n",
                s.true_positives, s.detections, s.ground_truth, s.precision, s.recall, s.f1
            ),
        )?;
    }
    let table = format_table(method, &report, overall.as_ref());
    print!("{table}");
    write(&args.output.join("table.txt"), &table)?;
    mark_complete(&args.output)
}

/// Heat overlay of the full-resolution prediction, and detections drawn as
/// small boxes (green matched, red unmatched) with GT points in blue.
fn write_overlays(dir: &Path, item: &EvalItem, out: &ModelOutput, detection: Option<&DetectionResult>) -> Result<()> {
    let map = &out.density_high;
    let peak = map.values.iter().copied().fold(0.0f32, f32::max).max(f32::MIN_POSITIVE);
    let mut heat = item.image.to_grayscale(3);
    for (px, &v) in heat.data.chunks_mut(3).zip(&map.values) {
        let a = (v / peak).sqrt().clamp(0.0, 1.0);
        px[0] = px[0] * (1.0 - a) + a;
        px[1] *= 1.0 - a;
        px[2] *= 1.0 - a;
    }
    heat.save_png(&dir.join(format!("{}_density.png", item.record.id)))?;

    if let Some(det) = detection {
        let mut img = item.image.clone();
        for &(x, y) in &item.points.points {
            mark(&mut img, x, y, [0.0, 0.3, 1.0], 1);
        }
        let matched: std::collections::HashSet<usize> = det.matches.iter().map(|m| m.detection).collect();
        for (i, d) in det.detections.iter().enumerate() {
            let color = if matched.contains(&i) { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
            mark(&mut img, d.x, d.y, color, 2);
        }
        img.save_png(&dir.join(format!("{}_detections.png", item.record.id)))?;
    }
    Ok(())
}

fn mark(img: &mut ImageBuf, x: f64, y: f64, color: [f32; 3], r: isize) {
    let (cx, cy) = (x.floor() as isize, y.floor() as isize);
    for row in cy - r..=cy + r {
        for col in cx - r..=cx + r {
            let on_edge = (row - cy).abs() == r || (col - cx).abs() == r;
            if on_edge && row >= 0 && col >= 0 && (row as usize) < img.height && (col as usize) < img.width {
                let base = (row as usize * img.width + col as usize) * img.channels;
                img.data[base..base + 3].copy_from_slice(&color);
            }
        }
    }
}

fn cmd_predict(checkpoint: &Path, image_path: &Path, config: Option<&Path>, output: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let inference: InferenceConfig = cfg.as_ref().map(|c| c.inference).unwrap_or_default();
    let model = load_model(checkpoint, cfg.as_ref())?;
    let image = ImageBuf::open(image_path)?;
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    create_dir(output)?;
    let out = predict_tiled(&model, &image, &id, inference.tile, inference.overlap)?;
    out.density_low.write(&output.join(format!("{id}.low.dmap")))?;
    out.density_high.write(&output.join(format!("{id}.high.dmap")))?;
    write(
        &output.join("summary.csv"),
        &format!(
            "image_id,count_low,count_high\n{id},{},{}\n",
            out.count(CountHead::Low),
            out.count(CountHead::High)
        ),
    )?;
    println!("{id}: {:.2} persons", out.count(CountHead::Low));
    mark_complete(output)
}

fn cmd_detect(
    high: &Path,
    low: &Path,
    gsd: f64,
    min_sep_px: Option<usize>,
    annotations: Option<&Path>,
    output: &Path,
) -> Result<()> {
    let high = DensityMap::read(high, "high")?;
    let low = DensityMap::read(low, "low")?;
    let sep = match min_sep_px {
        Some(s) => s,
        None => sigma_from_gsd(gsd)? as usize,
    };
    let target = count_from_map(&low).round().max(0.0) as usize;
    let found = mrcnet::evaluation::detect_persons(&high, target, sep);
    if found.shortfall > 0 {
        log::warn!("found {} of {target} requested maxima", found.items.len());
    }
    let text = match annotations {
        Some(path) => {
            let points = read_points(path, high.width, high.height)?;
            let result = mrcnet::evaluation::match_detections(&found.items, &points, gsd)?;
            println!(
                "precision {:.4} recall {:.4} f1 {:.4}",
                result.precision(),
                result.recall(),
                result.f1()
            );
            result.to_csv()
        }
        None => detections_csv(&found.items),
    };
    write(output, &text)
}

fn read_points(path: &Path, width: usize, height: usize) -> Result<PointAnnotationSet> {
    let record = dataset::ImageRecord {
        id: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        width: width as u32,
        height: height as u32,
        gsd: None,
        event_type: dataset::EventType::Other,
        split: Split::Test,
        image_path: PathBuf::new(),
        annotation_path: path.to_path_buf(),
    };
    Ok(load_annotations(&record, Path::new("."))?)
}

fn detections_csv(items: &[Detection]) -> String {
    let mut out = String::from("x,y,score\n");
    for d in items {
        let _ = writeln!(out, "{},{},{}", d.x, d.y, d.score);
    }
    out
}
