use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::Args;
use mssl_core::checks::smoke_checks;
use mssl_core::format::{read_aemb, read_fgrid, write_aemb, write_checkpoint, write_fgrid};
use mssl_core::gradcheck::GradCheckConfig;
use mssl_core::metrics::{evaluate as score, EvalCase};
use mssl_core::synth::{scene_seed, SceneGenerator, TruthFile};
use mssl_core::trainer::train_run;
use mssl_core::{localize as run_localizer, AudioEmbedding, Error, FeatureGrid, PipelineConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::output::{write_json, write_localization, ObjectsFile};
use crate::ConfigArg;

pub const MANIFEST: &str = "manifest.json";
pub const FEATURES: &str = "features.fgrid";
pub const AUDIO: &str = "audio.aemb";
pub const TRUTH: &str = "truth.json";
pub const OBJECTS: &str = "objects.json";

/// A ground-truth case has no matching prediction.
#[derive(Debug)]
pub struct MissingCase(pub String);

impl std::fmt::Display for MissingCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "no prediction for case {}", self.0)
    }
}

impl std::error::Error for MissingCase {}

fn load_config(arg: &ConfigArg) -> Result<PipelineConfig> {
    let cfg = PipelineConfig::load(arg.config.as_deref()).with_context(|| match &arg.config {
        Some(p) => format!("loading config {}", p.display()),
        None => "default config".to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn read_features(path: &Path) -> Result<FeatureGrid> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_fgrid(&mut BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn read_audio(path: &Path) -> Result<AudioEmbedding> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_aemb(&mut BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Number of scenes with each source count, indexed by `K`.
    pub k_counts: Vec<usize>,
    pub scenes: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub k: usize,
    pub seed: u64,
}

impl Manifest {
    fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Args)]
pub struct SynthArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Number of scenes.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn synth(args: SynthArgs) -> Result<u8> {
    let cfg = load_config(&args.config)?;
    let generator = SceneGenerator::new(cfg.synth())?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let entries = (0..args.n)
        .into_par_iter()
        .map(|i| {
            let seed = scene_seed(args.seed, i as u64);
            let scene = generator.generate(seed)?;
            let name = format!("scene_{i:05}");
            let dir = args.out.join(&name);
            fs::create_dir_all(&dir)?;
            let mut w = create(&dir.join(FEATURES))?;
            write_fgrid(&mut w, &scene.visual)?;
            w.flush()?;
            let mut w = create(&dir.join(AUDIO))?;
            write_aemb(&mut w, &scene.audio)?;
            w.flush()?;
            let truth = TruthFile::from_truth(&scene.truth, cfg.height, cfg.width);
            write_json(&dir.join(TRUTH), &truth)?;
            Ok(ManifestEntry {
                name,
                k: scene.truth.k,
                seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut k_counts = vec![0; cfg.k_weights.len()];
    for e in &entries {
        k_counts[e.k] += 1;
    }
    let manifest = Manifest {
        count: entries.len(),
        seed: args.seed,
        height: cfg.height,
        width: cfg.width,
        channels: cfg.channels,
        k_counts,
        scenes: entries,
    };
    write_json(&args.out.join(MANIFEST), &manifest)?;
    println!("wrote {} scenes to {}", manifest.count, args.out.display());
    Ok(0)
}

#[derive(Args)]
pub struct LocalizeArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Visual feature grid (.fgrid).
    #[arg(long, requires = "audio", required_unless_present = "dataset")]
    features: Option<PathBuf>,
    /// Audio embeddings (.aemb).
    #[arg(long, requires = "features")]
    audio: Option<PathBuf>,
    /// Synthetic dataset directory; localizes every scene into `<out>/<scene>/`.
    #[arg(long, conflicts_with_all = ["features", "audio"])]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Heatmap upsampling, `nearest:F` for an integer factor F.
    #[arg(long)]
    upsample: Option<String>,
}

fn parse_upsample(spec: Option<&str>) -> Result<usize> {
    let Some(spec) = spec else {
        return Ok(1);
    };
    spec.strip_prefix("nearest:")
        .and_then(|f| f.parse::<usize>().ok())
        .filter(|&f| f >= 1)
        .ok_or_else(|| {
            anyhow!(Error::Config(format!(
                "upsample must be nearest:F with an integer F >= 1, got {spec:?}"
            )))
        })
}

fn localize_pair(
    features: &Path,
    audio: &Path,
    out: &Path,
    cfg: &PipelineConfig,
    scale: usize,
) -> Result<ObjectsFile> {
    let visual = read_features(features)?;
    let audio = read_audio(audio)?;
    let l = run_localizer(&visual, &audio, &cfg.localizer())?;
    write_localization(out, &l, scale)
}

pub fn localize(args: LocalizeArgs) -> Result<u8> {
    let cfg = load_config(&args.config)?;
    let scale = parse_upsample(args.upsample.as_deref())?;
    if let Some(dataset) = &args.dataset {
        let manifest = Manifest::read(dataset)?;
        let counts = manifest
            .scenes
            .par_iter()
            .map(|e| {
                let dir = dataset.join(&e.name);
                let objects = localize_pair(
                    &dir.join(FEATURES),
                    &dir.join(AUDIO),
                    &args.out.join(&e.name),
                    &cfg,
                    scale,
                )
                .with_context(|| format!("scene {}", e.name))?;
                Ok(objects.samples.iter().map(|s| s.k).sum::<usize>())
            })
            .collect::<Result<Vec<_>>>()?;
        println!(
            "localized {} scenes, {} objects",
            counts.len(),
            counts.iter().sum::<usize>()
        );
    } else {
        let (features, audio) = match (&args.features, &args.audio) {
            (Some(f), Some(a)) => (f, a),
            _ => unreachable!("clap enforces --features with --audio"),
        };
        let objects = localize_pair(features, audio, &args.out, &cfg, scale)?;
        for s in &objects.samples {
            println!("sample {}: {} objects", s.sample, s.k);
        }
    }
    Ok(0)
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Directory with one `<case>/objects.json` per case.
    #[arg(long)]
    pred: PathBuf,
    /// Directory with one `<case>/truth.json` per case.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Case names: the manifest's scenes, or else every subdirectory holding a
/// truth file, sorted.
fn case_names(truth_dir: &Path) -> Result<Vec<String>> {
    if truth_dir.join(MANIFEST).exists() {
        return Ok(Manifest::read(truth_dir)?
            .scenes
            .into_iter()
            .map(|e| e.name)
            .collect());
    }
    let mut names = Vec::new();
    for entry in
        fs::read_dir(truth_dir).with_context(|| format!("listing {}", truth_dir.display()))?
    {
        let entry = entry?;
        if entry.path().join(TRUTH).is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

fn load_case(pred_dir: &Path, truth_dir: &Path, name: &str) -> Result<EvalCase> {
    let truth_path = truth_dir.join(name).join(TRUTH);
    let text = fs::read_to_string(&truth_path)
        .with_context(|| format!("reading {}", truth_path.display()))?;
    let truth: TruthFile =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", truth_path.display()))?;
    let pred_path = pred_dir.join(name).join(OBJECTS);
    if !pred_path.is_file() {
        return Err(MissingCase(name.to_string()).into());
    }
    let objects = ObjectsFile::read(&pred_path)?;
    if (objects.height, objects.width) != (truth.height, truth.width) {
        return Err(anyhow!(Error::Dimension(format!(
            "case {name}: prediction is {}x{}, truth is {}x{}",
            objects.height, objects.width, truth.height, truth.width
        ))));
    }
    Ok(EvalCase {
        predicted: objects
            .predictions(0)
            .with_context(|| format!("case {name}"))?,
        truth: truth.masks().with_context(|| format!("case {name}"))?,
    })
}

pub fn evaluate(args: EvaluateArgs) -> Result<u8> {
    let cfg = load_config(&args.config)?;
    let names = case_names(&args.truth)?;
    let cases = names
        .par_iter()
        .map(|name| load_case(&args.pred, &args.truth, name))
        .collect::<Result<Vec<_>>>()?;
    let eval = cfg.eval();
    let report = score(&cases, &eval)?;
    let mut json = serde_json::Map::new();
    json.insert("ap".into(), report.ap.into());
    json.insert("auc".into(), report.auc.into());
    json.insert("cap".into(), report.cap.into());
    json.insert("piap".into(), report.piap.into());
    json.insert(
        format!("ciou@{}", eval.ciou_threshold),
        report.ciou_at_03.into(),
    );
    json.insert("counting_accuracy".into(), report.counting_accuracy.into());
    for (t, v) in &report.iou_at {
        json.insert(format!("iou@{t}"), (*v).into());
    }
    json.insert("cases".into(), cases.len().into());
    write_json(&args.out, &json)?;
    println!("{}", serde_json::to_string(&json)?);
    Ok(0)
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Trained checkpoint (.prjw).
    #[arg(long)]
    out: PathBuf,
    /// Also write the initial checkpoint here.
    #[arg(long)]
    init_out: Option<PathBuf>,
    /// JSON with the loss trace and held-out metric curve.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Serialize)]
struct TrainReport<'a> {
    losses: &'a [mssl_core::trainer::StepLoss],
    curve: &'a [mssl_core::trainer::CurvePoint],
}

pub fn train(args: TrainArgs) -> Result<u8> {
    let mut cfg = load_config(&args.config)?;
    cfg.steps = args.steps.unwrap_or(cfg.steps);
    cfg.lr = args.lr.unwrap_or(cfg.lr);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.batch = args.batch.unwrap_or(cfg.batch);
    cfg.validate()?;
    let outcome = train_run(&cfg.train(), &cfg.synth(), &cfg.localizer(), cfg.weights())?;
    if let Some(path) = &args.init_out {
        let mut w = create(path)?;
        write_checkpoint(&mut w, &outcome.initial.to_checkpoint())?;
        w.flush()?;
    }
    let mut w = create(&args.out)?;
    write_checkpoint(&mut w, &outcome.params.to_checkpoint())?;
    w.flush()?;
    if let Some(path) = &args.report {
        write_json(
            path,
            &TrainReport {
                losses: &outcome.losses,
                curve: &outcome.curve,
            },
        )?;
    }
    for p in &outcome.curve {
        println!(
            "step {:>5}: counting accuracy {:.4}, ciou@0.3 {:.4}",
            p.step, p.counting_accuracy, p.ciou_at_03
        );
    }
    Ok(0)
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Number of seeded smoke instances; three checks each.
    #[arg(long, default_value_t = 10)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative-error tolerance.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// JSON with every check's report.
    #[arg(long)]
    report: Option<PathBuf>,
}

pub fn gradcheck(args: GradcheckArgs) -> Result<u8> {
    let cfg = load_config(&args.config)?;
    let gc = GradCheckConfig {
        tolerance: args.tolerance,
        seed: args.seed,
        ..GradCheckConfig::default()
    };
    let checks = smoke_checks(&cfg, args.seed, args.instances, &gc)?;
    for c in &checks {
        println!(
            "{:<8} instance {:>3}: max rel error {:.3e} over {} coords  {}",
            c.name,
            c.instance,
            c.report.max_rel_error,
            c.report.checked,
            if c.report.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(path) = &args.report {
        write_json(path, &checks)?;
    }
    let failed = checks.iter().filter(|c| !c.report.passed).count();
    println!("{} checks, {} failed", checks.len(), failed);
    Ok(if failed == 0 { 0 } else { 1 })
}
