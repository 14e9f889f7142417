use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use eps_seg::ablation::{run_ablation, write_ablation_csv, AblationAxis};
use eps_seg::checkpoint::Checkpoint;
use eps_seg::config::{load_dataset, RunConfig};
use eps_seg::data::image::{load_intensity, load_label_map, read_manifest, save_label_png};
use eps_seg::data::synth::write_synth_dataset;
use eps_seg::data::{load_manifest, sample_sparse_labels, synth_generate, MaskSpec, SynthSpec};
use eps_seg::gradcheck::{grad_check, small_instance, GradCheckConfig, LossTerm};
use eps_seg::inference::{evaluate, save_overlay_png, segment_image, EvalReport, InferenceConfig};
use eps_seg::model::EpsSeg;
use eps_seg::trainer::{fit, FitOutput};
use eps_seg::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "eps-seg", version, about = "Sparsely supervised segmentation with a hierarchical VAE")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 256)]
        side: usize,
        #[arg(long, default_value_t = 8)]
        images: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f32,
    },
    /// Draw a sparse label set from a dataset's dense maps.
    SampleLabels {
        /// Dataset manifest (image and label path per line).
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        stratified: bool,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Side of the class-pure window around every labelled pixel.
        #[arg(long, default_value_t = 3)]
        window: usize,
    },
    /// Train from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        label_fraction: Option<f64>,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Segment images with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        /// Blank the centre window of each patch as during training.
        #[arg(long)]
        inference_mask: bool,
        #[arg(long, default_value_t = 3)]
        mask_side: usize,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Score predictions written by `predict` against a labelled manifest.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of the loss terms.
    Gradcheck {
        #[arg(long, default_value = "all")]
        loss: String,
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Sweep one axis of the ablation grid.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated run seeds; defaults to three seeds from --seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        steps: Option<u64>,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn report(&self) -> (u8, &'static str, String) {
        match self {
            Failure::Usage(m) => (2, "usage", m.clone()),
            Failure::Core(e) => match e.kind() {
                ErrorKind::Config => (2, "config", e.to_string()),
                ErrorKind::Data => (3, "data", e.to_string()),
                ErrorKind::Numeric => (4, "numeric", e.to_string()),
            },
        }
    }
}

type CmdResult = std::result::Result<Value, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&Failure::Usage(e.to_string().trim().to_string())),
    };
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
            ExitCode::SUCCESS
        }
        Err(f) => fail(&f),
    }
}

fn fail(f: &Failure) -> ExitCode {
    let (code, kind, message) = f.report();
    eprintln!("{}", json!({ "error": { "kind": kind, "code": code, "message": message } }));
    ExitCode::from(code)
}

fn run(cli: Cli) -> CmdResult {
    let seed = cli.seed;
    match cli.command {
        Command::Synth { out, classes, side, images, noise } => {
            let spec = SynthSpec { num_classes: classes, image_side: side, num_images: images, noise_std: noise, seed: seed.unwrap_or(0) };
            let data = synth_generate(&spec)?;
            let manifest = write_synth_dataset(&out, &spec, &data)?;
            Ok(json!({ "manifest": manifest, "images": data.len(), "spec": spec }))
        }
        Command::SampleLabels { dataset, out, fraction, stratified, classes, window } => {
            let images = load_manifest(&dataset, classes)?;
            let set = sample_sparse_labels(&images, classes, fraction, seed.unwrap_or(0), stratified, window)?;
            set.write_csv(&out)?;
            let total: usize = images.iter().map(|i| i.num_pixels()).sum();
            Ok(json!({ "labels": out, "count": set.len(), "class_counts": set.class_counts(classes), "total_pixels": total, "fraction": fraction }))
        }
        Command::Train { config, out, steps, label_fraction, labels } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(f) = label_fraction {
                cfg.data.label_fraction = f;
            }
            if labels.is_some() {
                cfg.data.labels = labels;
            }
            cfg.validate()?;
            train(&cfg, &out)
        }
        Command::Predict { checkpoint, out, stride, batch_size, inference_mask, mask_side, images } => {
            let mask = inference_mask.then(|| MaskSpec::new(mask_side)).transpose()?;
            predict(&checkpoint, &out, &InferenceConfig { stride, batch_size, mask }, &images)
        }
        Command::Eval { predictions, truth, classes, out } => {
            let v = eval(&predictions, &truth, classes)?;
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&v).expect("json value")).map_err(|source| Error::Io { path, source })?;
            }
            Ok(v)
        }
        Command::Gradcheck { loss, probes, tolerance } => gradcheck(&loss, probes, tolerance, seed.unwrap_or(0)),
        Command::Ablate { axis, config, out, seeds, steps } => {
            let axis = AblationAxis::from_str(&axis).map_err(|e| Failure::Usage(e.to_string()))?;
            let mut base = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            if let Some(s) = steps {
                base.train.steps = s;
            }
            let seeds = if seeds.is_empty() {
                let s = seed.unwrap_or(0);
                vec![s, s + 1, s + 2]
            } else {
                seeds
            };
            let rows = run_ablation(axis, &base, &seeds, Some(&out))?;
            let csv = out.join(format!("ablation_{axis}.csv"));
            write_ablation_csv(&csv, &rows)?;
            Ok(json!({ "csv": csv, "rows": rows }))
        }
    }
}

fn train(cfg: &RunConfig, out: &Path) -> CmdResult {
    std::fs::create_dir_all(out).map_err(|source| Error::Io { path: out.to_path_buf(), source })?;
    let resolved = out.join("config.toml");
    std::fs::write(&resolved, cfg.to_toml()?).map_err(|source| Error::Io { path: resolved.clone(), source })?;
    let data = load_dataset(cfg, cfg.train.seed)?;
    let model = EpsSeg::new(&cfg.model)?;
    let output = FitOutput::to_dir(out);
    let result = fit(&model, &cfg.train, &data.train, &data.labels, &data.test, &output)?;
    Ok(json!({
        "steps": result.state.step,
        "labels": data.labels.len(),
        "log": output.log_path(),
        "checkpoint": output.final_checkpoint(),
        "best_dice": result.state.best_dice,
        "aborted_steps": result.aborted_steps,
        "validation": result.validation.iter().map(|p| json!({ "step": p.step, "mean_dice": p.mean_dice })).collect::<Vec<_>>(),
    }))
}

fn predict(checkpoint: &Path, out: &Path, inference: &InferenceConfig, images: &[PathBuf]) -> CmdResult {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = EpsSeg::new(&ckpt.model)?;
    std::fs::create_dir_all(out).map_err(|source| Error::Io { path: out.to_path_buf(), source })?;
    let mut written = Vec::new();
    for path in images {
        let pixels = load_intensity(path)?;
        let seg = segment_image(&model, &ckpt.params, &pixels, inference)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let labels_png = out.join(format!("{stem}_seg.png"));
        save_label_png(&labels_png, &seg.labels)?;
        save_overlay_png(&out.join(format!("{stem}_overlay.png")), &pixels, &seg.labels)?;
        let mut counts = vec![0usize; ckpt.model.num_classes];
        for &l in &seg.labels {
            counts[l as usize] += 1;
        }
        let summary = json!({
            "image": path,
            "segmentation": labels_png,
            "shape": [pixels.nrows(), pixels.ncols()],
            "stride": inference.stride,
            "inference_mask": inference.mask.is_some(),
            "class_pixels": counts,
            "mean_confidence": seg.confidence.mean().unwrap_or(0.0),
        });
        let json_path = out.join(format!("{stem}.json"));
        std::fs::write(&json_path, serde_json::to_string_pretty(&summary).expect("json value"))
            .map_err(|source| Error::Io { path: json_path, source })?;
        written.push(summary);
    }
    Ok(json!({ "predictions": written }))
}

fn eval(predictions: &Path, truth: &Path, classes: usize) -> std::result::Result<Value, Error> {
    let dir = truth.parent().unwrap_or(Path::new(""));
    let mut reports = Vec::new();
    let mut per_image = Vec::new();
    for (image, labels) in read_manifest(dir, truth)? {
        let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let predicted = load_label_map(&predictions.join(format!("{stem}_seg.png")), classes)?;
        let report = evaluate(&predicted, &load_label_map(&labels, classes)?, classes)?;
        per_image.push(json!({ "image": stem, "report": report }));
        reports.push(report);
    }
    let pooled = EvalReport::pooled(&reports)?;
    Ok(json!({ "mean_dice": pooled.mean_dice, "pooled": pooled, "images": per_image }))
}

fn gradcheck(loss: &str, probes: usize, tolerance: f64, seed: u64) -> CmdResult {
    let terms = if loss == "all" {
        LossTerm::ALL.to_vec()
    } else {
        vec![LossTerm::from_str(loss).map_err(|e| Failure::Usage(e.to_string()))?]
    };
    let inst = small_instance(seed)?;
    let config = GradCheckConfig { probes, tolerance, seed, ..GradCheckConfig::default() };
    let mut rows = Vec::new();
    let mut all_passed = true;
    for term in terms {
        let r = grad_check(&inst, term, &config)?;
        all_passed &= r.passed;
        rows.push(json!({
            "term": term.name(),
            "value": r.value,
            "probes": r.probes.len(),
            "excluded": r.excluded,
            "max_rel_err": r.max_rel_err,
            "passed": r.passed,
        }));
    }
    if !all_passed {
        let summary = serde_json::to_string(&rows).expect("json value");
        return Err(Failure::Core(Error::Numeric(format!("gradient check failed: {summary}"))));
    }
    Ok(json!({ "passed": true, "tolerance": tolerance, "terms": rows }))
}
