use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lesion_core::augment::{MaskRaster, Raster, Resample};
use lesion_core::checkpoint::Checkpoint;
use lesion_core::data::{
    assign_folds, generate_synthetic_dataset, load_manifest, FoldAssignment, LeakInjection, LeakKind, ManifestEntry,
    SynthConfig, Task,
};
use lesion_core::ensemble::{
    average_class_probs, finalize_segmentation, segmentation_mask_path, write_classification_csv,
    write_predictions_csv,
};
use lesion_core::image_io::{save_mask, save_raster};
use lesion_core::metrics::{binarize, ProbMap};
use lesion_core::screen::{screen_dataset, write_report_csv, Contingency, ScreenParams};
use lesion_core::train::{
    assign_for, class0_auc, mean_jaccard, metric_name, predict, train_all_folds, Corpus, FoldReport, Prediction,
    TrainConfig,
};

#[derive(Parser)]
#[command(name = "lesion", version, about = "Skin lesion segmentation and classification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with manifest
    Synth(SynthArgs),
    /// Assign groups to cross-validation folds
    Folds(FoldsArgs),
    /// Screen images for bright-edge and gauze artifacts
    Screen(ScreenArgs),
    /// Train the segmentation U-Net on every fold
    TrainSeg(TrainArgs),
    /// Train the lesion classifier on every fold
    TrainCls(TrainArgs),
    /// Score checkpoints and their ensemble on a labelled manifest
    Eval(EvalArgs),
    /// Write final ensemble masks or class probabilities
    Ensemble(PredictArgs),
    /// Write averaged probability outputs
    Predict(PredictArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Seg,
    Cls,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Seg => Task::Segmentation,
            TaskArg::Cls => Task::Classification,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Leak injection as `kind:class:fraction`, kind is `bright` or `gauze`
    #[arg(long = "leak")]
    leaks: Vec<String>,
    #[arg(long, default_value = "synth_")]
    prefix: String,
}

#[derive(Args)]
struct FoldsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    stratify: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to `folds.json` next to the manifest
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScreenArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file overriding detector thresholds
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// TrainConfig JSON; without it the preset is used
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Existing fold assignment; computed from the config otherwise
    #[arg(long)]
    folds_file: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required = true, num_args = 1..)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, required = true, num_args = 1..)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Folds(a) => folds(a),
        Command::Screen(a) => screen(a),
        Command::TrainSeg(a) => train(a, Task::Segmentation),
        Command::TrainCls(a) => train(a, Task::Classification),
        Command::Eval(a) => eval(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Predict(a) => predict_cmd(a),
    }
}

fn parse_leak(s: &str) -> Result<LeakInjection> {
    let parts: Vec<&str> = s.split(':').collect();
    let [kind, class, fraction] = parts.as_slice() else {
        bail!("leak `{s}` is not kind:class:fraction");
    };
    let kind = match *kind {
        "bright" => LeakKind::BrightEdges,
        "gauze" => LeakKind::Gauze,
        other => bail!("unknown leak kind `{other}`"),
    };
    Ok(LeakInjection {
        kind,
        class: class.parse().context("leak class")?,
        fraction: fraction.parse().context("leak fraction")?,
    })
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::new(a.n, a.size, a.task.into(), a.seed);
    cfg.leaks = a.leaks.iter().map(|s| parse_leak(s)).collect::<Result<_>>()?;
    cfg.id_prefix = a.prefix;
    let entries = generate_synthetic_dataset(&cfg, &a.out_dir)?;
    println!("wrote {} items to {}", entries.len(), a.out_dir.join("manifest.json").display());
    Ok(())
}

fn manifest_base(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn folds(a: FoldsArgs) -> Result<()> {
    let entries = load_manifest(&a.manifest)?;
    let asg = assign_folds(&entries, a.k, a.stratify, a.seed)?;
    let out = a.out.unwrap_or_else(|| manifest_base(&a.manifest).join("folds.json"));
    asg.save(&out)?;
    println!("groups per fold: {:?}", asg.groups_per_fold());
    println!("wrote {}", out.display());
    Ok(())
}

fn print_counts(name: &str, counts: &std::collections::BTreeMap<usize, usize>) {
    let purity = Contingency::purity(counts).map_or("-".to_string(), |p| format!("{:.1}%", 100.0 * p));
    println!("{name:<12} {counts:?} purity {purity}");
}

fn screen(a: ScreenArgs) -> Result<()> {
    let params: ScreenParams = match &a.params {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| p.display().to_string())?)?,
        None => ScreenParams::default(),
    };
    let entries = load_manifest(&a.manifest)?;
    let (reports, table) = screen_dataset(&entries, &manifest_base(&a.manifest), &params)?;
    write_report_csv(&a.out, &reports)?;
    let flagged = reports.iter().filter(|r| r.flagged()).count();
    println!("{flagged} of {} items flagged", reports.len());
    print_counts("bright_edge", &table.bright_edge);
    print_counts("gauze", &table.gauze);
    print_counts("any_flag", &table.any);
    print_counts("unflagged", &table.unflagged);
    Ok(())
}

fn load_config(a: &TrainArgs, task: Task) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| p.display().to_string())?)?,
        None => match (a.preset, task) {
            (Preset::Desk, Task::Segmentation) => TrainConfig::desk_segmentation(),
            (Preset::Desk, Task::Classification) => TrainConfig::desk_classification(),
            (Preset::Paper, Task::Segmentation) => TrainConfig::paper_segmentation(),
            (Preset::Paper, Task::Classification) => TrainConfig::paper_classification(),
        },
    };
    if cfg.task != task {
        bail!("config is for {:?}, command trains {task:?}", cfg.task);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(f) = a.folds {
        cfg.folds = f;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.verbose |= a.verbose;
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs, task: Task) -> Result<()> {
    let cfg = load_config(&a, task)?;
    let entries = load_manifest(&a.manifest)?;
    let assignment = match &a.folds_file {
        Some(p) => FoldAssignment::load(p)?,
        None => assign_for(&cfg, &entries)?,
    };
    if assignment.k != cfg.folds {
        bail!("fold file has {} folds, config asks for {}", assignment.k, cfg.folds);
    }
    std::fs::create_dir_all(&a.out_dir).with_context(|| a.out_dir.display().to_string())?;
    assignment.save(&a.out_dir.join("folds.json"))?;
    std::fs::write(a.out_dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    std::fs::write(
        a.out_dir.join("run.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "metric": metric_name(task),
            "evaluated_at": "model_resolution",
            "input_size": cfg.input_size(),
        }))?,
    )?;

    let corpus = Corpus::load(&cfg, &entries, &manifest_base(&a.manifest))?;
    let results = train_all_folds(&cfg, &corpus, &assignment, Some(&a.out_dir));
    let mut done = Vec::new();
    let mut failures = Vec::new();
    for (fold, r) in results.into_iter().enumerate() {
        match r {
            Ok(r) => done.push(r),
            Err(e) => failures.push(format!("fold {fold}: {e}")),
        }
    }
    if !done.is_empty() {
        let table = FoldReport::from_results(&done)?.to_table(metric_name(task));
        std::fs::write(a.out_dir.join("report.csv"), &table)?;
        print!("{table}");
        for r in &done {
            if let Some(p) = &r.best_path {
                println!("fold {} best epoch {} -> {}", r.fold, r.best.meta.epoch, p.display());
            }
        }
    }
    if !failures.is_empty() {
        bail!("{} fold(s) failed:\n  {}", failures.len(), failures.join("\n  "));
    }
    Ok(())
}

fn load_checkpoints(paths: &[PathBuf]) -> Result<Vec<Checkpoint>> {
    paths
        .iter()
        .map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn load_images(entries: &[ManifestEntry], base: &Path) -> Result<Vec<Raster>> {
    Ok(entries.iter().map(|e| e.load_image(base)).collect::<lesion_core::Result<_>>()?)
}

fn maps_of(preds: &[Prediction]) -> Result<Vec<ProbMap>> {
    preds
        .iter()
        .map(|p| match p {
            Prediction::Map(m) => Ok(m.clone()),
            Prediction::Probs(_) => bail!("expected segmentation outputs"),
        })
        .collect()
}

fn rows_of(preds: &[Prediction]) -> Result<Vec<Vec<f64>>> {
    preds
        .iter()
        .map(|p| match p {
            Prediction::Probs(r) => Ok(r.clone()),
            Prediction::Map(_) => bail!("expected classification outputs"),
        })
        .collect()
}

/// Averages each image's outputs across models.
fn ensemble_outputs(per_model: &[Vec<Prediction>], folds: &[usize]) -> Result<Vec<Prediction>> {
    let n_images = per_model[0].len();
    (0..n_images)
        .map(|i| {
            let outs: Vec<Prediction> = per_model.iter().map(|m| m[i].clone()).collect();
            Ok(match &outs[0] {
                Prediction::Map(_) => {
                    let maps: Vec<(usize, ProbMap)> = folds.iter().copied().zip(maps_of(&outs)?).collect();
                    Prediction::Map(finalize_segmentation(&maps, folds.len(), 0.5)?.1)
                }
                Prediction::Probs(_) => Prediction::Probs(average_class_probs(&rows_of(&outs)?)?),
            })
        })
        .collect()
}

/// Fold slot of each checkpoint: its recorded fold when all are distinct,
/// otherwise its position.
fn fold_slots(cks: &[Checkpoint]) -> Vec<usize> {
    let recorded: Vec<Option<usize>> = cks.iter().map(|c| c.meta.fold).collect();
    let mut seen: Vec<usize> = recorded.iter().flatten().copied().collect();
    seen.sort_unstable();
    seen.dedup();
    let dense = seen.len() == cks.len() && seen.iter().enumerate().all(|(i, &f)| i == f);
    if dense {
        recorded.into_iter().map(|f| f.expect("all recorded")).collect()
    } else {
        (0..cks.len()).collect()
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let cks = load_checkpoints(&a.checkpoints)?;
    let entries = load_manifest(&a.manifest)?;
    let base = manifest_base(&a.manifest);
    let images = load_images(&entries, &base)?;
    let per_model = predict(&cks, &images)?;
    let ensembled = ensemble_outputs(&per_model, &fold_slots(&cks))?;
    let score = |preds: &[Prediction]| -> Result<f64> {
        match preds[0] {
            Prediction::Map(ref m) => {
                let truth = entries
                    .iter()
                    .map(|e| Ok(e.load_mask(&base)?.resized(m.height, m.width)?))
                    .collect::<Result<Vec<MaskRaster>>>()?;
                let refs: Vec<&MaskRaster> = truth.iter().collect();
                Ok(mean_jaccard(preds, &refs, a.threshold)?)
            }
            Prediction::Probs(_) => {
                let labels = entries
                    .iter()
                    .map(|e| e.label.with_context(|| format!("item `{}` has no label", e.item_id)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(class0_auc(preds, &labels)?)
            }
        }
    };
    for (p, preds) in a.checkpoints.iter().zip(&per_model) {
        println!("{}: {:.6}", p.display(), score(preds)?);
    }
    println!("ensemble: {:.6}", score(&ensembled)?);
    Ok(())
}

fn ensemble(a: PredictArgs) -> Result<()> {
    let cks = load_checkpoints(&a.checkpoints)?;
    let entries = load_manifest(&a.manifest)?;
    let images = load_images(&entries, &manifest_base(&a.manifest))?;
    let per_model = predict(&cks, &images)?;
    let outputs = ensemble_outputs(&per_model, &fold_slots(&cks))?;
    let mut rows = Vec::new();
    for ((e, img), out) in entries.iter().zip(&images).zip(outputs) {
        match out {
            Prediction::Map(m) => {
                let mask = binarize(&m, a.threshold).resized(img.height(), img.width())?;
                save_mask(&mask, &segmentation_mask_path(&a.out_dir, &e.item_id))?;
            }
            Prediction::Probs(r) => rows.push((e.item_id.clone(), r)),
        }
    }
    if !rows.is_empty() {
        let p = a.out_dir.join("classification.csv");
        write_classification_csv(&p, &rows)?;
        println!("wrote {}", p.display());
    } else {
        println!("wrote {} masks to {}", entries.len(), a.out_dir.display());
    }
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let cks = load_checkpoints(&a.checkpoints)?;
    let entries = load_manifest(&a.manifest)?;
    let images = load_images(&entries, &manifest_base(&a.manifest))?;
    let per_model = predict(&cks, &images)?;
    let outputs = ensemble_outputs(&per_model, &fold_slots(&cks))?;
    let mut rows = Vec::new();
    for (e, out) in entries.iter().zip(outputs) {
        match out {
            Prediction::Map(m) => {
                let px = m.values.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8).collect();
                let img = Raster::new(m.height, m.width, 1, px)?;
                save_raster(&img, &a.out_dir.join(format!("{}_prob.png", e.item_id)))?;
            }
            Prediction::Probs(r) => rows.push((e.item_id.clone(), r)),
        }
    }
    if !rows.is_empty() {
        let p = a.out_dir.join("predictions.csv");
        write_predictions_csv(&p, &rows)?;
        println!("wrote {}", p.display());
    } else {
        println!("wrote {} probability maps to {}", entries.len(), a.out_dir.display());
    }
    Ok(())
}
