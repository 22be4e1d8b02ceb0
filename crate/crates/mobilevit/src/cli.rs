//! Command-line surface: dataset synthesis, split auditing, training,
//! prediction, ensembling, evaluation, explanation, and the attention
//! benchmark. Exit codes: 0 success, 2 usage error, 1 runtime failure.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{bench_attention, render_bench_table};
use crate::config::{load_config, FileConfig};
use crate::data::{
    hwc_to_chw, index_directory, load_resize_image, load_split, render_audit, split_index,
    synthesize_dataset, LoadedSplit, Splits, SplitSpec, SyntheticSpec,
};
use crate::ensemble::{
    accuracy_weights, average_ensemble, read_prediction_csv, stacked_apply, stacked_train,
    weighted_ensemble, write_prediction_csv, EnsembleWeights, PredictionMatrix, StackedConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{metrics_report, render_report};
use crate::model::{preset, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{train_with_callback, PlateauConfig, TrainConfig};
use crate::weights::{load_weights, read_weights, save_weights};
use crate::xai::{
    grad_cam, grad_cam_at, mean_image, render_overlay, shapley_csv, shapley_patches,
    SaliencySource,
};

#[derive(Parser)]
#[command(name = "mvit", version, about = "Mobile vision-transformer toolkit: train, ensemble, explain")]
struct Cli {
    /// Seed for all randomized steps (splits, init, shuffles, sampling).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic dataset of geometric motifs.
    Synth(SynthArgs),
    /// Index a class-per-folder tree and print the 64:16:20 split table.
    SplitAudit(SplitAuditArgs),
    /// Train a model preset on an image tree and save the best weights.
    Train(TrainArgs),
    /// Run a trained model over a split and write the prediction matrix.
    Predict(PredictArgs),
    /// Combine prediction matrices by averaging, weighting, or stacking.
    Ensemble(EnsembleArgs),
    /// Score a prediction matrix: per-class and macro metrics, AUC.
    Evaluate(EvaluateArgs),
    /// Render saliency overlays for one image with a trained model.
    Explain(ExplainArgs),
    /// Time softmax vs kernelized attention across token counts.
    BenchAttention(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset root (one folder per class).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    per_class: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SplitAuditArgs {
    /// Dataset root (root/<class>/<images>).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model preset: xs_toy or v2_toy.
    #[arg(long)]
    model: Option<String>,
    /// Where to save the best weights (default <model>.vtf).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional per-epoch history CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    factor: Option<f64>,
    #[arg(long)]
    min_delta: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    model: Option<String>,
    /// Which split of the (re-derived) 64:16:20 partition to score.
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    split: SplitName,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Average,
    Weighted,
    Stacked,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long, value_enum, default_value_t = Method::Average)]
    method: Method,
    #[arg(long)]
    out: PathBuf,
    /// Member weights for --method weighted (default: validation-accuracy
    /// proportional).
    #[arg(long, value_delimiter = ',')]
    member_weights: Option<Vec<f64>>,
    /// At least two prediction-matrix CSV files.
    #[arg(num_args = 2.., required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Prediction matrix CSV to score.
    #[arg(long)]
    predictions: PathBuf,
    /// Optional path for the text report (always printed to stdout).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Optional path for the confusion-matrix CSV.
    #[arg(long)]
    confusion: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExplainMethod {
    Cam,
    Shapley,
    Both,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    model: Option<String>,
    /// Dataset root; supplies class names and the mean-image baseline.
    /// Without it classes are numbered and the baseline is mid-gray.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Class to explain (default: the predicted class).
    #[arg(long)]
    class: Option<usize>,
    #[arg(long, value_enum, default_value_t = ExplainMethod::Both)]
    method: ExplainMethod,
    /// Stage name for the saliency map (default: last stage).
    #[arg(long)]
    layer: Option<String>,
    /// Attribution patch side in pixels (default: image_size / 8).
    #[arg(long)]
    patch_size: Option<usize>,
    /// Permutations for the attribution estimate.
    #[arg(long, default_value_t = 128)]
    samples: usize,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Also dump raw patch attributions as CSV.
    #[arg(long)]
    dump_csv: bool,
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// Token counts to measure.
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128, 256, 512, 1024])]
    sizes: Vec<usize>,
    /// Embedding width.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Heads for the softmax kernel.
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Repetitions per measurement (minimum is reported).
    #[arg(long, default_value_t = 3)]
    reps: usize,
}

/// Parse and dispatch. `args` excludes the program name.
pub fn run(args: &[String]) -> i32 {
    let argv = std::iter::once("mvit".to_string()).chain(args.iter().cloned());
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let file_cfg = match &cli.config {
        Some(path) => match load_config(path) {
            Ok(cfg) => cfg,
            Err(e) => {
                eprintln!("error: {e}");
                return 1;
            }
        },
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file_cfg.seed).unwrap_or(0);
    let outcome = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(&a, seed),
        Cmd::SplitAudit(a) => cmd_split_audit(&a, &file_cfg, seed),
        Cmd::Train(a) => cmd_train(&a, &file_cfg, seed),
        Cmd::Predict(a) => cmd_predict(&a, &file_cfg, seed),
        Cmd::Ensemble(a) => cmd_ensemble(&a),
        Cmd::Evaluate(a) => cmd_evaluate(&a),
        Cmd::Explain(a) => cmd_explain(&a, &file_cfg, seed),
        Cmd::BenchAttention(a) => cmd_bench(&a, seed),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn model_name(flag: &Option<String>, cfg: &FileConfig) -> String {
    flag.clone().or_else(|| cfg.model.clone()).unwrap_or_else(|| "xs_toy".to_string())
}

fn image_size(flag: Option<usize>, cfg: &FileConfig) -> usize {
    flag.or(cfg.image_size).unwrap_or(32)
}

fn default_batch(model: &str) -> usize {
    if model == "v2_toy" {
        32
    } else {
        64
    }
}

fn cmd_synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let spec = SyntheticSpec { classes: a.classes, per_class: a.per_class, size: a.size, seed };
    let summary = synthesize_dataset(&spec, &a.out, a.force)?;
    println!(
        "wrote {} images across {} classes under {}",
        summary.files_written,
        summary.class_names.len(),
        summary.root.display()
    );
    Ok(())
}

fn derive_splits(data: &Path, cfg: &FileConfig, seed: u64) -> Result<Splits> {
    let index = index_directory(data, &cfg.exclude_classes)?;
    split_index(&index, &SplitSpec { seed, ..Default::default() })
}

fn cmd_split_audit(a: &SplitAuditArgs, cfg: &FileConfig, seed: u64) -> Result<()> {
    let splits = derive_splits(&a.data, cfg, seed)?;
    print!("{}", render_audit(&splits));
    Ok(())
}

fn report_load(name: &str, loaded: &LoadedSplit) {
    if loaded.skipped > 0 {
        eprintln!("warning: {} undecodable files skipped in {} split", loaded.skipped, name);
    }
    if loaded.grayscale > 0 {
        eprintln!(
            "warning: {} grayscale images in {} split replicated to 3 channels",
            loaded.grayscale, name
        );
    }
}

fn cmd_train(a: &TrainArgs, cfg: &FileConfig, seed: u64) -> Result<()> {
    let name = model_name(&a.model, cfg);
    let size = image_size(a.image_size, cfg);
    let splits = derive_splits(&a.data, cfg, seed)?;
    let train_set = load_split(&splits.train, size)?;
    let val_set = load_split(&splits.val, size)?;
    report_load("train", &train_set);
    report_load("val", &val_set);
    let k = splits.class_names.len();
    let model = Model::new(preset(&name, k, size)?, seed)?;
    println!(
        "{}: {} classes, {} train / {} val images at {}x{}, {} trainable parameters",
        name,
        k,
        train_set.set.len(),
        val_set.set.len(),
        size,
        size,
        model.count_parameters().1
    );
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("{name}.vtf")));
    let plateau_default = PlateauConfig::default();
    let train_cfg = TrainConfig {
        lr: a.lr.or(cfg.lr).unwrap_or(0.001),
        weight_decay: a.weight_decay.or(cfg.weight_decay).unwrap_or(0.0001),
        batch_size: a.batch_size.or(cfg.batch_size).unwrap_or_else(|| default_batch(&name)),
        epochs: a.epochs.or(cfg.epochs).unwrap_or(50),
        seed,
        plateau: PlateauConfig {
            factor: a.factor.or(cfg.factor).unwrap_or(plateau_default.factor),
            patience: a.patience.or(cfg.patience).unwrap_or(plateau_default.patience),
            min_delta: a.min_delta.or(cfg.min_delta).unwrap_or(plateau_default.min_delta),
            min_lr: plateau_default.min_lr,
        },
        checkpoint_path: Some(out.clone()),
    };
    let mut print_epoch = |s: &crate::train::EpochStats| {
        println!(
            "epoch {:>3}  loss {:.4}  train acc {:.4}  val acc {:.4}  lr {:.6}",
            s.epoch, s.train_loss, s.train_acc, s.val_acc, s.lr
        );
        false
    };
    let result = train_with_callback(model, &train_set.set, &val_set.set, &train_cfg, Some(&mut print_epoch))?;
    save_weights(&result.model, &out)?;
    if let Some(hist) = &a.history {
        std::fs::write(hist, crate::train::history_csv(&result.history))?;
    }
    let best_epoch = result.best_epoch.map_or_else(|| "-".to_string(), |e| e.to_string());
    println!(
        "best val acc {:.4} at epoch {}; weights saved to {}",
        result.best_val_acc,
        best_epoch,
        out.display()
    );
    Ok(())
}

/// Infer the class count from stored head weights so a weights file is
/// self-describing.
fn classes_in_weights(path: &Path) -> Result<usize> {
    let stored = read_weights(path)?;
    stored
        .iter()
        .find(|(n, _)| n == "head.weight")
        .map(|(_, t)| t.shape()[0])
        .ok_or_else(|| Error::Weights(format!("{}: no classifier head found", path.display())))
}

fn load_model(name: &str, k: usize, size: usize, path: &Path) -> Result<Model> {
    let config: ModelConfig = preset(name, k, size)?;
    load_weights(&config, path).map_err(|e| match e {
        // a clean file that does not fit the preset: steer toward --model
        crate::error::Error::Weights(msg) if msg.contains("diverge") => {
            crate::error::Error::Weights(format!(
                "{msg}; the file was not saved from a '{name}' model, pass --model to pick the right preset"
            ))
        }
        other => other,
    })
}

fn predict_matrix(model: &Model, loaded: &LoadedSplit, batch: usize, tag: &str, class_names: &[String]) -> Result<PredictionMatrix> {
    let n = loaded.set.len();
    let k = model.config.num_classes;
    let mut rows = Vec::with_capacity(n * k);
    for chunk in (0..n).collect::<Vec<_>>().chunks(batch.max(1)) {
        let refs: Vec<&Tensor> = chunk.iter().map(|&i| &loaded.set.images[i]).collect();
        let batch_t = crate::train::stack_batch(&refs)?;
        let probs = model.predict_probs(&batch_t)?;
        rows.extend_from_slice(probs.data());
    }
    PredictionMatrix::new(
        tag.to_string(),
        class_names.to_vec(),
        loaded.paths.clone(),
        loaded.set.labels.clone(),
        Tensor::new(vec![n, k], rows)?,
    )
}

fn cmd_predict(a: &PredictArgs, cfg: &FileConfig, seed: u64) -> Result<()> {
    let name = model_name(&a.model, cfg);
    let size = image_size(a.image_size, cfg);
    let splits = derive_splits(&a.data, cfg, seed)?;
    let entries = match a.split {
        SplitName::Train => &splits.train,
        SplitName::Val => &splits.val,
        SplitName::Test => &splits.test,
    };
    let loaded = load_split(entries, size)?;
    report_load("scored", &loaded);
    let k = splits.class_names.len();
    let stored_k = classes_in_weights(&a.weights)?;
    if stored_k != k {
        return Err(Error::Weights(format!(
            "weights were trained for {} classes but the dataset has {}",
            stored_k, k
        )));
    }
    let model = load_model(&name, k, size, &a.weights)?;
    let batch = a.batch_size.or(cfg.batch_size).unwrap_or_else(|| default_batch(&name));
    let matrix = predict_matrix(&model, &loaded, batch, &name, &splits.class_names)?;
    write_prediction_csv(&matrix, &a.out)?;
    println!(
        "{} rows to {}; accuracy {:.4}",
        loaded.set.len(),
        a.out.display(),
        matrix.accuracy()?
    );
    Ok(())
}

fn cmd_ensemble(a: &EnsembleArgs) -> Result<()> {
    let mut mats: Vec<PredictionMatrix> = Vec::with_capacity(a.inputs.len());
    for path in &a.inputs {
        let expected = mats.first().map(|m: &PredictionMatrix| m.class_names.clone());
        mats.push(read_prediction_csv(path, expected.as_deref())?);
    }
    let refs: Vec<&PredictionMatrix> = mats.iter().collect();
    for (path, m) in a.inputs.iter().zip(&refs) {
        println!("member {} ({}): accuracy {:.4}", path.display(), m.tag, m.accuracy()?);
    }
    let combined = match a.method {
        Method::Average => average_ensemble(&refs)?,
        Method::Weighted => {
            let weights = match &a.member_weights {
                Some(w) => EnsembleWeights::new(w)?,
                None => {
                    let accs = refs.iter().map(|m| m.accuracy()).collect::<Result<Vec<_>>>()?;
                    accuracy_weights(&accs)?
                }
            };
            println!(
                "weights: {}",
                weights.values().iter().map(|w| format!("{w:.4}")).collect::<Vec<_>>().join(", ")
            );
            weighted_ensemble(&refs, &weights)?
        }
        Method::Stacked => {
            let meta = stacked_train(&refs, &StackedConfig::default())?;
            stacked_apply(&meta, &refs)?
        }
    };
    write_prediction_csv(&combined, &a.out)?;
    println!("ensemble ({:?}): accuracy {:.4} -> {}", a.method, combined.accuracy()?, a.out.display());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let matrix = read_prediction_csv(&a.predictions, None)?;
    let preds = matrix.argmax_rows();
    let report = metrics_report(&matrix.labels, &preds, Some(matrix.rows()), &matrix.class_names)?;
    let text = render_report(&report);
    print!("{text}");
    if let Some(path) = &a.report {
        std::fs::write(path, &text)?;
    }
    if let Some(path) = &a.confusion {
        std::fs::write(path, report.confusion.to_csv(&report.class_names))?;
    }
    Ok(())
}

fn cmd_explain(a: &ExplainArgs, cfg: &FileConfig, seed: u64) -> Result<()> {
    let name = model_name(&a.model, cfg);
    let size = image_size(a.image_size, cfg);
    let k = classes_in_weights(&a.weights)?;
    // Class names and baseline come from the dataset when provided.
    let mut class_names: Vec<String> = (0..k).map(|i| format!("class_{i}")).collect();
    let mut baseline = Tensor::full(&[3, size, size], 0.5);
    if let Some(data) = &a.data {
        let splits = derive_splits(data, cfg, seed)?;
        if splits.class_names.len() != k {
            return Err(Error::Weights(format!(
                "weights expect {} classes but {} has {}",
                k,
                data.display(),
                splits.class_names.len()
            )));
        }
        class_names = splits.class_names.clone();
        let train_set = load_split(&splits.train, size)?;
        baseline = mean_image(&train_set.set.images)?;
    }
    let model = load_model(&name, k, size, &a.weights)?;
    let (img_hwc, gray) = load_resize_image(&a.image, size, size)?;
    if gray {
        eprintln!("warning: grayscale input replicated to 3 channels");
    }
    let img = hwc_to_chw(&img_hwc)?;
    let probs = model.predict_probs(&img.reshape(&[1, 3, size, size])?)?;
    let predicted = crate::train::argmax_row(&probs, 0);
    let class = a.class.unwrap_or(predicted);
    if class >= k {
        return Err(Error::Invalid(format!("class {class} out of range for {k} classes")));
    }
    println!(
        "predicted {} (p={:.4}); explaining {} (p={:.4})",
        class_names[predicted],
        probs.at(&[0, predicted]),
        class_names[class],
        probs.at(&[0, class])
    );
    std::fs::create_dir_all(&a.out_dir)?;
    let stem = a
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".to_string());
    if matches!(a.method, ExplainMethod::Cam | ExplainMethod::Both) {
        let map = match &a.layer {
            Some(layer) => grad_cam_at(&model, &img, class, layer)?,
            None => grad_cam(&model, &img, class)?,
        };
        for ext in ["png", "ppm"] {
            let path = a.out_dir.join(format!("{stem}_cam.{ext}"));
            render_overlay(&img_hwc, SaliencySource::Heat(&map), &path)?;
            println!("saliency overlay ({}) -> {}", map.layer, path.display());
        }
    }
    if matches!(a.method, ExplainMethod::Shapley | ExplainMethod::Both) {
        let patch = a.patch_size.unwrap_or_else(|| (size / 8).max(1));
        let map = shapley_patches(&model, &img, class, patch, &baseline, a.samples, seed)?;
        for ext in ["png", "ppm"] {
            let path = a.out_dir.join(format!("{stem}_shap.{ext}"));
            render_overlay(&img_hwc, SaliencySource::Patches(&map), &path)?;
            println!(
                "attribution overlay ({} patches, {} permutations) -> {}",
                map.values.len(),
                map.permutations,
                path.display()
            );
        }
        if a.dump_csv {
            let path = a.out_dir.join(format!("{stem}_shap.csv"));
            std::fs::write(&path, shapley_csv(&map))?;
            println!("attribution values -> {}", path.display());
        }
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs, seed: u64) -> Result<()> {
    let rows = bench_attention(&a.sizes, a.dim, a.heads, a.reps, seed)?;
    print!("{}", render_bench_table(&rows)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> i32 {
        run(&args.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    #[test]
    fn usage_errors_exit_2_and_help_exits_0() {
        assert_eq!(run_args(&["no-such-command"]), 2);
        assert_eq!(run_args(&[]), 2);
        assert_eq!(run_args(&["--help"]), 0);
        assert_eq!(run_args(&["synth", "--help"]), 0);
        // Missing required flag.
        assert_eq!(run_args(&["synth"]), 2);
        // Fewer than two ensemble inputs.
        assert_eq!(run_args(&["ensemble", "--out", "x.csv", "only_one.csv"]), 2);
    }

    #[test]
    fn runtime_failures_exit_1() {
        assert_eq!(run_args(&["split-audit", "--data", "/no/such/dir"]), 1);
        assert_eq!(run_args(&["evaluate", "--predictions", "/no/such/file.csv"]), 1);
        assert_eq!(run_args(&["bench-attention", "--sizes", "16", "--dim", "9", "--heads", "2"]), 1);
        // Config parse failures surface before dispatch.
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.cfg");
        std::fs::write(&cfg, "bogus_key = 1").unwrap();
        assert_eq!(
            run_args(&["split-audit", "--data", "/tmp", "--config", cfg.to_str().unwrap()]),
            1
        );
    }

    #[test]
    fn synth_and_split_audit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        assert_eq!(
            run_args(&[
                "synth",
                "--out",
                out.to_str().unwrap(),
                "--classes",
                "2",
                "--per-class",
                "6",
                "--size",
                "16",
            ]),
            0
        );
        assert!(out.join("class_01_disk").join("img_0005.png").exists());
        // Second run without --force fails (exit 1), with --force passes.
        assert_eq!(
            run_args(&["synth", "--out", out.to_str().unwrap(), "--classes", "2", "--per-class", "6"]),
            1
        );
        assert_eq!(run_args(&["split-audit", "--data", out.to_str().unwrap()]), 0);
    }

    #[test]
    fn seed_resolution_prefers_flag_over_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.cfg");
        std::fs::write(&cfg_path, "seed = 5\nbatch_size = 16\n").unwrap();
        let cfg = load_config(&cfg_path).unwrap();
        assert_eq!(Some(5), cfg.seed);
        // The merge helpers pick flag > file > default.
        assert_eq!(model_name(&None, &cfg), "xs_toy");
        assert_eq!(model_name(&Some("v2_toy".into()), &cfg), "v2_toy");
        assert_eq!(image_size(None, &cfg), 32);
        assert_eq!(image_size(Some(16), &cfg), 16);
        assert_eq!(default_batch("xs_toy"), 64);
        assert_eq!(default_batch("v2_toy"), 32);
    }
}
