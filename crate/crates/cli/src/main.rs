//! `bootsemi`: generate synthetic data, pretrain with BYOL, self-train with
//! pseudo-labels, evaluate, and grid-search the pretraining schedule.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use bootsemi_core::data::{self, DatasetBundle};
use bootsemi_core::grid::{grid_search, scores_to_csv};
use bootsemi_core::io::{load_checkpoint, load_labels, load_tensor, save_checkpoint, Checkpoint};
use bootsemi_core::model::Component;
use bootsemi_core::pipeline::{evaluate, self_train, EvalReport};
use bootsemi_core::{pretrain, Error, ExperimentConfig, LabeledSet, ParamSet, Result, Tensor};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "bootsemi", version, about = "BYOL pretraining and pseudo-label self-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (falls back to `out_dir` in the config, then `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded, fixed-order execution. Runs are always reproducible;
    /// the flag is recorded in summaries.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset and write its splits.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// BYOL pretraining on every training image.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (defaults to the output directory).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fine-tune a pretrained checkpoint with rounds of pseudo-labeling.
    Selftrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a classifier checkpoint on a labeled image set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Sweep pretraining epochs × learning rate, then the pseudo-label count.
    Gridsearch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    write(path, text)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Labeled and unlabeled training images together; labels are never read.
fn pretrain_pool(bundle: &DatasetBundle) -> Result<Tensor> {
    match &bundle.unlabeled {
        Some(u) => Tensor::concat_rows(&[&bundle.labeled.images, u]),
        None => Ok(bundle.labeled.images.clone()),
    }
}

fn cmd_synth(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common, &cfg)?;
    let bundle = data::synth_generate(&cfg.data)?;
    let written = data::save_bundle(&dir, &bundle)?;
    let mut entries = Vec::new();
    for name in written {
        let path = dir.join(name);
        let count = if name.ends_with(".lbls") {
            load_labels(&path)?.len()
        } else {
            load_tensor(&path)?.rows()
        };
        entries.push(json!({ "name": name, "count": count, "sha256": sha256_file(&path)? }));
    }
    let count = entries.len();
    let manifest = json!({
        "num_classes": bundle.num_classes,
        "image_size": cfg.data.image_size,
        "seed": cfg.data.seed(),
        "files": entries,
    });
    write_json(&dir.join("manifest.json"), &manifest)?;
    println!("wrote {count} dataset files to {}", dir.display());
    Ok(())
}

fn cmd_pretrain(common: &Common, data_dir: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common, &cfg)?;
    let bundle = data::load_bundle(data_dir.unwrap_or(&dir), cfg.data.num_classes)?;
    let pool = pretrain_pool(&bundle)?;
    let result = pretrain(&pool, &cfg.model, &cfg.pretrain, &cfg.augment)?;
    let ckpt = Checkpoint {
        online: result.state.online.clone(),
        target: Some(result.state.target.clone()),
    };
    save_checkpoint(dir.join("pretrain.ckpt"), &ckpt)?;
    write(&dir.join("pretrain_loss.csv"), result.trace.to_csv())?;
    match result.trace.entries.last() {
        Some(last) => println!("pretrained {} steps, final loss {:.6}", result.trace.len(), last.loss),
        None => println!("pretrained 0 steps"),
    }
    Ok(())
}

fn rounds_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("round,split,accuracy\n");
    for (r, report) in reports.iter().enumerate() {
        out.push_str(&format!("{r},val,{}\n", report.accuracy));
    }
    out
}

fn cmd_selftrain(common: &Common, checkpoint: &Path, data_dir: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common, &cfg)?;
    let pretrained = load_checkpoint(checkpoint)?.online;
    let bundle = data::load_bundle(data_dir.unwrap_or(&dir), cfg.data.num_classes)?;
    let outcome = self_train(
        &pretrained,
        &cfg.model,
        &bundle.labeled,
        bundle.unlabeled.as_ref(),
        &bundle.val,
        &cfg.finetune,
    )?;
    let test = evaluate(&outcome.best, &bundle.test)?;
    save_checkpoint(
        dir.join("best_model.ckpt"),
        &Checkpoint {
            online: outcome.best.clone(),
            target: None,
        },
    )?;
    write(&dir.join("rounds.csv"), rounds_csv(&outcome.reports))?;
    let summary = json!({
        "best_round": outcome.best_round,
        "accuracy": outcome.reports[outcome.best_round].accuracy,
        "test_accuracy": test.accuracy,
        "rounds": outcome.reports.len(),
        "deterministic": common.deterministic,
        "config": cfg,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "best round {} val accuracy {:.4} test accuracy {:.4}",
        outcome.best_round, outcome.reports[outcome.best_round].accuracy, test.accuracy
    );
    Ok(())
}

/// Number of classes emitted by the head of a classifier checkpoint.
fn head_classes(params: &ParamSet) -> Result<usize> {
    let layers = params.num_layers(Component::Head);
    if layers == 0 {
        return Err(Error::Contract("checkpoint has no classification head".into()));
    }
    let w = params
        .get(&Component::Head.weight_name(layers - 1))
        .ok_or_else(|| Error::Contract("checkpoint head is incomplete".into()))?;
    Ok(w.shape()[1])
}

fn cmd_eval(common: &Common, checkpoint: &Path, images: &Path, labels: &Path) -> Result<()> {
    let params = load_checkpoint(checkpoint)?.online;
    let set = LabeledSet::new(load_tensor(images)?, load_labels(labels)?, head_classes(&params)?)?;
    let report = evaluate(&params, &set)?;
    let value = serde_json::to_value(&report).expect("report serializes");
    println!("{}", serde_json::to_string_pretty(&value).expect("json serializes"));
    if common.out.is_some() {
        let cfg = ExperimentConfig::default();
        let dir = out_dir(common, &cfg)?;
        write_json(&dir.join("eval.json"), &value)?;
    }
    Ok(())
}

fn cmd_gridsearch(common: &Common, data_dir: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common, &cfg)?;
    let bundle = data::load_bundle(data_dir.unwrap_or(&dir), cfg.data.num_classes)?;
    let pool = pretrain_pool(&bundle)?;
    let mut timings: Vec<(usize, f64, usize, f64)> = Vec::new();
    let outcome = grid_search(&cfg.grid, cfg.finetune.pseudo_k, |epochs, eta, k| {
        let start = Instant::now();
        let mut pcfg = cfg.pretrain.clone();
        pcfg.epochs = epochs;
        pcfg.eta = eta;
        let pretrained = pretrain(&pool, &cfg.model, &pcfg, &cfg.augment)?;
        let mut fcfg = cfg.finetune.clone();
        fcfg.pseudo_k = k;
        let out = self_train(
            pretrained.online(),
            &cfg.model,
            &bundle.labeled,
            bundle.unlabeled.as_ref(),
            &bundle.val,
            &fcfg,
        )?;
        timings.push((epochs, eta, k, start.elapsed().as_secs_f64()));
        Ok(out.reports[out.best_round].accuracy)
    })?;

    write(
        &dir.join("grid.csv"),
        scores_to_csv(&cfg.grid.epochs_list, &cfg.grid.eta_list, &outcome.scores),
    )?;
    let mut pseudo = String::from("pseudo_k,accuracy\n");
    for (k, acc) in &outcome.pseudo_scores {
        pseudo.push_str(&format!("{k},{acc}\n"));
    }
    write(&dir.join("grid_pseudo.csv"), pseudo)?;
    // Wall-clock lives apart from the scores so the score files stay reproducible.
    let mut timing = String::from("epochs,eta,pseudo_k,seconds\n");
    for (e, eta, k, s) in &timings {
        timing.push_str(&format!("{e},{eta},{k},{s:.3}\n"));
    }
    write(&dir.join("grid_timing.csv"), timing)?;
    write_json(
        &dir.join("grid_best.json"),
        &json!({
            "epochs": outcome.cell.epochs,
            "eta": outcome.cell.eta,
            "accuracy": outcome.cell.accuracy,
            "pseudo_k": outcome.best_k,
            "pseudo_k_accuracy": outcome.best_accuracy,
        }),
    )?;
    println!(
        "best cell epochs={} eta={} accuracy={:.4}; best pseudo_k={} accuracy={:.4}",
        outcome.cell.epochs, outcome.cell.eta, outcome.cell.accuracy, outcome.best_k, outcome.best_accuracy
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { common } => cmd_synth(common),
        Command::Pretrain { common, data } => cmd_pretrain(common, data.as_deref()),
        Command::Selftrain { common, checkpoint, data } => cmd_selftrain(common, checkpoint, data.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            images,
            labels,
        } => cmd_eval(common, checkpoint, images, labels),
        Command::Gridsearch { common, data } => cmd_gridsearch(common, data.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn rounds_csv_layout() {
        let r = |a| EvalReport {
            accuracy: a,
            per_class_accuracy: vec![],
            confusion: vec![],
        };
        assert_eq!(rounds_csv(&[r(0.5), r(0.75)]), "round,split,accuracy\n0,val,0.5\n1,val,0.75\n");
    }
}
