use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::Args;
use moes_core::dataset::{Dataset, SaliencySample};
use moes_core::model::{checkpoint, ModelConfig, SaliencyModel};
use moes_core::optim::{log_csv, train, train_ensemble, EnsembleConfig, TrainOutcome};
use serde_json::json;

use super::{holdout, open_dataset};
use crate::config::RunConfig;
use crate::output::{create_dir, write, RunMeta};

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset directory (defaults to the configured data root).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Train the one-expert baseline: K=1 and no class loss.
    #[arg(long)]
    pub single_expert: bool,
    /// Train an averaging ensemble of this many single-expert networks.
    #[arg(long, value_name = "N")]
    pub ensemble: Option<usize>,
    /// Keep gating-branch parameters at their initial values.
    #[arg(long)]
    pub freeze_gating: bool,
}

/// Worker threads allowed by `MOES_THREADS`, or all cores when unset.
pub fn thread_cap() -> Result<usize> {
    match std::env::var("MOES_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(moes_core::Error::Config(format!("MOES_THREADS must be a positive integer, got {v:?}")).into()),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn check_compatible(model: &ModelConfig, data: &Dataset) -> Result<()> {
    let Some(s) = data.samples.first() else {
        return Err(moes_core::Error::Usage("dataset is empty".into()).into());
    };
    let shape = s.image.shape();
    let want = [model.input_channels, model.input_h, model.input_w];
    if shape != want {
        return Err(moes_core::Error::Config(format!(
            "dataset images are {shape:?} but the model expects {want:?}"
        ))
        .into());
    }
    if model.num_experts > 1 && data.num_categories() > model.num_experts {
        return Err(moes_core::Error::Config(format!(
            "dataset has {} categories but the model has only {} experts",
            data.num_categories(),
            model.num_experts
        ))
        .into());
    }
    Ok(())
}

fn save_run(dir: &Path, initial: &SaliencyModel, trained: &SaliencyModel, outcome: &TrainOutcome) -> Result<()> {
    create_dir(dir)?;
    checkpoint::save(initial, &dir.join("model.init"))?;
    checkpoint::save(trained, &dir.join("model.best"))?;
    let mut last = trained.clone();
    last.restore(&outcome.final_params)?;
    checkpoint::save(&last, &dir.join("model.last"))?;
    write(&dir.join("log.csv"), log_csv(&outcome.log))
}

fn outcome_json(o: &TrainOutcome) -> serde_json::Value {
    json!({
        "epochs": o.log.len(),
        "best_epoch": o.best_epoch,
        "best_val_loss": o.best_val_loss,
        "stop": format!("{:?}", o.stop),
    })
}

fn ids(samples: &[SaliencySample]) -> Vec<&str> {
    samples.iter().map(|s| s.id.as_str()).collect()
}

pub fn run(base: &RunConfig, out: Option<PathBuf>, args: &TrainArgs) -> Result<()> {
    let meta = RunMeta::start("train");
    let mut cfg = base.clone();
    if args.single_expert || args.ensemble.is_some() {
        cfg.model = cfg.model.single_expert();
    }
    if args.freeze_gating {
        cfg.train.freeze_gating = true;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    let data_root = args.data.clone().unwrap_or_else(|| cfg.data_root());
    let data = open_dataset(&data_root)?;
    check_compatible(&cfg.model, &data)?;
    let fold = holdout(&cfg, &data)?;
    let (train_set, val_set) = (data.select(&fold.train), data.select(&fold.val));
    let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    create_dir(&dir)?;

    let split = json!({
        "train": ids(&train_set),
        "val": ids(&val_set),
        "test": ids(&data.select(&fold.test)),
    });
    write(&dir.join("split.json"), serde_json::to_string_pretty(&split)? + "\n")?;

    let summary = match args.ensemble {
        None => {
            let mut model = SaliencyModel::build(&cfg.model, cfg.train.seed)?;
            let initial = model.clone();
            let outcome = train(&mut model, &train_set, &val_set, &cfg.train)?;
            save_run(&dir, &initial, &model, &outcome)?;
            eprintln!(
                "trained {} epochs, best epoch {} (val loss {:.6}), stop: {:?}",
                outcome.log.len(),
                outcome.best_epoch,
                outcome.best_val_loss,
                outcome.stop
            );
            outcome_json(&outcome)
        }
        Some(members) => {
            let ens = EnsembleConfig {
                members,
                subsample: cfg.ensemble.subsample,
                threads: thread_cap()?.min(members.max(1)),
            };
            let trained = train_ensemble(&cfg.model, &train_set, &val_set, &cfg.train, &ens)?;
            let mut log = String::from("member,epoch,train_loss,val_loss,val_class_acc,val_nss\n");
            let mut entries = Vec::new();
            for (m, member) in trained.iter().enumerate() {
                let initial = SaliencyModel::build(&cfg.model, member.seed)?;
                save_run(&dir.join(format!("member{m}")), &initial, &member.model, &member.outcome)?;
                for e in &member.outcome.log {
                    let _ = writeln!(
                        log,
                        "{m},{},{},{},{},{}",
                        e.epoch, e.train_loss, e.val_loss, e.val_class_acc, e.val_nss
                    );
                }
                let subset: Vec<&str> = member.subset.iter().map(|&i| train_set[i].id.as_str()).collect();
                let mut entry = outcome_json(&member.outcome);
                entry["seed"] = json!(member.seed);
                entry["checkpoint"] = json!(format!("member{m}/model.best"));
                entry["train_ids"] = json!(subset);
                entries.push(entry);
            }
            write(&dir.join("log.csv"), log)?;
            eprintln!("trained {members}-member ensemble");
            json!({ "members": entries })
        }
    };
    write(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    meta.finish(&dir, &cfg)
}
