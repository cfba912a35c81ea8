pub mod eval;
pub mod gen_data;
pub mod gradcheck;
pub mod predict;
pub mod train;

use std::path::Path;

use anyhow::Result;
use moes_core::dataset::{load_dataset, split_holdout, Dataset, Fold, SaliencySample};
use moes_core::model::{checkpoint, SaliencyModel};

use crate::config::RunConfig;

/// Loads the dataset at `root`, reporting a missing manifest as a usage error.
pub fn open_dataset(root: &Path) -> Result<Dataset> {
    if !root.join(moes_core::dataset::MANIFEST_FILE).is_file() {
        return Err(moes_core::Error::Usage(format!("no dataset at {} (run gen-data first)", root.display())).into());
    }
    Ok(load_dataset(root)?)
}

/// Train/val/test split of `data` determined by the configuration.
pub fn holdout(cfg: &RunConfig, data: &Dataset) -> Result<Fold> {
    Ok(split_holdout(
        &data.categories(),
        cfg.data.val_per_category,
        cfg.data.test_per_category,
        cfg.train.seed,
    )?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Subset {
    Train,
    Val,
    Test,
    All,
}

pub fn select(cfg: &RunConfig, data: &Dataset, subset: Subset) -> Result<Vec<SaliencySample>> {
    if subset == Subset::All {
        return Ok(data.samples.clone());
    }
    let fold = holdout(cfg, data)?;
    Ok(data.select(match subset {
        Subset::Train => &fold.train,
        Subset::Val => &fold.val,
        _ => &fold.test,
    }))
}

pub fn load_checkpoints(paths: &[std::path::PathBuf]) -> Result<Vec<SaliencyModel>> {
    if paths.is_empty() {
        return Err(moes_core::Error::Usage("at least one --checkpoint is required".into()).into());
    }
    let models = paths.iter().map(|p| checkpoint::load(p)).collect::<moes_core::Result<Vec<_>>>()?;
    let first = models[0].config();
    if models.iter().any(|m| m.config().input_h != first.input_h || m.config().input_w != first.input_w || m.output_size() != models[0].output_size()) {
        return Err(moes_core::Error::Usage("checkpoints disagree on input or output resolution".into()).into());
    }
    Ok(models)
}
