use std::path::PathBuf;

use anyhow::Result;
use moes_core::dataset::{write_dataset, Dataset};

use crate::config::RunConfig;
use crate::output::RunMeta;

pub fn run(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let meta = RunMeta::start("gen-data");
    let dir = out.unwrap_or_else(|| cfg.data_root());
    let data = Dataset::generate(&cfg.data.spec)?;
    write_dataset(&dir, &data)?;
    meta.finish(&dir, cfg)?;
    eprintln!(
        "wrote {} samples in {} categories to {}",
        data.len(),
        data.num_categories(),
        dir.display()
    );
    Ok(())
}
