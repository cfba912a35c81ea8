use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use moes_core::dataset::io::{read_image, write_image, write_pfm};
use moes_core::model::SaliencyModel;
use moes_core::optim::average_maps;
use moes_core::Tensor;

use super::load_checkpoints;
use crate::config::RunConfig;
use crate::output::{create_dir, write, RunMeta};

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    /// Model checkpoint; repeat to average an ensemble.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    /// PGM or PPM images matching the model's input resolution.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

/// Maps and mean gate weights of the members on a batch of images.
pub struct EnsembleOutput {
    /// `[N,1,h,w]` mean of the members' raw saliency maps.
    pub saliency: Tensor,
    /// `[N,K]` mean of the members' mixing weights.
    pub gates: Tensor,
    /// `[N,K]` mean of the members' class probabilities.
    pub class_probs: Tensor,
}

pub fn predict_members(models: &mut [SaliencyModel], images: &Tensor) -> Result<EnsembleOutput> {
    let preds = models.iter_mut().map(|m| m.predict(images)).collect::<moes_core::Result<Vec<_>>>()?;
    let pick = |f: fn(&moes_core::model::Prediction) -> &Tensor| -> Result<Tensor> {
        Ok(average_maps(&preds.iter().map(|p| f(p).clone()).collect::<Vec<_>>())?)
    };
    Ok(EnsembleOutput {
        saliency: pick(|p| &p.saliency)?,
        gates: pick(|p| &p.gate_probs_tau)?,
        class_probs: pick(|p| &p.gate_probs_1)?,
    })
}

/// Min-max normalized 8-bit preview of a `[1,h,w]` map.
pub fn preview(map: &Tensor) -> Tensor {
    let (lo, hi) = (map.min(), map.max());
    let span = hi - lo;
    map.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
}

pub fn run(cfg: &RunConfig, out: Option<PathBuf>, args: &PredictArgs) -> Result<()> {
    let meta = RunMeta::start("predict");
    let mut models = load_checkpoints(&args.checkpoint)?;
    let mc = models[0].config().clone();
    let want = [mc.input_channels, mc.input_h, mc.input_w];
    let mut stems = BTreeSet::new();
    let mut images = Vec::with_capacity(args.images.len());
    for path in &args.images {
        let img = read_image(path)?;
        if img.shape() != want {
            return Err(moes_core::Error::Usage(format!(
                "{} is {:?} but the model expects {want:?}",
                path.display(),
                img.shape()
            ))
            .into());
        }
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if !stems.insert(stem.clone()) {
            return Err(moes_core::Error::Usage(format!("two input images share the name {stem:?}")).into());
        }
        images.push((stem, img));
    }
    let dir = out.unwrap_or_else(|| cfg.output_dir.join("predict"));
    create_dir(&dir)?;

    let k = models.iter().map(|m| m.num_experts()).max().unwrap_or(1);
    let mut gates_csv = String::from("image");
    for j in 0..k {
        let _ = write!(gates_csv, ",gate_{j}");
    }
    gates_csv.push('\n');
    for (stem, img) in &images {
        let batch = Tensor::stack(std::slice::from_ref(img))?;
        let pred = predict_members(&mut models, &batch)?;
        let map = pred.saliency.index_outer(0);
        write_pfm(&dir.join(format!("{stem}.pfm")), &map)?;
        write_image(&dir.join(format!("{stem}.pgm")), &preview(&map))?;
        let _ = write!(gates_csv, "{stem}");
        for g in pred.gates.data() {
            let _ = write!(gates_csv, ",{g}");
        }
        gates_csv.push('\n');
    }
    write(&dir.join("gates.csv"), gates_csv)?;
    meta.finish(&dir, cfg)?;
    eprintln!("wrote {} maps to {}", images.len(), dir.display());
    Ok(())
}
