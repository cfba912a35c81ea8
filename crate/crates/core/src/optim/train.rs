use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adadelta::{Adadelta, AdadeltaConfig};
use super::augment::hflip_augment;
use crate::dataset::SaliencySample;
use crate::error::{Error, Result};
use crate::metrics::nss;
use crate::model::{total_loss, LossWeights, ParamGroup, SaliencyModel};
use crate::tensor::Tensor;

/// Random stream for shuffling and flips, kept apart from weight init on the
/// same seed.
pub const TRAIN_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Epochs without a strict validation improvement before stopping.
    pub patience: usize,
    pub flip_prob: f64,
    pub max_epochs: usize,
    /// Seeds epoch shuffling and flip selection.
    pub seed: u64,
    /// Keep gating-branch parameters fixed.
    pub freeze_gating: bool,
    pub adadelta: AdadeltaConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            patience: 10,
            flip_prob: 0.5,
            max_epochs: 100,
            seed: 0,
            freeze_gating: false,
            adadelta: AdadeltaConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config(format!("flip_prob must lie in [0,1], got {}", self.flip_prob)));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be at least 1"));
        }
        self.adadelta.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_class_acc: f64,
    pub val_nss: f64,
}

/// `epoch,train_loss,val_loss,val_class_acc,val_nss`
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_class_acc,val_nss\n");
    for e in log {
        let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.val_class_acc, e.val_nss);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    Patience,
    /// A non-finite loss or gradient; the best parameters so far were restored.
    Diverged,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose parameters the model holds on return (0 if none).
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop: StopReason,
    /// Parameters when training ended, before the best epoch was restored.
    pub final_params: Vec<Vec<f64>>,
}

/// Patience-based stopping on a validation loss. An epoch improves only if
/// its loss is strictly below the best so far.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    streak: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            streak: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> StopDecision {
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.streak = 0;
        } else {
            self.streak += 1;
        }
        StopDecision {
            improved,
            stop: !improved && self.streak >= self.patience,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Stacked inputs and targets for one mini-batch.
pub struct Batch {
    pub images: Tensor,
    /// Densities block-averaged to the model output and re-normalized to max 1.
    pub targets: Tensor,
    pub classes: Vec<usize>,
}

/// Ground truth at the model's output resolution: the density averaged over
/// `factor x factor` blocks, then divided by its maximum.
pub fn loss_target(density: &Tensor, out_hw: (usize, usize)) -> Result<Tensor> {
    let s = density.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h % out_hw.0 != 0 || w % out_hw.1 != 0 || h / out_hw.0 != w / out_hw.1 {
        return Err(Error::usage(format!(
            "density {h}x{w} is not an integer multiple of the {}x{} output",
            out_hw.0, out_hw.1
        )));
    }
    let pooled = density.avg_pool(h / out_hw.0)?;
    let max = pooled.max();
    if max > 0.0 {
        Ok(pooled.map(|v| v / max))
    } else {
        Ok(pooled)
    }
}

impl Batch {
    pub fn assemble(samples: &[SaliencySample], model: &SaliencyModel) -> Result<Self> {
        let k = model.num_experts();
        let out = model.output_size();
        let images = Tensor::stack(&samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let targets = samples
            .iter()
            .map(|s| loss_target(&s.density, out))
            .collect::<Result<Vec<_>>>()?;
        let classes = samples
            .iter()
            .map(|s| match k {
                1 => Ok(0),
                _ if s.category < k => Ok(s.category),
                _ => Err(Error::config(format!(
                    "sample {} has category {} but the model has {k} experts",
                    s.id, s.category
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            images,
            targets: Tensor::stack(&targets)?,
            classes,
        })
    }
}

/// Validation statistics of a model on a sample set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub class_acc: f64,
    pub nss: f64,
}

/// Total loss, gate classification accuracy and mean NSS over `samples`,
/// processed in chunks of `batch_size` without augmentation.
pub fn evaluate_model(model: &mut SaliencyModel, samples: &[SaliencySample], batch_size: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::usage("cannot evaluate on an empty set"));
    }
    let weights = LossWeights::from_config(model.config());
    let (mut loss, mut correct, mut nss_sum) = (0.0, 0usize, 0.0);
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = Batch::assemble(chunk, model)?;
        let out = model.forward(&batch.images)?;
        let l = total_loss(model.graph_mut(), &out, &batch.targets, &batch.classes, &weights)?;
        loss += l.values(model.graph()).total * chunk.len() as f64;
        let pred = model.collect(&out);
        let k = model.num_experts();
        for (i, s) in chunk.iter().enumerate() {
            let row = &pred.gate_probs_1.data()[i * k..(i + 1) * k];
            let arg = (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            if arg == batch.classes[i] {
                correct += 1;
            }
            let map = pred.saliency_clamped().index_outer(i);
            let dims = s.fixations.shape();
            let up = map.upsample_bilinear(dims[1], dims[2])?;
            nss_sum += nss(up.data(), s.fixations.data())?.value;
        }
        model.graph_mut().reset();
    }
    let n = samples.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        class_acc: correct as f64 / n,
        nss: nss_sum / n,
    })
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Mini-batch Adadelta training with per-epoch validation and early stopping.
/// On return the model holds the parameters of the best validation epoch.
pub fn train(model: &mut SaliencyModel, train_set: &[SaliencySample], val_set: &[SaliencySample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::config("training and validation sets must be nonempty"));
    }
    let mut opt = Adadelta::new(model.graph(), cfg.adadelta)?;
    if cfg.freeze_gating {
        for id in model.params_in_group(ParamGroup::Gating) {
            opt.freeze(id);
        }
    }
    let weights = LossWeights::from_config(model.config());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut stopping = EarlyStopping::new(cfg.patience);
    let mut best = model.snapshot();
    let mut best_epoch = 0;
    let mut log = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let order = shuffled(train_set.len(), &mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let picked: Vec<SaliencySample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let augmented = hflip_augment(&picked, cfg.flip_prob, &mut rng);
            let batch = Batch::assemble(&augmented, model)?;
            let out = model.forward(&batch.images)?;
            let l = total_loss(model.graph_mut(), &out, &batch.targets, &batch.classes, &weights)?;
            let value = model.graph().value(l.total).item();
            if !value.is_finite() {
                stop = StopReason::Diverged;
                break 'epochs;
            }
            loss_sum += value * chunk.len() as f64;
            model.graph_mut().zero_grad();
            model.graph_mut().backward(l.total)?;
            match opt.step(model.graph_mut()) {
                Ok(()) => {}
                Err(Error::NonFinite(_)) => {
                    stop = StopReason::Diverged;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let val = evaluate_model(model, val_set, cfg.batch_size)?;
        if !val.loss.is_finite() {
            stop = StopReason::Diverged;
            break;
        }
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss: val.loss,
            val_class_acc: val.class_acc,
            val_nss: val.nss,
        });
        let decision = stopping.observe(val.loss);
        if decision.improved {
            best = model.snapshot();
            best_epoch = epoch;
        }
        if decision.stop {
            stop = StopReason::Patience;
            break;
        }
    }
    let final_params = model.snapshot();
    model.restore(&best)?;
    model.graph_mut().zero_grad();
    Ok(TrainOutcome {
        final_params,
        log,
        best_epoch,
        best_val_loss: stopping.best(),
        stop,
    })
}
