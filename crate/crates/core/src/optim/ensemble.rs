use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::train::{train, TrainConfig, TrainOutcome};
use crate::dataset::SaliencySample;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SaliencyModel};
use crate::tensor::Tensor;

/// Random stream used to draw member subsets.
const SUBSET_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub members: usize,
    /// Fraction of the training set each member sees.
    pub subsample: f64,
    /// Worker threads; members are distributed round-robin.
    pub threads: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: 5,
            subsample: 0.8,
            threads: 1,
        }
    }
}

/// Seed of ensemble member `m`. Member 0 reuses the base seed so a
/// one-member ensemble equals plain training.
pub fn member_seed(seed: u64, m: usize) -> u64 {
    seed.wrapping_add((m as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Sorted indices of the `floor(subsample * n)` training samples member `m` sees.
pub fn member_subset(n: usize, subsample: f64, seed: u64, m: usize) -> Result<Vec<usize>> {
    if !(subsample > 0.0 && subsample <= 1.0) {
        return Err(Error::config(format!("subsample must lie in (0,1], got {subsample}")));
    }
    let take = (subsample * n as f64).floor() as usize;
    if take == 0 {
        return Err(Error::config(format!("subsample {subsample} of {n} samples leaves an empty subset")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(member_seed(seed, m));
    rng.set_stream(SUBSET_STREAM);
    let mut idx = rand::seq::index::sample(&mut rng, n, take).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub struct Member {
    pub model: SaliencyModel,
    pub outcome: TrainOutcome,
    pub subset: Vec<usize>,
    pub seed: u64,
}

/// Trains independent members on random subsets. Member `m` is initialized
/// and trained with `member_seed(train_cfg.seed, m)`; results do not depend
/// on the thread count.
pub fn train_ensemble(
    model_cfg: &ModelConfig,
    train_set: &[SaliencySample],
    val_set: &[SaliencySample],
    train_cfg: &TrainConfig,
    ens: &EnsembleConfig,
) -> Result<Vec<Member>> {
    if ens.members == 0 {
        return Err(Error::config("an ensemble needs at least one member"));
    }
    model_cfg.validate()?;
    train_cfg.validate()?;
    let subsets = (0..ens.members)
        .map(|m| member_subset(train_set.len(), ens.subsample, train_cfg.seed, m))
        .collect::<Result<Vec<_>>>()?;
    let run = |m: usize| -> Result<Member> {
        let seed = member_seed(train_cfg.seed, m);
        let subset: Vec<SaliencySample> = subsets[m].iter().map(|&i| train_set[i].clone()).collect();
        let mut model = SaliencyModel::build(model_cfg, seed)?;
        let cfg = TrainConfig { seed, ..train_cfg.clone() };
        let outcome = train(&mut model, &subset, val_set, &cfg)?;
        Ok(Member {
            model,
            outcome,
            subset: subsets[m].clone(),
            seed,
        })
    };
    let threads = ens.threads.clamp(1, ens.members);
    let mut slots: Vec<Option<Result<Member>>> = (0..ens.members).map(|_| None).collect();
    if threads == 1 {
        for (m, slot) in slots.iter_mut().enumerate() {
            *slot = Some(run(m));
        }
    } else {
        let results = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let run = &run;
                    s.spawn(move || (t..ens.members).step_by(threads).map(|m| (m, run(m))).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("ensemble worker panicked"))
                .collect::<Vec<_>>()
        });
        for (m, r) in results {
            slots[m] = Some(r);
        }
    }
    slots.into_iter().map(|s| s.expect("every member ran")).collect()
}

/// Mean of the members' raw saliency maps `[N,1,h,w]`.
pub fn ensemble_predict(members: &mut [SaliencyModel], images: &Tensor) -> Result<Tensor> {
    let maps = members
        .iter_mut()
        .map(|m| Ok(m.predict(images)?.saliency))
        .collect::<Result<Vec<_>>>()?;
    average_maps(&maps)
}

/// Element-wise mean of equally shaped tensors.
pub fn average_maps(maps: &[Tensor]) -> Result<Tensor> {
    let first = maps.first().ok_or_else(|| Error::usage("cannot average an empty ensemble"))?;
    let mut acc = vec![0.0; first.numel()];
    for m in maps {
        if m.shape() != first.shape() {
            return Err(Error::usage("ensemble members disagree on output shape"));
        }
        for (a, v) in acc.iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    Tensor::new(first.shape(), acc.into_iter().map(|v| v / n).collect())
}
