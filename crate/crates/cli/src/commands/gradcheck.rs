use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use moes_core::autodiff::GradCheckReport;
use moes_core::model::{ModelConfig, SaliencyModel};
use moes_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::output::{create_dir, write, RunMeta};
use crate::CheckFailed;

/// Step sizes reported; the verdict uses `VERDICT_EPSILON`.
pub const EPSILONS: [f64; 3] = [1e-3, 1e-4, 1e-5];
pub const VERDICT_EPSILON: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
const BATCH: usize = 2;

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Negative control: scale the gradient of this parameter on backward.
    #[arg(long, hide = true, value_name = "PARAM")]
    pub inject_fault: Option<String>,
    #[arg(long, hide = true, default_value_t = 1.5)]
    pub fault_factor: f64,
}

/// The miniature topology carrying the configured loss weights and temperature.
pub fn probe_config(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig {
        tau: cfg.tau,
        lambda_s: cfg.lambda_s,
        lambda_c: cfg.lambda_c,
        lambda_cb: cfg.lambda_cb,
        alpha: cfg.alpha,
        ..ModelConfig::miniature()
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n = shape.iter().product();
    Ok(Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())?)
}

/// Parameter-name prefix: `trunk`, `expert0`, `gating`, `center_bias`, ...
pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

pub fn worst_by_group(report: &GradCheckReport) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for p in &report.params {
        let e = out.entry(group_of(&p.name).to_string()).or_insert(0.0f64);
        *e = e.max(p.max_rel_err);
    }
    out
}

pub fn run(cfg: &RunConfig, out: Option<PathBuf>, args: &GradcheckArgs) -> Result<()> {
    let meta = RunMeta::start("gradcheck");
    let mc = probe_config(&cfg.model);
    let seed = cfg.train.seed;
    let mut model = SaliencyModel::build(&mc, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    // Move the center bias off its all-ones start so its gradient is generic.
    let cb = model.center_bias_param();
    for v in model.graph_mut().param_data_mut(cb) {
        *v = rng.random_range(0.5..1.5);
    }
    let images = uniform(&[BATCH, mc.input_channels, mc.input_h, mc.input_w], 0.0, 1.0, &mut rng)?;
    let (h, w) = model.output_size();
    let target = uniform(&[BATCH, 1, h, w], 0.0, 1.0, &mut rng)?;
    let classes: Vec<usize> = (0..BATCH).map(|i| i % mc.num_experts).collect();
    if let Some(name) = &args.inject_fault {
        let id = model
            .graph()
            .find_param(name)
            .ok_or_else(|| moes_core::Error::Usage(format!("no parameter named {name:?}")))?;
        model.graph_mut().inject_gradient_fault(id, args.fault_factor);
    }

    let mut csv = String::from("epsilon,group,max_rel_err\n");
    let mut verdict = None;
    println!("{:<10} {:<14} {:>14}", "epsilon", "group", "max rel err");
    for &eps in &EPSILONS {
        let report = model.grad_check(&images, &target, &classes, eps, TOLERANCE)?;
        for (group, err) in worst_by_group(&report) {
            println!("{eps:<10e} {group:<14} {err:>14.3e}");
            let _ = writeln!(csv, "{eps:e},{group},{err:e}");
        }
        if eps == VERDICT_EPSILON {
            verdict = Some(report);
        }
    }
    let report = verdict.expect("verdict epsilon is in the sweep");
    let worst = report.max_rel_err();
    println!("max relative error at epsilon {VERDICT_EPSILON:e}: {worst:.3e} (tolerance {TOLERANCE:e})");

    let dir = out.unwrap_or_else(|| cfg.output_dir.join("gradcheck"));
    create_dir(&dir)?;
    write(&dir.join("gradcheck.csv"), csv)?;
    meta.finish(&dir, cfg)?;
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.flagged().iter().map(|p| p.name.as_str()).collect();
        Err(CheckFailed(format!("gradient check failed for {}", names.join(", "))).into())
    }
}
