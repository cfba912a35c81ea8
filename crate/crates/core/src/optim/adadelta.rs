use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub eps: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        Self { rho: 0.95, eps: 1e-6 }
    }
}

impl AdadeltaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config(format!("adadelta rho must lie in (0,1), got {}", self.rho)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config(format!("adadelta eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// One Adadelta update of a single scalar. Returns the applied step and
/// updates both running averages in place.
#[inline]
pub fn adadelta_update(g: f64, eg2: &mut f64, edx2: &mut f64, cfg: &AdadeltaConfig) -> f64 {
    *eg2 = cfg.rho * *eg2 + (1.0 - cfg.rho) * g * g;
    let dx = -((*edx2 + cfg.eps).sqrt() / (*eg2 + cfg.eps).sqrt()) * g;
    *edx2 = cfg.rho * *edx2 + (1.0 - cfg.rho) * dx * dx;
    dx
}

/// Adadelta state for every parameter of a graph, with a per-parameter freeze mask.
#[derive(Clone, Debug)]
pub struct Adadelta {
    cfg: AdadeltaConfig,
    eg2: Vec<Vec<f64>>,
    edx2: Vec<Vec<f64>>,
    frozen: Vec<bool>,
}

impl Adadelta {
    /// Zero-initialized accumulators shaped like the parameters of `graph`.
    pub fn new(graph: &Graph, cfg: AdadeltaConfig) -> Result<Self> {
        cfg.validate()?;
        let sizes: Vec<usize> = graph.params().iter().map(|p| p.value().numel()).collect();
        Ok(Self {
            cfg,
            eg2: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            edx2: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            frozen: vec![false; sizes.len()],
        })
    }

    /// Excludes a parameter from updates; its accumulators stay at zero.
    pub fn freeze(&mut self, id: ParamId) {
        self.frozen[id.index()] = true;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.index()]
    }

    pub fn accumulators(&self, id: ParamId) -> (&[f64], &[f64]) {
        (&self.eg2[id.index()], &self.edx2[id.index()])
    }

    /// Applies one step using the gradients stored on `graph`. Every gradient is
    /// checked first, so a non-finite value leaves parameters and state untouched.
    pub fn step(&mut self, graph: &mut Graph) -> Result<()> {
        let ids: Vec<ParamId> = graph.param_ids().collect();
        if ids.len() != self.eg2.len() {
            return Err(Error::usage("optimizer was built for a different parameter set"));
        }
        for &id in &ids {
            if self.frozen[id.index()] {
                continue;
            }
            if let Some(i) = graph.param_grad(id).iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {}[{i}] is {}",
                    graph.param(id).name(),
                    graph.param_grad(id)[i]
                )));
            }
        }
        for &id in &ids {
            let k = id.index();
            if self.frozen[k] {
                continue;
            }
            let grads = graph.param_grad(id).to_vec();
            let (eg2, edx2) = (&mut self.eg2[k], &mut self.edx2[k]);
            let x = graph.param_data_mut(id);
            for i in 0..grads.len() {
                x[i] += adadelta_update(grads[i], &mut eg2[i], &mut edx2[i], &self.cfg);
            }
        }
        Ok(())
    }
}
