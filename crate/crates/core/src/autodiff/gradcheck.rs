use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};

pub const MAX_EPSILON: f64 = 1e-2;

/// Gradients whose magnitudes are both below this are compared absolutely.
const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradError {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub params: Vec<ParamGradError>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    /// Parameters whose worst relative error exceeds the tolerance.
    pub fn flagged(&self) -> Vec<&ParamGradError> {
        self.params.iter().filter(|p| p.max_rel_err > self.tolerance).collect()
    }

    pub fn passed(&self) -> bool {
        self.flagged().is_empty()
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients with central differences
/// `(f(x + eps) - f(x - eps)) / 2 eps` for every scalar of every parameter.
///
/// `loss_fn` must record a scalar loss on the (reset) graph and return it;
/// it is called once for the analytic pass and twice per parameter scalar.
/// Parameter values and gradients are restored before returning.
pub fn grad_check<F>(graph: &mut Graph, epsilon: f64, tolerance: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph) -> Result<NodeId>,
{
    if !(epsilon > 0.0 && epsilon <= MAX_EPSILON) {
        return Err(Error::config(format!("grad_check epsilon must lie in (0, {MAX_EPSILON}], got {epsilon}")));
    }
    let saved_grads: Vec<Vec<f64>> = graph.param_ids().map(|p| graph.param_grad(p).to_vec()).collect();

    graph.reset();
    graph.zero_grad();
    let loss = loss_fn(graph)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = graph.param_ids().map(|p| graph.param_grad(p).to_vec()).collect();

    let mut eval = |graph: &mut Graph| -> Result<f64> {
        graph.reset();
        let l = loss_fn(graph)?;
        Ok(graph.value(l).item())
    };

    let ids: Vec<_> = graph.param_ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for (pi, &id) in ids.iter().enumerate() {
        let mut worst = ParamGradError {
            name: graph.param(id).name().to_string(),
            numel: graph.param_value(id).numel(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: analytic[pi].first().copied().unwrap_or(0.0),
            numeric: 0.0,
        };
        for i in 0..worst.numel {
            let orig = graph.param_value(id).data()[i];
            graph.param_data_mut(id)[i] = orig + epsilon;
            let plus = eval(graph)?;
            graph.param_data_mut(id)[i] = orig - epsilon;
            let minus = eval(graph)?;
            graph.param_data_mut(id)[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(analytic[pi][i], numeric);
            if err > worst.max_rel_err || i == 0 {
                worst.max_rel_err = err;
                worst.worst_index = i;
                worst.analytic = analytic[pi][i];
                worst.numeric = numeric;
            }
        }
        params.push(worst);
    }

    graph.reset();
    for (&id, g) in ids.iter().zip(&saved_grads) {
        graph.set_param_grad(id, g);
    }
    Ok(GradCheckReport {
        epsilon,
        tolerance,
        params,
    })
}
