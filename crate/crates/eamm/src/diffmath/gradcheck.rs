//! Central finite-difference gradient checking.

use super::{DiffError, Graph, NodeId, Tensor};

/// One element whose analytic and numeric gradients disagree.
#[derive(Clone, Debug)]
pub struct GradCheckFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Result of a gradient check over one graph-building function.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checks: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checks += other.checks;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.failures.extend(other.failures);
    }
}

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely.
fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Compares reverse-mode gradients against central finite differences
/// `(f(theta+eps) - f(theta-eps)) / (2 eps)` for every element of every
/// parameter. `build` must produce a scalar node from the given parameter
/// leaves and is re-invoked for each probe.
pub fn grad_check<F>(
    build: F,
    params: &[(String, Tensor)],
    eps: f64,
    tolerance: f64,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, DiffError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params
            .iter()
            .zip(values)
            .map(|((name, _), v)| g.param(name, v.clone()))
            .collect();
        let out = build(&mut g, &ids)?;
        let value = g.value(out);
        if !value.is_scalar() {
            return Err(DiffError::Contract(format!(
                "grad_check target must be scalar, got shape {:?}",
                value.shape()
            )));
        }
        Ok(value.item())
    };

    // Analytic gradients from one backward pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|(name, v)| g.param(name, v.clone()))
        .collect();
    let out = build(&mut g, &ids)?;
    if !g.value(out).is_scalar() {
        return Err(DiffError::Contract(format!(
            "grad_check target must be scalar, got shape {:?}",
            g.value(out).shape()
        )));
    }
    let grads = g.backward(out)?;

    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport::default();
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads.get(ids[pi]);
        for ei in 0..tensor.numel() {
            let mut plus = base.clone();
            plus[pi].data_mut()[ei] += eps;
            let mut minus = base.clone();
            minus[pi].data_mut()[ei] -= eps;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let a = analytic.map_or(0.0, |t| t.data()[ei]);
            let rel = rel_error(a, numeric);
            report.checks += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > tolerance {
                report.failures.push(GradCheckFailure {
                    param: name.clone(),
                    index: ei,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
