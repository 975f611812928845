//! Finite-difference verification of analytic gradients.
//!
//! The checker is the independent oracle for every backward rule in this
//! crate: it never goes through `Graph::backward` for its reference values,
//! only through repeated forward evaluations.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BoundParams, ParamStore};

/// Deviation summary for one parameter block.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_dev: f64,
    pub pass: bool,
}

/// Full report; `pass()` is the conjunction over all blocks.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn max_rel_dev(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_dev)
            .fold(0.0, f64::max)
    }
}

/// Default central-difference step (64-bit evaluation).
pub const DEFAULT_PERTURBATION: f64 = 1e-5;

/// Compare analytic gradients of the scalar loss built by `build` against
/// central finite differences, per trainable parameter element.
///
/// `build` must construct the loss from scratch on every call so perturbed
/// parameter values are observed.
pub fn grad_check<F>(
    params: &ParamStore<f64>,
    build: F,
    tolerance: f64,
    perturbation: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &BoundParams) -> Result<Var>,
{
    for (name, entry) in params.iter() {
        if !entry.tensor.all_finite() {
            return Err(Error::Numeric(format!(
                "grad_check: parameter '{name}' is not finite"
            )));
        }
    }

    // Analytic pass with finite checks on, so a bad intermediate names its layer.
    let mut g = Graph::with_finite_checks();
    let bound = params.bind(&mut g);
    let loss = build(&mut g, &bound)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::Usage("grad_check: loss must be scalar".into()));
    }
    let grads = g.backward(loss)?;
    let named = bound.named_grads(params, &grads);

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let loss = build(&mut g, &bound)?;
        Ok(g.value(loss).item()?)
    };

    let mut entries = Vec::new();
    for name in params.trainable_names() {
        let analytic = &named[&name];
        let mut max_rel = 0.0f64;
        let numel = analytic.numel();
        for i in 0..numel {
            let mut plus = params.clone();
            plus.get_mut(&name)?.data_mut()[i] += perturbation;
            let lp = eval(&plus)?;
            let mut minus = params.clone();
            minus.get_mut(&name)?.data_mut()[i] -= perturbation;
            let lm = eval(&minus)?;
            let fd = (lp - lm) / (2.0 * perturbation);
            let a = analytic.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        entries.push(GradCheckEntry {
            pass: max_rel <= tolerance,
            name,
            max_rel_dev: max_rel,
        });
    }
    Ok(GradCheckReport { entries, tolerance })
}
