//! Central finite-difference validation of tape gradients.

use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so that vanishing gradients are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn eval_loss<F>(store: &ParamStore, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let v = g.value(loss);
    if v.shape() != [1, 1] {
        return Err(AutodiffError::NonScalarLoss(v.shape().to_vec()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(AutodiffError::NonFinite("loss".into()));
    }
    Ok(v)
}

/// Compares tape gradients to central differences on a random sample of
/// coordinates: `max(ceil(fraction * numel), min_samples)` of them, capped at
/// the total parameter count.
pub fn grad_check<F, R>(
    store: &mut ParamStore,
    step: f64,
    fraction: f64,
    min_samples: usize,
    rng: &mut R,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    if !g.value(loss).is_finite() {
        return Err(AutodiffError::NonFinite("loss".into()));
    }
    let analytic = g.backward(loss)?.param_grads(store.len());

    let coords: Vec<(ParamId, usize)> = store
        .iter()
        .flat_map(|(id, p)| (0..p.value.len()).map(move |j| (id, j)))
        .collect();
    let wanted = ((coords.len() as f64 * fraction).ceil() as usize)
        .max(min_samples)
        .min(coords.len());
    let picks = rand::seq::index::sample(rng, coords.len(), wanted);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        worst: None,
    };
    for i in picks.iter() {
        let (id, j) = coords[i];
        let original = store.get(id).data()[j];
        store.get_mut(id).data_mut()[j] = original + step;
        let plus = eval_loss(store, &mut loss_fn);
        store.get_mut(id).data_mut()[j] = original - step;
        let minus = eval_loss(store, &mut loss_fn);
        store.get_mut(id).data_mut()[j] = original;
        let numeric = (plus? - minus?) / (2.0 * step);
        let a = analytic[id.0].as_ref().map_or(0.0, |t| t.data()[j]);
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            if err >= report.max_relative_error {
                report.worst = Some((store.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}
