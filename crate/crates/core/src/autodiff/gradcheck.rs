//! Central-difference verification of tape gradients.

use rand::seq::index;

use super::{AutodiffError, ParamId, ParamStore, Result, Scalar, Tape, Var};
use crate::rng;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Upper bound on checked coordinates; every coordinate is checked when
    /// the model has fewer.
    pub max_coords: usize,
    /// Parameters whose coordinates are always checked, ahead of sampling.
    pub always: Vec<ParamId>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-3, max_coords: 500, always: Vec::new(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst: Option<Coordinate>,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Compares backward-pass gradients of the scalar built by `loss_fn`
/// against central differences, one parameter coordinate at a time.
///
/// `loss_fn` must be deterministic: it is re-run twice per coordinate with
/// that coordinate nudged by `+eps` and `-eps`. Parameter values are
/// restored exactly afterwards.
pub fn grad_check<T, F>(store: &mut ParamStore<T>, mut loss_fn: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>, &mut Tape<T>) -> Result<Var>,
{
    if !(cfg.eps > 0.0) || !cfg.eps.is_finite() {
        return Err(AutodiffError::InvalidStep(cfg.eps));
    }
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    tape.backward(loss, store)?;

    let coords = select_coordinates(store, cfg);
    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: 0, worst: None };
    for (param, index) in coords {
        let analytic = store.grad(param).data()[index].as_f64();
        let original = store.value(param).data()[index];
        let plus = T::of(original.as_f64() + cfg.eps);
        let minus = T::of(original.as_f64() - cfg.eps);

        store.value_mut(param).data_mut()[index] = plus;
        let f_plus = eval(store, &mut loss_fn)?;
        store.value_mut(param).data_mut()[index] = minus;
        let f_minus = eval(store, &mut loss_fn)?;
        store.value_mut(param).data_mut()[index] = original;

        // divide by the step actually taken after rounding to T
        let numeric = (f_plus - f_minus) / (plus.as_f64() - minus.as_f64());
        if !analytic.is_finite() || !numeric.is_finite() {
            return Err(AutodiffError::NonFinite(format!("param {} index {index}", param.0)));
        }
        let rel = relative_error(analytic, numeric);
        report.coords_checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(Coordinate { param, index, analytic, numeric, rel_error: rel });
        }
    }
    Ok(report)
}

fn eval<T: Scalar, F>(store: &ParamStore<T>, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore<T>, &mut Tape<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = loss_fn(store, &mut tape)?;
    let value = tape.value(v);
    if !value.is_scalar() {
        return Err(AutodiffError::NotScalar(value.shape()));
    }
    let x = value.item().as_f64();
    if !x.is_finite() {
        return Err(AutodiffError::NonFinite("loss".into()));
    }
    Ok(x)
}

fn select_coordinates<T: Scalar>(store: &ParamStore<T>, cfg: &GradCheckConfig) -> Vec<(ParamId, usize)> {
    let all: Vec<(ParamId, usize)> = store
        .iter()
        .flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id, i)))
        .collect();
    if all.len() <= cfg.max_coords {
        return all;
    }
    let (mut chosen, rest): (Vec<_>, Vec<_>) = all.into_iter().partition(|(id, _)| cfg.always.contains(id));
    let budget = cfg.max_coords.saturating_sub(chosen.len()).min(rest.len());
    let mut rng = rng::stream(cfg.seed, rng::Domain::GradCheck, 0);
    let mut picked: Vec<usize> = index::sample(&mut rng, rest.len(), budget).into_vec();
    picked.sort_unstable();
    chosen.extend(picked.into_iter().map(|i| rest[i]));
    chosen
}
