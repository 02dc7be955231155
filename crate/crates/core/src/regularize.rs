//! Total-variation and coil-smoothness regularizers and the full objective.
//!
//! Every term is a mean over a product grid of sample coordinates, so the
//! networks are evaluated once per axis coordinate and partial derivatives
//! only swap one univariate factor.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::ModelError;
use crate::forward::{data_consistency, BoundModel, DataContext, KSpaceDataset, ReconstructionModel, COIL_NORM_FLOOR};
use crate::nfe::EvalGrid;

/// Smoothing of the TV magnitudes, `sqrt(x^2 + delta^2)`.
pub const TV_DELTA: f64 = 1e-8;

/// Regularization weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegWeights {
    pub lambda_tv_x: f64,
    pub lambda_tv_t: f64,
    pub lambda_coil: f64,
}

impl RegWeights {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("lambda_tv_x", self.lambda_tv_x),
            ("lambda_tv_t", self.lambda_tv_t),
            ("lambda_coil", self.lambda_coil),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ModelError::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Space-time sample coordinates: time first, then one list per spatial axis.
pub fn spacetime_grid(times: &[f64], spatial: &[Vec<f64>]) -> Result<EvalGrid, ModelError> {
    let mut axes = vec![times.to_vec()];
    axes.extend(spatial.iter().cloned());
    EvalGrid::new(axes)
}

/// Spatial and temporal TV over one space-time grid, sharing the factor
/// evaluations. Either term is skipped when not requested.
pub fn tv_terms(
    tape: &Tape,
    bound: &BoundModel,
    model: &ReconstructionModel,
    grid: &EvalGrid,
    spatial: bool,
    temporal: bool,
) -> Result<(Option<Var>, Option<Var>), ModelError> {
    let field = model.magnetization();
    let d = field.dim();
    let mut want = vec![spatial; d];
    want[0] = temporal;
    let f = bound.m.factors(tape, field, grid, &want)?;
    let partial = |axis: usize| {
        let mut factors = f.values.clone();
        factors[axis] = f.derivatives[axis].expect("derivative requested");
        tape.cabs2(bound.m.contract(tape, field, &factors))
    };
    let delta2 = TV_DELTA * TV_DELTA;
    let tv_x = spatial.then(|| {
        let mut acc = partial(1);
        for axis in 2..d {
            acc = tape.add(acc, partial(axis));
        }
        tape.mean(tape.sqrt_shift(acc, delta2))
    });
    let tv_t = temporal.then(|| tape.mean(tape.sqrt_shift(partial(0), delta2)));
    Ok((tv_x, tv_t))
}

/// Mean over the grid of `sqrt(sum_j |d m / d x_j|^2 + delta^2)`.
pub fn tv_spatial(tape: &Tape, bound: &BoundModel, model: &ReconstructionModel, grid: &EvalGrid) -> Result<Var, ModelError> {
    Ok(tv_terms(tape, bound, model, grid, true, false)?.0.expect("requested"))
}

/// Mean over the grid of `sqrt(|d m / d t|^2 + delta^2)`.
pub fn tv_temporal(tape: &Tape, bound: &BoundModel, model: &ReconstructionModel, grid: &EvalGrid) -> Result<Var, ModelError> {
    Ok(tv_terms(tape, bound, model, grid, false, true)?.1.expect("requested"))
}

/// Mean over `(coil, point)` of `sum_j |d S_c / d x_j|^2`, differentiating
/// through the coil normalization.
pub fn coil_smoothness(
    tape: &Tape,
    bound: &BoundModel,
    model: &ReconstructionModel,
    coils: &[usize],
    grid: &EvalGrid,
) -> Result<Var, ModelError> {
    let field = model.coil_field();
    let d = field.dim();
    if coils.is_empty() || coils.iter().any(|&c| c >= model.n_coils()) {
        return Err(ModelError::Config("coil batch must be a non-empty subset of the coils".into()));
    }
    let f = bound.s.factors(tape, field, grid, &vec![true; d])?;
    let raw = bound.s.contract(tape, field, &f.values);
    let mut acc: Option<Var> = None;
    for axis in 0..d {
        let mut factors = f.values.clone();
        factors[axis] = f.derivatives[axis].expect("derivative requested");
        let draw = bound.s.contract(tape, field, &factors);
        let ds = tape.normalized_derivative(raw, draw, COIL_NORM_FLOOR);
        let term = tape.cabs2(tape.select_rows(ds, coils));
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term),
        });
    }
    Ok(tape.mean(acc.expect("at least one spatial axis")))
}

/// Individual terms of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveTerms {
    pub total: Var,
    pub data: Var,
    pub tv_x: Option<Var>,
    pub tv_t: Option<Var>,
    pub coil: Option<Var>,
}

/// Sample sets of one objective evaluation.
#[derive(Clone, Debug)]
pub struct ObjectiveBatch<'a> {
    pub data_coils: &'a [usize],
    pub data_frames: &'a [usize],
    pub reg_grid: &'a EvalGrid,
    pub coil_reg_coils: &'a [usize],
}

/// `L_data + l_x TV_x + l_t TV_t + l_c L_coil`. Terms with zero weight are
/// not evaluated unless `evaluate_all` is set.
#[allow(clippy::too_many_arguments)]
pub fn total_objective(
    tape: &Tape,
    bound: &BoundModel,
    model: &ReconstructionModel,
    dataset: &KSpaceDataset,
    ctx: &DataContext,
    batch: &ObjectiveBatch<'_>,
    weights: RegWeights,
    evaluate_all: bool,
) -> Result<ObjectiveTerms, ModelError> {
    weights.validate()?;
    let data = data_consistency(tape, bound, model, dataset, ctx, batch.data_coils, batch.data_frames)?;
    let want_x = evaluate_all || weights.lambda_tv_x > 0.0;
    let want_t = evaluate_all || weights.lambda_tv_t > 0.0;
    let want_c = evaluate_all || weights.lambda_coil > 0.0;
    let (tv_x, tv_t) = if want_x || want_t {
        tv_terms(tape, bound, model, batch.reg_grid, want_x, want_t)?
    } else {
        (None, None)
    };
    let coil = if want_c {
        let spatial = EvalGrid::new(batch.reg_grid.axes()[1..].to_vec())?;
        Some(coil_smoothness(tape, bound, model, batch.coil_reg_coils, &spatial)?)
    } else {
        None
    };
    let mut total = data;
    for (term, lambda) in [(tv_x, weights.lambda_tv_x), (tv_t, weights.lambda_tv_t), (coil, weights.lambda_coil)] {
        if let Some(v) = term {
            if lambda > 0.0 {
                total = tape.add(total, tape.scale(v, lambda));
            }
        }
    }
    Ok(ObjectiveTerms {
        total,
        data,
        tv_x,
        tv_t,
        coil,
    })
}
