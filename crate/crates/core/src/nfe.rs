//! Neural field expansions: separable sums of products of univariate
//! networks,
//!
//! `Phi(y) = sum_{k_1..k_d} c[k_1..k_d] prod_j phi_j(y_j)[k_j]`.
//!
//! On a product grid `P_1 x ... x P_d` each `phi_j` is evaluated once per
//! point of its own axis and the coefficients are contracted mode by mode,
//! so a grid costs `sum_j |P_j|` network evaluations instead of
//! `prod_j |P_j|`. Every univariate point evaluation is counted on
//! [`NeuralFieldExpansion::eval_count`].
//!
//! A field may be vector valued: its coefficient tensor then carries a
//! leading channel axis that is never contracted, and grid results keep that
//! axis in front.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::ModelError;
use crate::quadrature::gauss_legendre_on;
use crate::siren::{BoundSiren, FrequencyEmbedding, SirenMlp, SirenShape};
use crate::tensor::{contraction_order, DenseTensor, C64};

/// Per-axis point lists of a product grid.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalGrid {
    axes: Vec<Vec<f64>>,
}

impl EvalGrid {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        if axes.is_empty() || axes.iter().any(|a| a.is_empty()) {
            return Err(ModelError::Config("every grid axis needs at least one point".into()));
        }
        Ok(Self { axes })
    }

    /// `n` cell-centred points on `[a, b]`.
    pub fn cell_centres(a: f64, b: f64, n: usize) -> Vec<f64> {
        let h = (b - a) / n as f64;
        (0..n).map(|i| a + (i as f64 + 0.5) * h).collect()
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn dims(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }
}

/// Separable field built from `d` univariate networks and a coefficient
/// tensor.
#[derive(Debug)]
pub struct NeuralFieldExpansion {
    networks: Vec<SirenMlp>,
    coeffs: DenseTensor,
    channels: Option<usize>,
    evals: AtomicU64,
}

impl Clone for NeuralFieldExpansion {
    fn clone(&self) -> Self {
        Self {
            networks: self.networks.clone(),
            coeffs: self.coeffs.clone(),
            channels: self.channels,
            evals: AtomicU64::new(self.eval_count()),
        }
    }
}

impl PartialEq for NeuralFieldExpansion {
    fn eq(&self, other: &Self) -> bool {
        self.networks == other.networks && self.coeffs == other.coeffs && self.channels == other.channels
    }
}

/// Shape and embedding shared by the networks of one field.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSpec {
    pub layers: usize,
    pub width: usize,
    /// Modes per axis.
    pub modes: Vec<usize>,
    pub embedding: FrequencyEmbedding,
    /// Interval per axis.
    pub domain: Vec<(f64, f64)>,
    /// Leading channel count for vector fields.
    pub channels: Option<usize>,
}

impl NeuralFieldExpansion {
    /// Scalar field from networks and coefficients of shape `N_1 x ... x N_d`.
    pub fn new(networks: Vec<SirenMlp>, coeffs: DenseTensor) -> Result<Self, ModelError> {
        Self::build(networks, coeffs, None)
    }

    /// Vector field with coefficients of shape `C x N_1 x ... x N_d`.
    pub fn vector(networks: Vec<SirenMlp>, coeffs: DenseTensor) -> Result<Self, ModelError> {
        let c = coeffs.shape().first().copied().unwrap_or(0);
        Self::build(networks, coeffs, Some(c))
    }

    fn build(networks: Vec<SirenMlp>, coeffs: DenseTensor, channels: Option<usize>) -> Result<Self, ModelError> {
        let lead = usize::from(channels.is_some());
        if networks.is_empty() || coeffs.rank() != networks.len() + lead || channels == Some(0) {
            return Err(ModelError::Config(format!(
                "{} networks do not match coefficient shape {:?}",
                networks.len(),
                coeffs.shape()
            )));
        }
        for (j, net) in networks.iter().enumerate() {
            if net.n_out() != coeffs.shape()[j + lead] {
                return Err(ModelError::Config(format!(
                    "network {j} has {} modes but the coefficients expect {}",
                    net.n_out(),
                    coeffs.shape()[j + lead]
                )));
            }
        }
        Ok(Self {
            networks,
            coeffs,
            channels,
            evals: AtomicU64::new(0),
        })
    }

    /// Random initialization: SIREN networks per axis and coefficients with
    /// real and imaginary parts uniform on `(-s, s)`, `s = 1/sqrt(prod N_j)`.
    pub fn random<R: Rng + ?Sized>(spec: &FieldSpec, rng: &mut R) -> Result<Self, ModelError> {
        if spec.modes.len() != spec.domain.len() || spec.modes.is_empty() {
            return Err(ModelError::Config("modes and domain must have the same positive length".into()));
        }
        for (axis, &(lo, hi)) in spec.domain.iter().enumerate() {
            if !(lo < hi) {
                return Err(ModelError::DegenerateInterval { axis, lo, hi });
            }
        }
        let networks = spec
            .modes
            .iter()
            .zip(&spec.domain)
            .map(|(&n_out, &dom)| {
                let shape = SirenShape {
                    layers: spec.layers,
                    width: spec.width,
                    n_out,
                };
                SirenMlp::random(shape, spec.embedding, dom, rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut shape: Vec<usize> = spec.channels.into_iter().collect();
        shape.extend(&spec.modes);
        let s = 1.0 / (spec.modes.iter().product::<usize>() as f64).sqrt();
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| C64::new(rng.gen_range(-s..s), rng.gen_range(-s..s)))
            .collect();
        let coeffs = DenseTensor::new(shape, data)?;
        Self::build(networks, coeffs, spec.channels)
    }

    pub fn dim(&self) -> usize {
        self.networks.len()
    }

    pub fn channels(&self) -> Option<usize> {
        self.channels
    }

    pub fn networks(&self) -> &[SirenMlp] {
        &self.networks
    }

    pub fn networks_mut(&mut self) -> &mut [SirenMlp] {
        &mut self.networks
    }

    pub fn coeffs(&self) -> &DenseTensor {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut DenseTensor {
        &mut self.coeffs
    }

    pub fn domain(&self) -> Vec<(f64, f64)> {
        self.networks.iter().map(SirenMlp::domain).collect()
    }

    /// Total number of univariate network point evaluations so far.
    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    fn count(&self, n: usize) {
        self.evals.fetch_add(n as u64, Ordering::Relaxed);
    }

    fn lead(&self) -> usize {
        usize::from(self.channels.is_some())
    }

    fn check_grid(&self, grid: &EvalGrid) -> Result<(), ModelError> {
        if grid.axes.len() != self.dim() {
            return Err(ModelError::Config(format!(
                "{}-dimensional grid for a {}-dimensional field",
                grid.axes.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn factor(&self, axis: usize, xs: &[f64], derivative: bool) -> Result<DenseTensor, ModelError> {
        let net = &self.networks[axis];
        let values = if derivative {
            net.forward_with_derivative(xs).map(|(_, d)| d)
        } else {
            net.forward(xs)
        }
        .map_err(|e| with_axis(e, axis))?;
        self.count(xs.len());
        Ok(DenseTensor::new(vec![xs.len(), net.n_out()], values)?)
    }

    fn contract(&self, factors: &[DenseTensor]) -> Result<DenseTensor, ModelError> {
        Ok(contract_factors(&self.coeffs, factors, self.lead())?)
    }

    /// Field values on a product grid, shape `[C,] |P_1| x ... x |P_d|`.
    pub fn eval_grid(&self, grid: &EvalGrid) -> Result<DenseTensor, ModelError> {
        self.check_grid(grid)?;
        let factors = (0..self.dim())
            .map(|j| self.factor(j, &grid.axes[j], false))
            .collect::<Result<Vec<_>, _>>()?;
        self.contract(&factors)
    }

    /// Partial derivative along `axis` on a product grid, with respect to
    /// physical coordinates.
    pub fn partial_grid(&self, axis: usize, grid: &EvalGrid) -> Result<DenseTensor, ModelError> {
        if axis >= self.dim() {
            return Err(ModelError::InvalidAxis { axis, dims: self.dim() });
        }
        self.check_grid(grid)?;
        let factors = (0..self.dim())
            .map(|j| self.factor(j, &grid.axes[j], j == axis))
            .collect::<Result<Vec<_>, _>>()?;
        self.contract(&factors)
    }

    /// Literal evaluation of the expansion at scattered points. Vector fields
    /// return point-major, channel-minor values.
    pub fn eval_points(&self, points: &[Vec<f64>]) -> Result<Vec<C64>, ModelError> {
        let d = self.dim();
        let shape = self.coeffs.shape();
        let lead = self.lead();
        let channels = self.channels.unwrap_or(1);
        let modes = &shape[lead..];
        let per_channel: usize = modes.iter().product();
        let mut out = Vec::with_capacity(points.len() * channels);
        for p in points {
            if p.len() != d {
                return Err(ModelError::Config(format!("point of dimension {} for a {d}-dimensional field", p.len())));
            }
            let phis = (0..d)
                .map(|j| {
                    self.count(1);
                    self.networks[j].forward(&p[j..=j]).map_err(|e| with_axis(e, j))
                })
                .collect::<Result<Vec<_>, _>>()?;
            for c in 0..channels {
                let block = &self.coeffs.data()[c * per_channel..(c + 1) * per_channel];
                let mut acc = C64::new(0.0, 0.0);
                let mut idx = vec![0usize; d];
                for coef in block {
                    let mut term = *coef;
                    for j in 0..d {
                        term *= phis[j][idx[j]];
                    }
                    acc += term;
                    // odometer over the multi-index, last axis fastest
                    for j in (0..d).rev() {
                        idx[j] += 1;
                        if idx[j] < modes[j] {
                            break;
                        }
                        idx[j] = 0;
                    }
                }
                out.push(acc);
            }
        }
        Ok(out)
    }

    /// Integral over the sub-rectangle `rect` with a `q`-point Gauss–Legendre
    /// rule per axis. Vector fields return one value per channel.
    pub fn integrate(&self, rect: &[(f64, f64)], q: usize) -> Result<Vec<C64>, ModelError> {
        if rect.len() != self.dim() {
            return Err(ModelError::Config("rectangle dimension does not match the field".into()));
        }
        let out = integrate_separable(&self.coeffs, self.lead(), rect, q, |axis, xs| {
            self.count(xs.len());
            self.networks[axis].forward(xs).map_err(|e| with_axis(e, axis))
        })?;
        Ok(out.into_data())
    }

    /// Registers all parameters as leaves on `tape`.
    pub fn bind(&self, tape: &Tape) -> BoundNfe {
        let coeffs = tape.complex_leaf(
            bytemuck::cast_slice::<C64, f64>(self.coeffs.data()).to_vec(),
            self.coeffs.shape(),
        );
        BoundNfe {
            coeffs,
            networks: self.networks.iter().map(|n| n.bind(tape)).collect(),
        }
    }

    /// Number of real parameters (networks plus real and imaginary parts of
    /// the coefficients).
    pub fn num_params(&self) -> usize {
        self.networks.iter().map(|n| n.params().len()).sum::<usize>() + 2 * self.coeffs.len()
    }

    /// Flat parameter vector: network parameters axis by axis, then the
    /// interleaved coefficients.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for n in &self.networks {
            out.extend_from_slice(n.params());
        }
        out.extend_from_slice(bytemuck::cast_slice(self.coeffs.data()));
        out
    }

    /// Inverse of [`Self::params`].
    pub fn set_params(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.num_params() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for n in &mut self.networks {
            let len = n.params().len();
            n.params_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        let coeffs: &mut [f64] = bytemuck::cast_slice_mut(self.coeffs.data_mut());
        coeffs.copy_from_slice(&flat[offset..]);
        Ok(())
    }
}

fn with_axis(e: ModelError, axis: usize) -> ModelError {
    match e {
        ModelError::OutOfDomain { value, lo, hi, .. } => ModelError::OutOfDomain { axis, value, lo, hi },
        other => other,
    }
}

/// Contracts every non-channel mode of `coeffs` with its factor matrix, in
/// the cheapest order.
pub fn contract_factors(
    coeffs: &DenseTensor,
    factors: &[DenseTensor],
    lead: usize,
) -> Result<DenseTensor, crate::error::TensorError> {
    let inner = &coeffs.shape()[lead..];
    let outer: Vec<usize> = factors.iter().map(|f| f.shape()[0]).collect();
    let mut current = coeffs.clone();
    for j in contraction_order(inner, &outer) {
        current = current.mode_contract(j + lead, &factors[j])?;
    }
    Ok(current)
}

/// Integrates a separable expansion with coefficients `coeffs` whose axis-`j`
/// factor is given by `factor(j, xs)` (row-major `xs.len() x N_j`).
pub fn integrate_separable(
    coeffs: &DenseTensor,
    lead: usize,
    rect: &[(f64, f64)],
    q: usize,
    mut factor: impl FnMut(usize, &[f64]) -> Result<Vec<C64>, ModelError>,
) -> Result<DenseTensor, ModelError> {
    if q == 0 {
        return Err(ModelError::Config("quadrature order must be positive".into()));
    }
    let mut rows = Vec::with_capacity(rect.len());
    for (axis, &(lo, hi)) in rect.iter().enumerate() {
        if !(lo < hi) {
            return Err(ModelError::DegenerateInterval { axis, lo, hi });
        }
        let n = coeffs.shape()[axis + lead];
        let (xs, ws) = gauss_legendre_on(q, lo, hi);
        let values = factor(axis, &xs)?;
        let mut row = vec![C64::new(0.0, 0.0); n];
        for (i, w) in ws.iter().enumerate() {
            for k in 0..n {
                row[k] += values[i * n + k] * w;
            }
        }
        rows.push(DenseTensor::new(vec![1, n], row)?);
    }
    let out = contract_factors(coeffs, &rows, lead)?;
    let len = out.len();
    Ok(DenseTensor::new(vec![len], out.into_data())?)
}

/// Univariate factors of a bound field on one grid: values and, where
/// requested, derivatives per axis.
#[derive(Clone, Debug)]
pub struct GridFactors {
    pub values: Vec<Var>,
    pub derivatives: Vec<Option<Var>>,
}

/// Parameter leaves of a [`NeuralFieldExpansion`] on a tape.
#[derive(Clone, Debug)]
pub struct BoundNfe {
    coeffs: Var,
    networks: Vec<BoundSiren>,
}

impl BoundNfe {
    pub fn coeffs(&self) -> Var {
        self.coeffs
    }

    /// Evaluates every network on its grid axis, with derivatives on the axes
    /// flagged in `derivative_axes`. Counts `sum_j |P_j|` evaluations.
    pub fn factors(
        &self,
        tape: &Tape,
        field: &NeuralFieldExpansion,
        grid: &EvalGrid,
        derivative_axes: &[bool],
    ) -> Result<GridFactors, ModelError> {
        field.check_grid(grid)?;
        let mut values = Vec::with_capacity(field.dim());
        let mut derivatives = Vec::with_capacity(field.dim());
        for (j, (net, bound)) in field.networks.iter().zip(&self.networks).enumerate() {
            let want = derivative_axes.get(j).copied().unwrap_or(false);
            let (v, d) = bound
                .forward(tape, net, &grid.axes[j], want)
                .map_err(|e| with_axis(e, j))?;
            field.count(grid.axes[j].len());
            values.push(v);
            derivatives.push(d);
        }
        Ok(GridFactors { values, derivatives })
    }

    /// Contracts the coefficients with one factor per axis.
    pub fn contract(&self, tape: &Tape, field: &NeuralFieldExpansion, factors: &[Var]) -> Var {
        let lead = field.lead();
        let shape = tape.shape(self.coeffs);
        let outer: Vec<usize> = factors.iter().map(|&f| tape.shape(f)[0]).collect();
        let mut current = self.coeffs;
        for j in contraction_order(&shape[lead..], &outer) {
            current = tape.mode_contract(current, factors[j], j + lead);
        }
        current
    }

    /// Values on a grid.
    pub fn grid(&self, tape: &Tape, field: &NeuralFieldExpansion, grid: &EvalGrid) -> Result<Var, ModelError> {
        let f = self.factors(tape, field, grid, &[])?;
        Ok(self.contract(tape, field, &f.values))
    }

    /// Flat gradient in the layout of [`NeuralFieldExpansion::params`].
    pub fn gradient(&self, tape: &Tape, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for n in &self.networks {
            out.extend(n.gradient(tape, grads));
        }
        out.extend(grads.wrt(tape, self.coeffs));
        out
    }
}
