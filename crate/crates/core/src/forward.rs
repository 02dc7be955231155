//! Parallel-imaging forward model and the weighted data-consistency loss.
//!
//! The magnetization `m(t, x)` and raw coil field `S~(x)` are both neural
//! field expansions. Coil sensitivities are `S = S~ / |S~|` across coils;
//! predicted k-space for coil `c` at frame `t` is the centered unitary DFT of
//! `m(t, .) S_c` on the acquisition grid, compared with the measurements only
//! at sampled frequencies.
//!
//! Spatial grid node `i` of an axis with `n` points and extent `s` sits at
//! `(i - n/2) s / n`, which puts the origin on index `n / 2` as the DFT
//! convention requires.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{DataError, ModelError};
use crate::fft::{is_supported_length, CenteredDft};
use crate::nfe::{BoundNfe, EvalGrid, FieldSpec, NeuralFieldExpansion};
use crate::siren::FrequencyEmbedding;
use crate::tensor::{DenseTensor, C64};

/// Floor for the coil-norm denominator.
pub const COIL_NORM_FLOOR: f64 = 1e-12;
/// Smoothing of the per-(coil, frame) square root.
pub const DATA_SQRT_DELTA: f64 = 1e-12;

/// Undersampled multi-coil Cartesian k-space.
///
/// Measurements are held densely as `[coil, frame, k...]` with zeros where
/// the per-frame mask `[frame, k...]` is false.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceDataset {
    grid_shape: Vec<usize>,
    fov: Vec<f64>,
    tau: f64,
    times: Vec<f64>,
    n_coils: usize,
    masks: Vec<bool>,
    kspace: Vec<C64>,
}

impl KSpaceDataset {
    pub fn new(
        grid_shape: Vec<usize>,
        fov: Vec<f64>,
        tau: f64,
        times: Vec<f64>,
        n_coils: usize,
        masks: Vec<bool>,
        mut kspace: Vec<C64>,
    ) -> Result<Self, DataError> {
        let bad = |m: String| Err(DataError::Inconsistent(m));
        if !(2..=3).contains(&grid_shape.len()) {
            return bad(format!("spatial dimension must be 2 or 3, got {}", grid_shape.len()));
        }
        if let Some(&n) = grid_shape.iter().find(|&&n| !is_supported_length(n)) {
            return Err(DataError::UnsupportedLength(n));
        }
        if fov.len() != grid_shape.len() || fov.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("field of view {fov:?} does not match grid {grid_shape:?}"));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return bad(format!("acquisition duration must be positive, got {tau}"));
        }
        if times.is_empty() || times.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("frame times must be non-empty and strictly increasing".into());
        }
        if times.iter().any(|&t| !(0.0..=tau).contains(&t)) {
            return bad(format!("frame times must lie in [0, {tau}]"));
        }
        if n_coils == 0 {
            return bad("at least one coil is required".into());
        }
        let points: usize = grid_shape.iter().product();
        if masks.len() != times.len() * points {
            return bad(format!("mask has {} entries, expected {}", masks.len(), times.len() * points));
        }
        if kspace.len() != n_coils * times.len() * points {
            return bad(format!(
                "k-space has {} entries, expected {}",
                kspace.len(),
                n_coils * times.len() * points
            ));
        }
        if kspace.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return bad("k-space contains non-finite values".into());
        }
        // unsampled entries carry no information
        for (i, z) in kspace.iter_mut().enumerate() {
            if !masks[i % masks.len()] {
                *z = C64::new(0.0, 0.0);
            }
        }
        Ok(Self {
            grid_shape,
            fov,
            tau,
            times,
            n_coils,
            masks,
            kspace,
        })
    }

    pub fn grid_shape(&self) -> &[usize] {
        &self.grid_shape
    }

    pub fn spatial_dim(&self) -> usize {
        self.grid_shape.len()
    }

    pub fn fov(&self) -> &[f64] {
        &self.fov
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_frames(&self) -> usize {
        self.times.len()
    }

    pub fn n_coils(&self) -> usize {
        self.n_coils
    }

    /// Points per spatial frame.
    pub fn frame_len(&self) -> usize {
        self.grid_shape.iter().product()
    }

    /// Sampling masks, `[frame, k...]`.
    pub fn masks(&self) -> &[bool] {
        &self.masks
    }

    pub fn mask(&self, frame: usize) -> &[bool] {
        let n = self.frame_len();
        &self.masks[frame * n..(frame + 1) * n]
    }

    /// Dense measurements, `[coil, frame, k...]`.
    pub fn kspace(&self) -> &[C64] {
        &self.kspace
    }

    /// Dense measurements of one (coil, frame) pair.
    pub fn frame(&self, coil: usize, frame: usize) -> &[C64] {
        let n = self.frame_len();
        let off = (coil * self.n_frames() + frame) * n;
        &self.kspace[off..off + n]
    }

    /// Flat indices of the sampled frequencies of a frame.
    pub fn sampled(&self, frame: usize) -> Vec<usize> {
        self.mask(frame)
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    /// Physical frequency (cycles per metre) of a flat k-grid index.
    pub fn frequency(&self, index: usize) -> Vec<f64> {
        let mut rem = index;
        let mut out = vec![0.0; self.spatial_dim()];
        for j in (0..self.spatial_dim()).rev() {
            let n = self.grid_shape[j];
            let k = rem % n;
            rem /= n;
            out[j] = (k as f64 - (n / 2) as f64) / self.fov[j];
        }
        out
    }

    /// Fraction of sampled k-space entries.
    pub fn sampling_fraction(&self) -> f64 {
        self.masks.iter().filter(|&&m| m).count() as f64 / self.masks.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.kspace.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Default weight tolerance, `1e-3 max |d|`.
    pub fn default_epsilon(&self) -> f64 {
        1e-3 * self.max_abs()
    }

    /// Spatial grid nodes along every axis.
    pub fn spatial_axes(&self) -> Vec<Vec<f64>> {
        self.grid_shape
            .iter()
            .zip(&self.fov)
            .map(|(&n, &s)| spatial_nodes(n, s))
            .collect()
    }

    /// Weights `w_c(t, xi)` per dense k-space entry, zero where unsampled.
    pub fn weights(&self, spec: WeightSpec) -> Vec<f64> {
        let m = self.masks.len();
        self.kspace
            .iter()
            .enumerate()
            .map(|(i, z)| if self.masks[i % m] { dc_weight(z.norm(), spec) } else { 0.0 })
            .collect()
    }
}

/// Grid nodes `(i - n/2) s / n` of an axis with `n` points and extent `s`.
pub fn spatial_nodes(n: usize, extent: f64) -> Vec<f64> {
    let h = extent / n as f64;
    (0..n).map(|i| (i as f64 - (n / 2) as f64) * h).collect()
}

/// Tolerance of the data-consistency weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightSpec {
    pub epsilon: f64,
}

impl WeightSpec {
    pub fn new(epsilon: f64) -> Result<Self, ModelError> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(ModelError::Config(format!("weight tolerance must be positive, got {epsilon}")));
        }
        Ok(Self { epsilon })
    }
}

/// `1` for magnitudes up to `epsilon`, `mag^{-1/2}` above.
pub fn dc_weight(mag: f64, spec: WeightSpec) -> f64 {
    if mag <= spec.epsilon {
        1.0
    } else {
        1.0 / mag.sqrt()
    }
}

/// Scales `raw` to unit Euclidean norm. The flag is set when the norm fell
/// below the floor and the floor was used instead.
pub fn normalize_coils(raw: &[C64]) -> (Vec<C64>, bool) {
    let norm = raw.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let floored = norm < COIL_NORM_FLOOR;
    let r = norm.max(COIL_NORM_FLOOR);
    (raw.iter().map(|z| z / r).collect(), floored)
}

/// Architecture of one field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub layers: usize,
    pub width: usize,
    pub modes: Vec<usize>,
    pub omega_first: f64,
    pub omega_hidden: f64,
}

/// Architectures of the magnetization (time first, then space) and coil
/// fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub magnetization: FieldConfig,
    pub coils: FieldConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            magnetization: FieldConfig {
                layers: 3,
                width: 256,
                modes: vec![64, 96, 84],
                omega_first: FrequencyEmbedding::MAGNETIZATION.omega_first,
                omega_hidden: FrequencyEmbedding::MAGNETIZATION.omega_hidden,
            },
            coils: FieldConfig {
                layers: 3,
                width: 256,
                modes: vec![64, 48],
                omega_first: FrequencyEmbedding::COIL.omega_first,
                omega_hidden: FrequencyEmbedding::COIL.omega_hidden,
            },
        }
    }
}

/// Acquisition geometry a model is defined on.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub tau: f64,
    pub fov: Vec<f64>,
    pub n_coils: usize,
}

impl From<&KSpaceDataset> for Geometry {
    fn from(d: &KSpaceDataset) -> Self {
        Self {
            tau: d.tau(),
            fov: d.fov().to_vec(),
            n_coils: d.n_coils(),
        }
    }
}

impl Geometry {
    pub fn spatial_domain(&self) -> Vec<(f64, f64)> {
        self.fov.iter().map(|&s| (-0.5 * s, 0.5 * s)).collect()
    }

    pub fn spacetime_domain(&self) -> Vec<(f64, f64)> {
        let mut d = vec![(0.0, self.tau)];
        d.extend(self.spatial_domain());
        d
    }
}

/// Magnetization and coil-sensitivity fields.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionModel {
    m: NeuralFieldExpansion,
    s_raw: NeuralFieldExpansion,
    geometry: Geometry,
}

impl ReconstructionModel {
    pub fn new(m: NeuralFieldExpansion, s_raw: NeuralFieldExpansion, geometry: Geometry) -> Result<Self, ModelError> {
        let n = geometry.fov.len();
        if m.dim() != n + 1 || m.channels().is_some() {
            return Err(ModelError::Config(format!("magnetization must be a scalar {}-dimensional field", n + 1)));
        }
        if s_raw.dim() != n || s_raw.channels() != Some(geometry.n_coils) {
            return Err(ModelError::Config(format!(
                "coil field must be {n}-dimensional with {} channels",
                geometry.n_coils
            )));
        }
        let close = |a: &[(f64, f64)], b: &[(f64, f64)]| {
            a.iter()
                .zip(b)
                .all(|(x, y)| (x.0 - y.0).abs() <= 1e-12 * (1.0 + y.0.abs()) && (x.1 - y.1).abs() <= 1e-12 * (1.0 + y.1.abs()))
        };
        if !close(&m.domain(), &geometry.spacetime_domain()) || !close(&s_raw.domain(), &geometry.spatial_domain()) {
            return Err(ModelError::Config("field domains do not match the acquisition geometry".into()));
        }
        Ok(Self { m, s_raw, geometry })
    }

    /// Random initialization from an architecture.
    pub fn random<R: Rng + ?Sized>(config: &ModelConfig, geometry: Geometry, rng: &mut R) -> Result<Self, ModelError> {
        let n = geometry.fov.len();
        if config.magnetization.modes.len() != n + 1 {
            return Err(ModelError::Config(format!(
                "magnetization needs {} mode counts (time + space), got {}",
                n + 1,
                config.magnetization.modes.len()
            )));
        }
        if config.coils.modes.len() != n {
            return Err(ModelError::Config(format!(
                "coil field needs {n} mode counts, got {}",
                config.coils.modes.len()
            )));
        }
        let spec = |f: &FieldConfig, domain: Vec<(f64, f64)>, channels| -> Result<FieldSpec, ModelError> {
            Ok(FieldSpec {
                layers: f.layers,
                width: f.width,
                modes: f.modes.clone(),
                embedding: FrequencyEmbedding::new(f.omega_first, f.omega_hidden)?,
                domain,
                channels,
            })
        };
        let m = NeuralFieldExpansion::random(&spec(&config.magnetization, geometry.spacetime_domain(), None)?, rng)?;
        let s_raw = NeuralFieldExpansion::random(
            &spec(&config.coils, geometry.spatial_domain(), Some(geometry.n_coils))?,
            rng,
        )?;
        Self::new(m, s_raw, geometry)
    }

    pub fn magnetization(&self) -> &NeuralFieldExpansion {
        &self.m
    }

    pub fn magnetization_mut(&mut self) -> &mut NeuralFieldExpansion {
        &mut self.m
    }

    pub fn coil_field(&self) -> &NeuralFieldExpansion {
        &self.s_raw
    }

    pub fn coil_field_mut(&mut self) -> &mut NeuralFieldExpansion {
        &mut self.s_raw
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn spatial_dim(&self) -> usize {
        self.geometry.fov.len()
    }

    pub fn n_coils(&self) -> usize {
        self.geometry.n_coils
    }

    /// Magnetization on `times x spatial grid`.
    pub fn magnetization_grid(&self, times: &[f64], spatial: &[Vec<f64>]) -> Result<DenseTensor, ModelError> {
        let mut axes = vec![times.to_vec()];
        axes.extend(spatial.iter().cloned());
        self.m.eval_grid(&EvalGrid::new(axes)?)
    }

    /// Normalized coil maps `[coil, spatial...]`.
    pub fn coil_maps(&self, spatial: &[Vec<f64>]) -> Result<DenseTensor, ModelError> {
        let raw = self.s_raw.eval_grid(&EvalGrid::new(spatial.to_vec())?)?;
        let c = self.n_coils();
        let points = raw.len() / c;
        let mut data = raw.into_data();
        let mut floored = 0usize;
        for p in 0..points {
            let v: Vec<C64> = (0..c).map(|k| data[k * points + p]).collect();
            let (n, flag) = normalize_coils(&v);
            floored += usize::from(flag);
            for k in 0..c {
                data[k * points + p] = n[k];
            }
        }
        if floored > 0 {
            log::warn!("coil norm below floor at {floored} points");
        }
        let mut shape = vec![c];
        shape.extend(spatial.iter().map(Vec::len));
        Ok(DenseTensor::new(shape, data)?)
    }

    /// Coil images `m(t, .) S_c` on a spatial grid, `[coil, spatial...]`.
    pub fn coil_image_grid(&self, t: f64, spatial: &[Vec<f64>]) -> Result<DenseTensor, ModelError> {
        let m = self.magnetization_grid(&[t], spatial)?;
        let s = self.coil_maps(spatial)?;
        let points = m.len();
        let data = s
            .data()
            .iter()
            .enumerate()
            .map(|(i, z)| z * m.data()[i % points])
            .collect();
        Ok(DenseTensor::new(s.shape().to_vec(), data)?)
    }

    pub fn num_params(&self) -> usize {
        self.m.num_params() + self.s_raw.num_params()
    }

    /// Flat parameters: magnetization, then coil field.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.m.params();
        p.extend(self.s_raw.params());
        p
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.num_params() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let k = self.m.num_params();
        self.m.set_params(&flat[..k])?;
        self.s_raw.set_params(&flat[k..])
    }

    pub fn bind(&self, tape: &Tape) -> BoundModel {
        BoundModel {
            m: self.m.bind(tape),
            s: self.s_raw.bind(tape),
        }
    }
}

/// Centered unitary DFT of a spatial image; the shape must have supported
/// lengths.
pub fn spatial_dft(img: &DenseTensor) -> Result<DenseTensor, DataError> {
    let dft = CenteredDft::new(img.shape())?;
    let mut data = img.data().to_vec();
    dft.forward(&mut data);
    Ok(DenseTensor::new(img.shape().to_vec(), data).expect("shape preserved"))
}

/// Inverse of [`spatial_dft`].
pub fn spatial_idft(kspace: &DenseTensor) -> Result<DenseTensor, DataError> {
    let dft = CenteredDft::new(kspace.shape())?;
    let mut data = kspace.data().to_vec();
    dft.inverse(&mut data);
    Ok(DenseTensor::new(kspace.shape().to_vec(), data).expect("shape preserved"))
}

/// Model parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub m: BoundNfe,
    pub s: BoundNfe,
}

impl BoundModel {
    /// Flat gradient in the layout of [`ReconstructionModel::params`].
    pub fn gradient(&self, tape: &Tape, grads: &Gradients) -> Vec<f64> {
        let mut g = self.m.gradient(tape, grads);
        g.extend(self.s.gradient(tape, grads));
        g
    }

    /// Normalized coil maps `[coil, spatial...]` on the tape.
    pub fn coil_maps(&self, tape: &Tape, model: &ReconstructionModel, spatial: &[Vec<f64>]) -> Result<Var, ModelError> {
        let raw = self.s.grid(tape, model.coil_field(), &EvalGrid::new(spatial.to_vec())?)?;
        Ok(tape.normalize_channels(raw, COIL_NORM_FLOOR))
    }
}

/// Precomputed per-dataset quantities for repeated loss evaluation.
#[derive(Clone, Debug)]
pub struct DataContext {
    dft: CenteredDft,
    weights: Vec<f64>,
    spatial: Vec<Vec<f64>>,
}

impl DataContext {
    pub fn new(dataset: &KSpaceDataset, spec: WeightSpec) -> Result<Self, DataError> {
        Ok(Self {
            dft: CenteredDft::new(dataset.grid_shape())?,
            weights: dataset.weights(spec),
            spatial: dataset.spatial_axes(),
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn spatial_axes(&self) -> &[Vec<f64>] {
        &self.spatial
    }
}

/// Weighted data-consistency loss: mean over the `coils x frames` batch of
/// `sqrt(sum_xi w |m^_c(t, xi) - d^_c(t, xi)|^2 + delta^2)`.
pub fn data_consistency(
    tape: &Tape,
    bound: &BoundModel,
    model: &ReconstructionModel,
    dataset: &KSpaceDataset,
    ctx: &DataContext,
    coils: &[usize],
    frames: &[usize],
) -> Result<Var, ModelError> {
    if coils.is_empty() || frames.is_empty() {
        return Err(ModelError::Config("data batch must contain coils and frames".into()));
    }
    if let Some(&c) = coils.iter().find(|&&c| c >= dataset.n_coils()) {
        return Err(ModelError::Config(format!("coil {c} out of range")));
    }
    if let Some(&t) = frames.iter().find(|&&t| t >= dataset.n_frames()) {
        return Err(ModelError::Config(format!("frame {t} out of range")));
    }
    let empty = frames.iter().filter(|&&t| !dataset.mask(t).iter().any(|&m| m)).count();
    if empty > 0 {
        log::warn!("{empty} sampled frames have no recorded frequencies");
    }
    let times: Vec<f64> = frames.iter().map(|&t| dataset.times()[t]).collect();
    let mut axes = vec![times];
    axes.extend(ctx.spatial.iter().cloned());
    let m = bound.m.grid(tape, model.magnetization(), &EvalGrid::new(axes)?)?;
    let s_all = bound.coil_maps(tape, model, &ctx.spatial)?;
    let s = if coils.len() == dataset.n_coils() && coils.iter().enumerate().all(|(i, &c)| i == c) {
        s_all
    } else {
        tape.select_rows(s_all, coils)
    };
    let images = tape.coil_images(m, s);
    let k = tape.dft(images, &ctx.dft);

    let n = dataset.frame_len();
    let mut target = Vec::with_capacity(frames.len() * coils.len() * n);
    let mut weights = Vec::with_capacity(frames.len() * coils.len() * n);
    for &t in frames {
        for &c in coils {
            target.extend_from_slice(dataset.frame(c, t));
            let off = (c * dataset.n_frames() + t) * n;
            weights.extend_from_slice(&ctx.weights[off..off + n]);
        }
    }
    let shape = tape.shape(k);
    let residual = tape.sub(k, tape.complex_constant(&target, &shape));
    let weighted = tape.mul(tape.cabs2(residual), tape.constant(weights, &shape));
    let per_pair = tape.sum_groups(weighted, n);
    Ok(tape.mean(tape.sqrt_shift(per_pair, DATA_SQRT_DELTA * DATA_SQRT_DELTA)))
}
