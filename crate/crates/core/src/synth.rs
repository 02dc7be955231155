//! Synthetic ground truth: a dynamic ellipse phantom, smooth coil maps,
//! Cartesian undersampling masks and retrospective acquisition.
//!
//! Phantom and coil geometry is given in normalized coordinates `u` in
//! `[-1, 1)` per axis, where `u = 2 x / fov` on the spatial grid nodes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::fft::CenteredDft;
use crate::forward::{spatial_nodes, KSpaceDataset};
use crate::tensor::C64;

/// One ellipse (ellipsoid in 3-D) of the phantom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: Vec<f64>,
    pub semi_axes: Vec<f64>,
    pub intensity: f64,
    /// Relative semi-axis oscillation amplitude.
    #[serde(default)]
    pub modulation: f64,
    /// Oscillation cycles over the acquisition.
    #[serde(default)]
    pub frequency: f64,
}

impl Ellipse {
    pub fn fixed(center: Vec<f64>, semi_axes: Vec<f64>, intensity: f64) -> Self {
        Self {
            center,
            semi_axes,
            intensity,
            modulation: 0.0,
            frequency: 0.0,
        }
    }

    pub fn scale_at(&self, t: f64, tau: f64) -> f64 {
        1.0 + self.modulation * (std::f64::consts::TAU * self.frequency * t / tau).sin()
    }
}

/// Dynamic phantom description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: Vec<usize>,
    pub frames: usize,
    pub fov: Vec<f64>,
    pub tau: f64,
    pub seed: u64,
    pub ellipses: Vec<Ellipse>,
    /// Width of the softened edge in pixels.
    pub edge_pixels: f64,
    /// Largest coefficient of the polynomial phase, in radians.
    pub phase_amplitude: f64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        let d = self.grid.len();
        if d == 0 || self.grid.contains(&0) || self.frames == 0 {
            return bad("phantom shapes must be positive".into());
        }
        if self.fov.len() != d || self.fov.iter().any(|s| !(*s > 0.0)) || !(self.tau > 0.0) {
            return bad("field of view and duration must be positive".into());
        }
        if !(self.edge_pixels >= 0.0) || !self.phase_amplitude.is_finite() {
            return bad("invalid edge width or phase amplitude".into());
        }
        for (k, e) in self.ellipses.iter().enumerate() {
            if e.center.len() != d || e.semi_axes.len() != d || e.semi_axes.iter().any(|a| !(*a > 0.0)) {
                return bad(format!("ellipse {k} does not match the grid dimension"));
            }
            if !(e.modulation.abs() < 1.0) {
                return bad(format!("ellipse {k} modulation must be below 1 in magnitude"));
            }
            let reach = 1.0 + e.modulation.abs();
            if e.center.iter().zip(&e.semi_axes).any(|(c, a)| c.abs() + a * reach > 1.0) {
                return bad(format!("ellipse {k} leaves the field of view"));
            }
        }
        Ok(())
    }

    /// Frame acquisition times, at the centre of each frame window.
    pub fn times(&self) -> Vec<f64> {
        frame_times(self.frames, self.tau)
    }
}

/// `(i + 1/2) tau / frames`.
pub fn frame_times(frames: usize, tau: f64) -> Vec<f64> {
    (0..frames).map(|i| (i as f64 + 0.5) * tau / frames as f64).collect()
}

/// Normalized node coordinates of each axis.
fn unit_axes(grid: &[usize]) -> Vec<Vec<f64>> {
    grid.iter().map(|&n| spatial_nodes(n, 2.0)).collect()
}

fn for_each_point(grid: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let total: usize = grid.iter().product();
    let mut idx = vec![0usize; grid.len()];
    for flat in 0..total {
        f(flat, &idx);
        for a in (0..grid.len()).rev() {
            idx[a] += 1;
            if idx[a] < grid[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

fn raised_cosine(d: f64, width: f64) -> f64 {
    if width == 0.0 {
        return if d < 0.0 { 1.0 } else if d > 0.0 { 0.0 } else { 0.5 };
    }
    if d <= -0.5 * width {
        1.0
    } else if d >= 0.5 * width {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * (d / width + 0.5)).cos())
    }
}

/// Monomials of degree at most two in `d` variables.
fn quadratic_monomials(u: &[f64]) -> Vec<f64> {
    let mut out = vec![1.0];
    out.extend_from_slice(u);
    for i in 0..u.len() {
        for j in i..u.len() {
            out.push(u[i] * u[j]);
        }
    }
    out
}

/// Frames of the phantom, `[frame, spatial...]` row-major.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Vec<C64>, DataError> {
    spec.validate()?;
    let d = spec.grid.len();
    let axes = unit_axes(&spec.grid);
    let n_mono = quadratic_monomials(&vec![0.0; d]).len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phase: Vec<f64> = (0..n_mono)
        .map(|_| rng.gen_range(-1.0..=1.0) * spec.phase_amplitude)
        .collect();
    let points: usize = spec.grid.iter().product();
    // edge width in normalized units, one pixel being 2 / n
    let pixel = spec.grid.iter().map(|&n| 2.0 / n as f64).fold(f64::INFINITY, f64::min);
    let width = spec.edge_pixels * pixel;
    let mut out = vec![C64::new(0.0, 0.0); spec.frames * points];
    let mut u = vec![0.0; d];
    for (f, t) in spec.times().into_iter().enumerate() {
        let scales: Vec<f64> = spec.ellipses.iter().map(|e| e.scale_at(t, spec.tau)).collect();
        for_each_point(&spec.grid, |flat, idx| {
            for a in 0..d {
                u[a] = axes[a][idx[a]];
            }
            let mut mag = 0.0;
            for (e, s) in spec.ellipses.iter().zip(&scales) {
                let mut r2 = 0.0;
                let mut amin = f64::INFINITY;
                for ((&ua, &c), &semi) in u.iter().zip(&e.center).zip(&e.semi_axes) {
                    let ax = semi * s;
                    r2 += ((ua - c) / ax).powi(2);
                    amin = amin.min(ax);
                }
                // signed distance estimate from the boundary
                let dist = (r2.sqrt() - 1.0) * amin;
                mag += e.intensity * raised_cosine(dist, width);
            }
            let ph: f64 = quadratic_monomials(&u).iter().zip(&phase).map(|(m, c)| m * c).sum();
            out[f * points + flat] = C64::from_polar(mag, ph);
        });
    }
    Ok(out)
}

/// Coil map settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoilSpec {
    pub n_coils: usize,
    /// Gaussian lobe width in normalized units.
    pub width: f64,
    /// Largest phase slope in radians per normalized unit.
    pub phase_slope: f64,
    pub seed: u64,
}

impl CoilSpec {
    pub fn new(n_coils: usize, seed: u64) -> Self {
        Self {
            n_coils,
            width: 0.7,
            phase_slope: 1.0,
            seed,
        }
    }
}

/// Coil sensitivities `[coil, spatial...]` with unit root-sum-of-squares at
/// every point. Lobes sit at equiangular positions on the unit circle of the
/// first two axes.
pub fn make_coil_maps(spec: &CoilSpec, grid: &[usize]) -> Result<Vec<C64>, DataError> {
    if spec.n_coils < 2 {
        return Err(DataError::InvalidSpec("at least two coils are required".into()));
    }
    if grid.len() < 2 || !(spec.width > 0.0) {
        return Err(DataError::InvalidSpec("coil maps need a 2-D or 3-D grid and positive width".into()));
    }
    let d = grid.len();
    let axes = unit_axes(grid);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let slopes: Vec<Vec<f64>> = (0..spec.n_coils)
        .map(|_| (0..d).map(|_| rng.gen_range(-1.0..=1.0) * spec.phase_slope).collect())
        .collect();
    let offsets: Vec<f64> = (0..spec.n_coils).map(|_| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)).collect();
    let points: usize = grid.iter().product();
    let mut maps = vec![C64::new(0.0, 0.0); spec.n_coils * points];
    let mut u = vec![0.0; d];
    for_each_point(grid, |flat, idx| {
        for a in 0..d {
            u[a] = axes[a][idx[a]];
        }
        let mut norm2 = 0.0;
        for c in 0..spec.n_coils {
            let angle = std::f64::consts::TAU * c as f64 / spec.n_coils as f64;
            let (py, px) = angle.sin_cos();
            let mut r2 = (u[0] - px).powi(2) + (u[1] - py).powi(2);
            for &x in &u[2..] {
                r2 += x * x;
            }
            let mag = (-0.5 * r2 / (spec.width * spec.width)).exp();
            let ph = offsets[c] + slopes[c].iter().zip(&u).map(|(k, x)| k * x).sum::<f64>();
            let z = C64::from_polar(mag, ph);
            norm2 += mag * mag;
            maps[c * points + flat] = z;
        }
        let inv = 1.0 / norm2.sqrt();
        for c in 0..spec.n_coils {
            maps[c * points + flat] *= inv;
        }
    });
    Ok(maps)
}

/// Cartesian sampling pattern family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Fixed number of phase-encode lines per frame.
    #[default]
    Rectilinear,
    /// Each line kept independently.
    RandomReadout,
}

impl std::str::FromStr for MaskKind {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "rectilinear" => Ok(Self::Rectilinear),
            "random_readout" => Ok(Self::RandomReadout),
            _ => Err(DataError::InvalidSpec(format!("unknown mask kind {s:?}"))),
        }
    }
}

/// Undersampling mask description. Phase-encode lines run along the first
/// spatial axis; the last axis is the readout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub acceleration: f64,
    pub center_lines: usize,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(kind: MaskKind, acceleration: f64, seed: u64) -> Self {
        Self {
            kind,
            acceleration,
            center_lines: 4,
            seed,
        }
    }

    /// Sampled lines per frame for a rectilinear pattern.
    pub fn lines_per_frame(&self, lines: usize) -> usize {
        (lines as f64 / self.acceleration).floor() as usize
    }
}

/// Per-frame masks `[frame, k...]`.
pub fn make_mask(spec: &MaskSpec, grid: &[usize], frames: usize) -> Result<Vec<bool>, DataError> {
    let bad = |m: String| Err(DataError::InvalidSpec(m));
    if grid.is_empty() || frames == 0 {
        return bad("mask needs a grid and at least one frame".into());
    }
    let lines = grid[0];
    let af = spec.acceleration;
    if !(af >= 1.0) || !af.is_finite() {
        return bad(format!("acceleration factor must be at least 1, got {af}"));
    }
    if af > lines as f64 {
        return bad(format!("acceleration factor {af} exceeds the {lines} phase-encode lines"));
    }
    let per_line: usize = grid[1..].iter().product();
    let points = lines * per_line;
    if af == 1.0 {
        return Ok(vec![true; frames * points]);
    }
    let band = spec.center_lines.min(lines);
    let band_start = lines / 2 - band / 2;
    let is_band = |l: usize| (band_start..band_start + band).contains(&l);
    let keep_count = spec.lines_per_frame(lines);
    if spec.kind == MaskKind::Rectilinear && keep_count < band {
        return bad(format!(
            "{keep_count} lines per frame cannot hold the {band}-line center band"
        ));
    }
    let outer: Vec<usize> = (0..lines).filter(|&l| !is_band(l)).collect();
    // keeps the expected fraction at 1 / af with the band forced
    let p_outer = ((lines as f64 / af - band as f64) / outer.len().max(1) as f64).clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mask = vec![false; frames * points];
    for f in 0..frames {
        let mut chosen = vec![false; lines];
        chosen[band_start..band_start + band].fill(true);
        match spec.kind {
            MaskKind::Rectilinear => {
                for k in rand::seq::index::sample(&mut rng, outer.len(), keep_count - band) {
                    chosen[outer[k]] = true;
                }
            }
            MaskKind::RandomReadout => {
                for &l in &outer {
                    chosen[l] = rng.gen_bool(p_outer);
                }
            }
        }
        for (l, &on) in chosen.iter().enumerate() {
            if on {
                let start = f * points + l * per_line;
                mask[start..start + per_line].fill(true);
            }
        }
    }
    Ok(mask)
}

/// Everything needed to simulate one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionSpec {
    pub phantom: PhantomSpec,
    pub coils: CoilSpec,
    pub mask: MaskSpec,
    /// Signal-to-noise ratio in dB of added complex white noise.
    pub noise_snr_db: Option<f64>,
    pub noise_seed: u64,
}

/// Simulated dataset with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Acquisition {
    pub dataset: KSpaceDataset,
    /// `[frame, spatial...]`.
    pub ground_truth: Vec<C64>,
    /// `[coil, spatial...]`.
    pub coil_maps: Vec<C64>,
}

/// Noise variance giving `snr_db` against the mean sampled signal power.
fn noise_sigma(kspace: &[C64], masks: &[bool], snr_db: f64) -> f64 {
    let mut power = 0.0;
    let mut count = 0usize;
    for (i, z) in kspace.iter().enumerate() {
        if masks[i % masks.len()] {
            power += z.norm_sqr();
            count += 1;
        }
    }
    let power = power / count.max(1) as f64;
    (power / 10f64.powf(snr_db / 10.0)).sqrt()
}

/// Masked coil k-space of the given frames: `d_c(t) = mask_t . F(m(t) S_c)`,
/// with optional complex white noise on the sampled entries.
#[allow(clippy::too_many_arguments)]
pub fn acquire(
    frames: &[C64],
    maps: &[C64],
    masks: &[bool],
    grid: &[usize],
    fov: Vec<f64>,
    tau: f64,
    times: Vec<f64>,
    noise: Option<(f64, u64)>,
) -> Result<KSpaceDataset, DataError> {
    let points: usize = grid.iter().product();
    let n_frames = times.len();
    if points == 0 || frames.len() != n_frames * points || !maps.len().is_multiple_of(points) || masks.len() != n_frames * points {
        return Err(DataError::Inconsistent(format!(
            "phantom {}, coil maps {}, masks {} do not fit {n_frames} frames of {grid:?}",
            frames.len(),
            maps.len(),
            masks.len()
        )));
    }
    let n_coils = maps.len() / points;
    let dft = CenteredDft::new(grid)?;
    let mut kspace = vec![C64::new(0.0, 0.0); n_coils * n_frames * points];
    for c in 0..n_coils {
        let s = &maps[c * points..(c + 1) * points];
        for t in 0..n_frames {
            let m = &frames[t * points..(t + 1) * points];
            let block = &mut kspace[(c * n_frames + t) * points..][..points];
            for ((z, a), b) in block.iter_mut().zip(m).zip(s) {
                *z = a * b;
            }
            dft.forward(block);
            for (z, &on) in block.iter_mut().zip(&masks[t * points..(t + 1) * points]) {
                if !on {
                    *z = C64::new(0.0, 0.0);
                }
            }
        }
    }
    if let Some((snr_db, seed)) = noise {
        let sigma = noise_sigma(&kspace, masks, snr_db) / std::f64::consts::SQRT_2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, z) in kspace.iter_mut().enumerate() {
            if masks[i % masks.len()] {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                *z += C64::new(re, im) * sigma;
            }
        }
    }
    KSpaceDataset::new(grid.to_vec(), fov, tau, times, n_coils, masks.to_vec(), kspace)
}

/// Phantom, coils and mask combined into a dataset.
pub fn simulate_acquisition(spec: &AcquisitionSpec) -> Result<Acquisition, DataError> {
    let p = &spec.phantom;
    let ground_truth = make_phantom(p)?;
    let coil_maps = make_coil_maps(&spec.coils, &p.grid)?;
    let masks = make_mask(&spec.mask, &p.grid, p.frames)?;
    let noise = spec.noise_snr_db.map(|snr| (snr, spec.noise_seed));
    let dataset = acquire(&ground_truth, &coil_maps, &masks, &p.grid, p.fov.clone(), p.tau, p.times(), noise)?;
    Ok(Acquisition {
        dataset,
        ground_truth,
        coil_maps,
    })
}

/// Named synthetic geometries.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub grid: Vec<usize>,
    pub frames: usize,
    pub fov: Vec<f64>,
    pub tau: f64,
    pub n_coils: usize,
    pub ellipses: Vec<Ellipse>,
}

fn cardiac_ellipses() -> Vec<Ellipse> {
    vec![
        Ellipse::fixed(vec![0.0, 0.0], vec![0.82, 0.68], 0.5),
        Ellipse::fixed(vec![0.35, -0.3], vec![0.18, 0.14], 0.3),
        Ellipse::fixed(vec![-0.45, 0.3], vec![0.12, 0.2], -0.25),
        Ellipse {
            center: vec![0.05, 0.1],
            semi_axes: vec![0.34, 0.3],
            intensity: 0.25,
            modulation: 0.15,
            frequency: 1.0,
        },
        Ellipse {
            center: vec![0.05, 0.1],
            semi_axes: vec![0.2, 0.17],
            intensity: 0.25,
            modulation: 0.3,
            frequency: 1.0,
        },
    ]
}

impl Preset {
    pub const NAMES: [&'static str; 3] = ["desk", "cine", "tiny"];

    /// 64 x 64, 16 frames, 4 coils.
    pub fn desk() -> Self {
        Self {
            name: "desk",
            grid: vec![64, 64],
            frames: 16,
            fov: vec![0.256, 0.256],
            tau: 1.0,
            n_coils: 4,
            ellipses: cardiac_ellipses(),
        }
    }

    /// 288 phase-encode lines by 112 readout samples, 8 frames, 8 coils.
    pub fn cine() -> Self {
        Self {
            name: "cine",
            grid: vec![288, 112],
            frames: 8,
            fov: vec![0.36, 0.14],
            tau: 1.0,
            n_coils: 8,
            ellipses: cardiac_ellipses(),
        }
    }

    /// 16 x 16, 4 frames, 2 coils, for quick tests.
    pub fn tiny() -> Self {
        Self {
            name: "tiny",
            grid: vec![16, 16],
            frames: 4,
            fov: vec![0.064, 0.064],
            tau: 1.0,
            n_coils: 2,
            ellipses: cardiac_ellipses(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self, DataError> {
        match name {
            "desk" => Ok(Self::desk()),
            "cine" => Ok(Self::cine()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(DataError::InvalidSpec(format!(
                "unknown preset {name:?}; expected one of {:?}",
                Self::NAMES
            ))),
        }
    }

    pub fn phantom(&self, seed: u64) -> PhantomSpec {
        PhantomSpec {
            grid: self.grid.clone(),
            frames: self.frames,
            fov: self.fov.clone(),
            tau: self.tau,
            seed,
            ellipses: self.ellipses.clone(),
            edge_pixels: 2.0,
            phase_amplitude: 0.3,
        }
    }

    /// Noise-free acquisition at acceleration `af`; all generators derive
    /// from `seed`.
    pub fn acquisition(&self, af: f64, kind: MaskKind, seed: u64) -> Result<AcquisitionSpec, DataError> {
        let spec = AcquisitionSpec {
            phantom: self.phantom(seed),
            coils: CoilSpec::new(self.n_coils, seed.wrapping_add(1)),
            mask: MaskSpec::new(kind, af, seed.wrapping_add(2)),
            noise_snr_db: None,
            noise_seed: seed.wrapping_add(3),
        };
        spec.phantom.validate()?;
        if !(af >= 1.0) || af > self.grid[0] as f64 {
            return Err(DataError::InvalidSpec(format!(
                "acceleration factor {af} outside [1, {}]",
                self.grid[0]
            )));
        }
        Ok(spec)
    }
}

/// Coil-combined zero-filled reconstruction `sum_c conj(S_c) F^-1 d_c` per
/// frame, `[frame, spatial...]`.
pub fn coil_combine(dataset: &KSpaceDataset, maps: &[C64]) -> Result<Vec<C64>, DataError> {
    let points = dataset.frame_len();
    if maps.len() != dataset.n_coils() * points {
        return Err(DataError::Inconsistent("coil maps do not match the dataset".into()));
    }
    let dft = CenteredDft::new(dataset.grid_shape())?;
    let mut out = vec![C64::new(0.0, 0.0); dataset.n_frames() * points];
    let mut buf = vec![C64::new(0.0, 0.0); points];
    for t in 0..dataset.n_frames() {
        for c in 0..dataset.n_coils() {
            buf.copy_from_slice(dataset.frame(c, t));
            dft.inverse(&mut buf);
            let s = &maps[c * points..(c + 1) * points];
            for ((o, z), sc) in out[t * points..(t + 1) * points].iter_mut().zip(&buf).zip(s) {
                *o += sc.conj() * z;
            }
        }
    }
    Ok(out)
}

/// Root-sum-of-squares zero-filled magnitude per frame, needing no coil maps.
pub fn zero_filled_rss(dataset: &KSpaceDataset) -> Result<Vec<f64>, DataError> {
    let points = dataset.frame_len();
    let dft = CenteredDft::new(dataset.grid_shape())?;
    let mut out = vec![0.0; dataset.n_frames() * points];
    let mut buf = vec![C64::new(0.0, 0.0); points];
    for t in 0..dataset.n_frames() {
        for c in 0..dataset.n_coils() {
            buf.copy_from_slice(dataset.frame(c, t));
            dft.inverse(&mut buf);
            for (o, z) in out[t * points..(t + 1) * points].iter_mut().zip(&buf) {
                *o += z.norm_sqr();
            }
        }
    }
    out.iter_mut().for_each(|v| *v = v.sqrt());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(modulation: f64) -> PhantomSpec {
        PhantomSpec {
            grid: vec![32, 24],
            frames: 3,
            fov: vec![0.2, 0.15],
            tau: 2.0,
            seed: 5,
            ellipses: vec![Ellipse {
                center: vec![0.11, -0.07],
                semi_axes: vec![0.53, 0.37],
                intensity: 1.0,
                modulation,
                frequency: 1.0,
            }],
            edge_pixels: 2.0,
            phase_amplitude: 0.3,
        }
    }

    #[test]
    fn frame_times_are_centred() {
        assert_eq!(frame_times(4, 2.0), vec![0.25, 0.75, 1.25, 1.75]);
    }

    #[test]
    fn static_phantom_frames_identical() {
        let p = make_phantom(&single(0.0)).unwrap();
        let n = 32 * 24;
        assert_eq!(p[..n], p[n..2 * n]);
        assert_eq!(p[..n], p[2 * n..]);
        let q = make_phantom(&single(0.2)).unwrap();
        assert_ne!(q[..n], q[n..2 * n]);
    }

    #[test]
    fn thresholded_ellipse_matches_support() {
        let spec = single(0.0);
        let p = make_phantom(&spec).unwrap();
        let mut mismatches = 0;
        for i in 0..32 {
            for j in 0..24 {
                // node coordinates from the sampling rule, normalized
                let u = (i as f64 - 16.0) / 16.0;
                let v = (j as f64 - 12.0) / 12.0;
                let inside = ((u - 0.11) / 0.53).powi(2) + ((v + 0.07) / 0.37).powi(2) < 1.0;
                if (p[i * 24 + j].norm() > 0.5) != inside {
                    mismatches += 1;
                }
            }
        }
        assert_eq!(mismatches, 0);
    }

    #[test]
    fn phantom_is_seeded() {
        let a = make_phantom(&single(0.1)).unwrap();
        assert_eq!(a, make_phantom(&single(0.1)).unwrap());
        let mut other = single(0.1);
        other.seed = 6;
        assert_ne!(a, make_phantom(&other).unwrap());
    }

    #[test]
    fn ellipse_outside_fov_rejected() {
        let mut s = single(0.5);
        s.ellipses[0].semi_axes[0] = 0.7;
        assert!(make_phantom(&s).is_err());
    }

    #[test]
    fn coil_maps_have_unit_rss() {
        let grid = [24, 20];
        let maps = make_coil_maps(&CoilSpec::new(5, 3), &grid).unwrap();
        let n = 24 * 20;
        for p in 0..n {
            let ss: f64 = (0..5).map(|c| maps[c * n + p].norm_sqr()).sum();
            assert!((ss - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn opposite_lobes_mirror() {
        let (nx, ny) = (16, 12);
        let maps = make_coil_maps(&CoilSpec::new(2, 9), &[nx, ny]).unwrap();
        let n = nx * ny;
        for i in 1..nx {
            for j in 0..ny {
                let a = maps[i * ny + j].norm();
                let b = maps[n + (nx - i) * ny + j].norm();
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coil_maps_are_smooth() {
        let (nx, ny) = (64, 64);
        let maps = make_coil_maps(&CoilSpec::new(4, 1), &[nx, ny]).unwrap();
        let mut worst: f64 = 0.0;
        for c in 0..4 {
            for i in 0..nx - 1 {
                for j in 0..ny - 1 {
                    let z = maps[c * nx * ny + i * ny + j];
                    worst = worst.max((maps[c * nx * ny + (i + 1) * ny + j] - z).norm());
                    worst = worst.max((maps[c * nx * ny + i * ny + j + 1] - z).norm());
                }
            }
        }
        assert!(worst < 0.1, "max step {worst}");
    }

    #[test]
    fn full_sampling_mask() {
        let m = make_mask(&MaskSpec::new(MaskKind::Rectilinear, 1.0, 0), &[8, 4], 3).unwrap();
        assert!(m.iter().all(|&b| b));
    }

    fn lines_of(mask: &[bool], frame: usize, lines: usize, per_line: usize) -> Vec<usize> {
        (0..lines)
            .filter(|&l| mask[(frame * lines + l) * per_line])
            .collect()
    }

    #[test]
    fn rectilinear_line_counts() {
        let spec = MaskSpec::new(MaskKind::Rectilinear, 8.0, 4);
        let mask = make_mask(&spec, &[288, 8], 6).unwrap();
        let mut patterns = Vec::new();
        for f in 0..6 {
            let lines = lines_of(&mask, f, 288, 8);
            assert_eq!(lines.len(), 36);
            for l in 142..146 {
                assert!(lines.contains(&l));
            }
            // whole lines only
            for l in 0..288 {
                let row = &mask[(f * 288 + l) * 8..][..8];
                assert!(row.iter().all(|&b| b == row[0]));
            }
            patterns.push(lines);
        }
        assert_ne!(patterns[0], patterns[1]);
    }

    #[test]
    fn random_readout_fraction() {
        let spec = MaskSpec::new(MaskKind::RandomReadout, 8.0, 11);
        let frames = 400;
        let mask = make_mask(&spec, &[288, 2], frames).unwrap();
        let frac = mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64;
        assert!((frac - 0.125).abs() < 0.02, "fraction {frac}");
        for f in 0..frames {
            assert!(lines_of(&mask, f, 288, 2).contains(&144));
        }
    }

    #[test]
    fn mask_errors() {
        let too_fast = MaskSpec::new(MaskKind::Rectilinear, 20.0, 0);
        assert!(make_mask(&too_fast, &[16, 4], 1).is_err());
        let band = MaskSpec::new(MaskKind::Rectilinear, 6.0, 0);
        assert!(make_mask(&band, &[16, 4], 1).is_err());
        assert!(make_mask(&MaskSpec::new(MaskKind::Rectilinear, 0.5, 0), &[16, 4], 1).is_err());
    }

    #[test]
    fn full_acquisition_inverts() {
        let acq = simulate_acquisition(&Preset::tiny().acquisition(1.0, MaskKind::Rectilinear, 2).unwrap()).unwrap();
        let rec = coil_combine(&acq.dataset, &acq.coil_maps).unwrap();
        let err = rec
            .iter()
            .zip(&acq.ground_truth)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn acquisition_is_linear() {
        let p = Preset::tiny();
        let spec = p.acquisition(2.0, MaskKind::Rectilinear, 4).unwrap();
        let gt = make_phantom(&spec.phantom).unwrap();
        let maps = make_coil_maps(&spec.coils, &p.grid).unwrap();
        let masks = make_mask(&spec.mask, &p.grid, p.frames).unwrap();
        let run = |x: &[C64]| acquire(x, &maps, &masks, &p.grid, p.fov.clone(), p.tau, spec.phantom.times(), None).unwrap();
        let doubled: Vec<C64> = gt.iter().map(|z| z * 2.0).collect();
        let (a, b) = (run(&gt), run(&doubled));
        for (x, y) in a.kspace().iter().zip(b.kspace()) {
            assert!((x * 2.0 - y).norm() < 1e-12);
        }
    }

    #[test]
    fn noise_level_matches_snr() {
        let mut spec = Preset::desk().acquisition(1.0, MaskKind::Rectilinear, 1).unwrap();
        let clean = simulate_acquisition(&spec).unwrap().dataset;
        spec.noise_snr_db = Some(30.0);
        let noisy = simulate_acquisition(&spec).unwrap().dataset;
        let signal: f64 = clean.kspace().iter().map(|z| z.norm_sqr()).sum();
        let noise: f64 = clean
            .kspace()
            .iter()
            .zip(noisy.kspace())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum();
        let snr = 10.0 * (signal / noise).log10();
        assert!((snr - 30.0).abs() < 1.0, "{snr}");
    }

    #[test]
    fn presets_resolve() {
        for name in Preset::NAMES {
            let p = Preset::by_name(name).unwrap();
            p.phantom(0).validate().unwrap();
        }
        assert!(Preset::by_name("knee").is_err());
        let cine = Preset::cine();
        let spec = cine.acquisition(8.0, MaskKind::Rectilinear, 0).unwrap();
        assert_eq!(spec.mask.lines_per_frame(cine.grid[0]), 36);
    }

    #[test]
    fn zero_filled_full_sampling_is_rss_of_truth() {
        let acq = simulate_acquisition(&Preset::tiny().acquisition(1.0, MaskKind::Rectilinear, 3).unwrap()).unwrap();
        let rss = zero_filled_rss(&acq.dataset).unwrap();
        for (r, g) in rss.iter().zip(&acq.ground_truth) {
            assert!((r - g.norm()).abs() < 1e-10);
        }
    }
}
