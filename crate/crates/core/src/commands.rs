//! The `synth`, `recon`, `eval` and `info` commands as library calls.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::forward::spatial_nodes;
use crate::io::{parse_grid, Checkpoint, DatasetContainer, Manifest, Volume};
use crate::metrics::MetricReport;
use crate::optimize::{initial_model, reconstruct_from, Reconstruction};
use crate::synth::{simulate_acquisition, MaskKind, Preset};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const VOLUME_FILE: &str = "reconstruction.c64";
pub const TRACE_FILE: &str = "loss.csv";
pub const REPORT_CSV: &str = "metrics.csv";
pub const REPORT_JSON: &str = "metrics.json";

/// Settings of `synth`.
#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub preset: String,
    pub acceleration: f64,
    pub mask: MaskKind,
    pub seed: u64,
    pub noise_snr_db: Option<f64>,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            acceleration: 1.0,
            mask: MaskKind::Rectilinear,
            seed: 0,
            noise_snr_db: None,
        }
    }
}

/// Simulates a preset and writes the container with ground truth.
pub fn synth(out: &Path, opts: &SynthOptions) -> Result<Manifest> {
    let preset = Preset::by_name(&opts.preset)?;
    let mut spec = preset.acquisition(opts.acceleration, opts.mask, opts.seed)?;
    spec.noise_snr_db = opts.noise_snr_db;
    let acq = simulate_acquisition(&spec)?;
    let container = DatasetContainer {
        dataset: acq.dataset,
        mask_spec: Some(spec.mask),
        ground_truth: Some(acq.ground_truth),
    };
    container.write(out)?;
    Ok(container.manifest())
}

/// Settings of `recon`.
#[derive(Clone, Debug, Default)]
pub struct ReconOptions {
    /// JSON run configuration; the desk configuration when absent.
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    pub seed: Option<u64>,
    /// Output spatial grid; the acquisition grid when absent.
    pub out_grid: Option<String>,
}

/// Loads the run configuration named by `opts`.
pub fn load_config(opts: &ReconOptions) -> Result<RunConfig> {
    let mut cfg = match &opts.config {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => RunConfig::desk(),
    };
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Reconstructs a container, writing checkpoints, the loss trace and the
/// magnetization sampled at the frame times on the output grid.
pub fn recon(data: &Path, out: &Path, opts: &ReconOptions) -> Result<Reconstruction> {
    let container = DatasetContainer::read(data)?;
    let dataset = &container.dataset;
    let cfg = load_config(opts)?;
    cfg.validate_for(dataset)
        .map_err(|e| Error::Validation(format!("config does not fit dataset {}: {e}", data.display())))?;
    let grid = match &opts.out_grid {
        Some(g) => parse_grid(g)?,
        None => dataset.grid_shape().to_vec(),
    };
    if grid.len() != dataset.spatial_dim() {
        return Err(Error::Validation(format!(
            "output grid {grid:?} has {} axes, dataset has {}",
            grid.len(),
            dataset.spatial_dim()
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let model = initial_model(dataset, &cfg)?;
    let result = reconstruct_from(dataset, &cfg, model, &mut |p| {
        Checkpoint::capture(&cfg, p.iteration, p.model, p.adam).write(&ck_path)
    })?;
    if cfg.iterations == 0 {
        Checkpoint::capture(&cfg, 0, &result.model, &result.adam).write(&ck_path)?;
    }
    fs::write(out.join(TRACE_FILE), result.trace.to_csv()).map_err(|e| Error::io(out.join(TRACE_FILE), e))?;
    let axes: Vec<Vec<f64>> = grid.iter().zip(dataset.fov()).map(|(&n, &s)| spatial_nodes(n, s)).collect();
    let vol = result.model.magnetization_grid(dataset.times(), &axes)?;
    let mut shape = vec![dataset.n_frames()];
    shape.extend_from_slice(&grid);
    Volume::new(shape, dataset.times().to_vec(), dataset.fov().to_vec(), vol.into_data())?.write(&out.join(VOLUME_FILE))?;
    Ok(result)
}

/// A volume file, or a dataset directory holding ground truth.
pub fn load_volume(path: &Path) -> Result<Volume> {
    if path.is_dir() {
        let c = DatasetContainer::read(path)?;
        let d = &c.dataset;
        let gt = c
            .ground_truth
            .ok_or_else(|| Error::Validation(format!("{} has no ground truth", path.display())))?;
        let mut shape = vec![d.n_frames()];
        shape.extend_from_slice(d.grid_shape());
        return Volume::new(shape, d.times().to_vec(), d.fov().to_vec(), gt);
    }
    Volume::read(path)
}

/// Compares magnitudes of two volumes and writes `metrics.csv` and
/// `metrics.json` into `out`.
pub fn eval(rec: &Path, reference: &Path, out: &Path) -> Result<MetricReport> {
    let (a, b) = (load_volume(rec)?, load_volume(reference)?);
    if a.header.shape != b.header.shape {
        return Err(Error::Validation(format!(
            "reconstruction shape {:?} differs from reference shape {:?}",
            a.header.shape, b.header.shape
        )));
    }
    let report = MetricReport::compare(&a.magnitudes(), &b.magnitudes(), b.frame_shape())?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join(REPORT_CSV), report.to_csv()).map_err(|e| Error::io(out.join(REPORT_CSV), e))?;
    fs::write(out.join(REPORT_JSON), report.to_json()).map_err(|e| Error::io(out.join(REPORT_JSON), e))?;
    Ok(report)
}

/// Human-readable manifest summary.
pub fn info(data: &Path) -> Result<String> {
    let m = DatasetContainer::read_manifest(data)?;
    let mut s = String::new();
    let _ = writeln!(s, "grid          {:?}", m.grid_shape);
    let _ = writeln!(s, "fov (m)       {:?}", m.fov);
    let _ = writeln!(s, "duration (s)  {}", m.tau);
    let _ = writeln!(s, "frames        {}", m.times.len());
    let _ = writeln!(s, "coils         {}", m.n_coils);
    if let Some(spec) = &m.mask.spec {
        let _ = writeln!(s, "mask          {:?}, AF {}, seed {}", spec.kind, spec.acceleration, spec.seed);
    }
    if let Some(lines) = &m.mask.lines_per_frame {
        let _ = writeln!(s, "lines/frame   {:?}", lines);
    }
    let _ = writeln!(s, "sampling      {:.6}", m.mask.sampling_fraction);
    let _ = writeln!(s, "effective AF  {:.4}", m.effective_acceleration());
    let _ = writeln!(s, "ground truth  {}", if m.ground_truth.is_some() { "yes" } else { "no" });
    Ok(s)
}
