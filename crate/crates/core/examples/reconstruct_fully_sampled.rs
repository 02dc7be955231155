//! Fits the model to fully sampled desk-scale data, then evaluates the
//! continuous magnetization on the acquisition grid and on a twice finer
//! grid.
//!
//! Usage: `reconstruct_fully_sampled [iterations]` (default 1000).

use nfe_mri::config::RunConfig;
use nfe_mri::forward::spatial_nodes;
use nfe_mri::metrics::MetricReport;
use nfe_mri::optimize::{full_data_loss, initial_model, reconstruct};
use nfe_mri::synth::{simulate_acquisition, MaskKind, Preset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iterations = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1000);
    let acq = simulate_acquisition(&Preset::desk().acquisition(1.0, MaskKind::Rectilinear, 7)?)?;
    let d = &acq.dataset;
    let mut cfg = RunConfig::desk();
    cfg.iterations = iterations;
    let before = full_data_loss(d, &initial_model(d, &cfg)?, cfg.epsilon)?;
    let out = reconstruct(d, &cfg)?;
    let after = full_data_loss(d, &out.model, cfg.epsilon)?;
    println!("data loss {before:.4e} -> {after:.4e} over {iterations} iterations");

    let vol = out.model.magnetization_grid(d.times(), &d.spatial_axes())?;
    let rec: Vec<f64> = vol.data().iter().map(|z| z.norm()).collect();
    let truth: Vec<f64> = acq.ground_truth.iter().map(|z| z.norm()).collect();
    let report = MetricReport::compare(&rec, &truth, d.grid_shape())?;
    println!("SSIM mean {:.4} (min {:.4}), PSNR mean {:.2} dB", report.ssim.mean, report.ssim.min, report.psnr.mean);

    let fine: Vec<Vec<f64>> = d.fov().iter().map(|&s| spatial_nodes(128, s)).collect();
    let up = out.model.magnetization_grid(&d.times()[..1], &fine)?;
    println!("first frame on a {:?} grid: {} values", &up.shape()[1..], up.len());
    Ok(())
}
