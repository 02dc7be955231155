//! Evaluates every objective term on a random model and one sampled batch,
//! with their parameter-gradient norms.

use nfe_mri::autodiff::Tape;
use nfe_mri::config::RunConfig;
use nfe_mri::forward::{DataContext, WeightSpec};
use nfe_mri::optimize::{initial_model, stream_rng};
use nfe_mri::regularize::{total_objective, ObjectiveBatch, RegWeights};
use nfe_mri::sampler::{draw_batch, SamplingGeometry};
use nfe_mri::synth::{simulate_acquisition, MaskKind, Preset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let acq = simulate_acquisition(&Preset::desk().acquisition(4.0, MaskKind::Rectilinear, 1)?)?;
    let d = &acq.dataset;
    let cfg = RunConfig::desk();
    let model = initial_model(d, &cfg)?;
    let sample = draw_batch(&cfg.batch, &SamplingGeometry::from(d), &mut stream_rng(0, 1))?;
    let grid = sample.grid()?;
    let ctx = DataContext::new(d, WeightSpec::new(cfg.epsilon.resolve(d))?)?;
    let weights = RegWeights {
        lambda_tv_x: 1e-3,
        lambda_tv_t: 1e-2,
        lambda_coil: 1e-3,
    };
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let batch = ObjectiveBatch {
        data_coils: &sample.coils,
        data_frames: &sample.data_frames,
        reg_grid: &grid,
        coil_reg_coils: &sample.coils,
    };
    let terms = total_objective(&tape, &bound, &model, d, &ctx, &batch, weights, true)?;
    let show = |name: &str, v: Option<nfe_mri::autodiff::Var>| {
        if let Some(v) = v {
            println!("{name:>6}: {:.6e}", tape.scalar_value(v));
        }
    };
    show("data", Some(terms.data));
    show("tv_x", terms.tv_x);
    show("tv_t", terms.tv_t);
    show("coil", terms.coil);
    show("total", Some(terms.total));
    let grads = bound.gradient(&tape, &tape.backward(terms.total)?);
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    println!("gradient norm over {} parameters: {norm:.4e}", grads.len());
    Ok(())
}
