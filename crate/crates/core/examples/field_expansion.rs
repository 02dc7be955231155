//! Builds a random three-axis neural field expansion, evaluates it on a
//! grid, takes a partial derivative, integrates it, and shows that grid
//! evaluation only calls each univariate network once per coordinate.

use nfe_mri::nfe::{EvalGrid, FieldSpec, NeuralFieldExpansion};
use nfe_mri::siren::FrequencyEmbedding;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = FieldSpec {
        layers: 3,
        width: 32,
        modes: vec![8, 16, 16],
        embedding: FrequencyEmbedding::new(30.0, 30.0)?,
        domain: vec![(0.0, 1.0), (-0.1, 0.1), (-0.1, 0.1)],
        channels: None,
    };
    let field = NeuralFieldExpansion::random(&spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    println!("parameters: {}", field.num_params());

    let grid = EvalGrid::new(vec![
        EvalGrid::cell_centres(0.0, 1.0, 8),
        EvalGrid::cell_centres(-0.1, 0.1, 288),
        EvalGrid::cell_centres(-0.1, 0.1, 112),
    ])?;
    let before = field.eval_count();
    let values = field.eval_grid(&grid)?;
    println!(
        "grid {:?}: {} values from {} univariate evaluations",
        grid.dims(),
        values.len(),
        field.eval_count() - before
    );

    let dt = field.partial_grid(0, &grid)?;
    let mean_dt = dt.data().iter().map(|z| z.norm()).sum::<f64>() / dt.len() as f64;
    println!("mean |d/dt| over the grid: {mean_dt:.4e}");

    let point = field.eval_points(&[vec![0.5, 0.01, -0.02]])?;
    println!("value at (0.5, 0.01, -0.02): {:.6}", point[0]);

    let integral = field.integrate(&[(0.0, 1.0), (-0.05, 0.05), (-0.05, 0.05)], 32)?;
    println!("integral over a sub-box: {:.6e}", integral[0]);
    Ok(())
}
