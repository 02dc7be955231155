//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nfe_mri::autodiff::Tape;
use nfe_mri::config::{EpsilonRule, RunConfig};
use nfe_mri::forward::{DataContext, FieldConfig, Geometry, KSpaceDataset, ModelConfig, ReconstructionModel, WeightSpec};
use nfe_mri::metrics::MetricReport;
use nfe_mri::nfe::{integrate_separable, EvalGrid, FieldSpec, NeuralFieldExpansion};
use nfe_mri::optimize::{full_data_loss, initial_model, reconstruct_from, Stage, WarmupConfig};
use nfe_mri::regularize::{total_objective, ObjectiveBatch, RegWeights};
use nfe_mri::sampler::{draw_batch, AxisBatch, BatchSpec, CoilCount, SamplingGeometry};
use nfe_mri::siren::FrequencyEmbedding;
use nfe_mri::synth::{coil_combine, simulate_acquisition, zero_filled_rss, MaskKind, Preset};
use nfe_mri::tensor::{DenseTensor, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn sorted_uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    v.sort_by(f64::total_cmp);
    v
}

fn field_spec(modes: Vec<usize>, width: usize, omega: f64, domain: Vec<(f64, f64)>) -> FieldSpec {
    FieldSpec {
        layers: 2,
        width,
        modes,
        embedding: FrequencyEmbedding::new(omega, omega).unwrap(),
        domain,
        channels: None,
    }
}

/// Direct sum over every coefficient at every grid point.
fn brute_force(field: &NeuralFieldExpansion, grid: &EvalGrid) -> Vec<C64> {
    let modes = field.coeffs().shape().to_vec();
    let d = modes.len();
    let axes = grid.axes();
    let values: Vec<Vec<Vec<C64>>> = (0..d)
        .map(|j| axes[j].iter().map(|&y| field.networks()[j].forward(&[y]).unwrap()).collect())
        .collect();
    let dims = grid.dims();
    let total: usize = dims.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut p = vec![0usize; d];
    for _ in 0..total {
        let mut sum = C64::new(0.0, 0.0);
        let mut k = vec![0usize; d];
        for &c in field.coeffs().data() {
            let mut term = c;
            for j in 0..d {
                term *= values[j][p[j]][k[j]];
            }
            sum += term;
            for j in (0..d).rev() {
                k[j] += 1;
                if k[j] < modes[j] {
                    break;
                }
                k[j] = 0;
            }
        }
        out.push(sum);
        for j in (0..d).rev() {
            p[j] += 1;
            if p[j] < dims[j] {
                break;
            }
            p[j] = 0;
        }
    }
    out
}

fn tensor_product() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let d = rng.gen_range(1..=4);
        let cap = [0, 100, 100, 21, 10][d];
        let modes: Vec<usize> = (0..d).map(|_| rng.gen_range(1..=cap)).collect();
        assert!(modes.iter().product::<usize>() <= 10_000);
        let domain: Vec<(f64, f64)> = (0..d)
            .map(|_| {
                let a = rng.gen_range(-2.0..2.0);
                (a, a + rng.gen_range(0.5..3.0))
            })
            .collect();
        let spec = field_spec(modes, 8, rng.gen_range(1.0..30.0), domain.clone());
        let field = NeuralFieldExpansion::random(&spec, &mut rng).unwrap();
        let axes = domain
            .iter()
            .map(|&(a, b)| {
                let n = rng.gen_range(1..=5);
                sorted_uniform(&mut rng, n, a, b)
            })
            .collect();
        let grid = EvalGrid::new(axes).unwrap();
        let fast = field.eval_grid(&grid).unwrap();
        let slow = brute_force(&field, &grid);
        let scale = slow.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let err = fast.data().iter().zip(&slow).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        worst = worst.max(err / scale);
    }
    if worst < 1e-10 {
        Ok(format!("max relative error {worst:.2e} over 200 instances"))
    } else {
        Err(format!("max relative error {worst:.2e} >= 1e-10"))
    }
}

fn efficiency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let domain = vec![(0.0, 1.0), (-0.18, 0.18), (-0.07, 0.07)];
    let field = NeuralFieldExpansion::random(&field_spec(vec![3, 4, 5], 8, 30.0, domain.clone()), &mut rng).unwrap();
    let axes = [8, 288, 112]
        .iter()
        .zip(&domain)
        .map(|(&n, &(a, b))| EvalGrid::cell_centres(a, b, n))
        .collect();
    let grid = EvalGrid::new(axes).unwrap();
    let mut counts = Vec::new();
    let before = field.eval_count();
    field.eval_grid(&grid).unwrap();
    counts.push(field.eval_count() - before);
    for axis in 0..3 {
        let before = field.eval_count();
        field.partial_grid(axis, &grid).unwrap();
        counts.push(field.eval_count() - before);
    }
    if counts.iter().all(|&c| c == 408) {
        Ok(format!("counter deltas {counts:?}"))
    } else {
        Err(format!("counter deltas {counts:?}, expected 408 each"))
    }
}

fn gradient_fidelity() -> Outcome {
    let acq = simulate_acquisition(&Preset::tiny().acquisition(2.0, MaskKind::Rectilinear, 3).unwrap()).unwrap();
    let d = &acq.dataset;
    let field = |modes: Vec<usize>, omega: f64| FieldConfig {
        layers: 2,
        width: 8,
        modes,
        omega_first: omega,
        omega_hidden: omega,
    };
    let cfg = ModelConfig {
        magnetization: field(vec![2, 2, 2], 30.0),
        coils: field(vec![2, 2], 5.0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = ReconstructionModel::random(&cfg, Geometry::from(d), &mut rng).unwrap();
    let batch = BatchSpec {
        coils: CoilCount::All,
        time: AxisBatch::same(2),
        space: vec![AxisBatch::same(4); 2],
    };
    let sample = draw_batch(&batch, &SamplingGeometry::from(d), &mut rng).unwrap();
    let grid = sample.grid().unwrap();
    let ctx = DataContext::new(d, WeightSpec::new(EpsilonRule::default().resolve(d)).unwrap()).unwrap();
    let weights = RegWeights {
        lambda_tv_x: 0.3,
        lambda_tv_t: 0.2,
        lambda_coil: 0.5,
    };
    let objective = |model: &ReconstructionModel, grad: bool| -> (f64, Vec<f64>) {
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let ob = ObjectiveBatch {
            data_coils: &sample.coils,
            data_frames: &sample.data_frames,
            reg_grid: &grid,
            coil_reg_coils: &sample.coils,
        };
        let terms = total_objective(&tape, &bound, model, d, &ctx, &ob, weights, false).unwrap();
        let g = if grad {
            bound.gradient(&tape, &tape.backward(terms.total).unwrap())
        } else {
            Vec::new()
        };
        (tape.scalar_value(terms.total), g)
    };
    let (_, grad) = objective(&model, true);
    let base = model.params();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let i = rng.gen_range(0..base.len());
        let h = 1e-4 * base[i].abs().max(1.0);
        let mut at = |offset: f64| {
            let mut p = base.clone();
            p[i] = base[i] + offset;
            model.set_params(&p).unwrap();
            objective(&model, false).0
        };
        // fourth-order central difference
        let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    if worst < 1e-4 {
        Ok(format!("max relative error {worst:.2e} over 50 parameters of {}", base.len()))
    } else {
        Err(format!("max relative error {worst:.2e} >= 1e-4"))
    }
}

fn forward_exactness() -> Outcome {
    let acq = simulate_acquisition(&Preset::desk().acquisition(1.0, MaskKind::Rectilinear, 0).unwrap()).unwrap();
    let rec = coil_combine(&acq.dataset, &acq.coil_maps).map_err(|e| e.to_string())?;
    let err = rec.iter().zip(&acq.ground_truth).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    if err < 1e-9 {
        Ok(format!("max abs error {err:.2e}"))
    } else {
        Err(format!("max abs error {err:.2e} >= 1e-9"))
    }
}

fn magnitude_report(model: &ReconstructionModel, d: &KSpaceDataset, truth: &[C64]) -> MetricReport {
    let vol = model.magnetization_grid(d.times(), &d.spatial_axes()).unwrap();
    let rec: Vec<f64> = vol.data().iter().map(|z| z.norm()).collect();
    let gt: Vec<f64> = truth.iter().map(|z| z.norm()).collect();
    MetricReport::compare(&rec, &gt, d.grid_shape()).unwrap()
}

fn fully_sampled() -> Outcome {
    let start = Instant::now();
    let acq = simulate_acquisition(&Preset::desk().acquisition(1.0, MaskKind::Rectilinear, 7).unwrap()).unwrap();
    let d = &acq.dataset;
    let cfg = RunConfig::desk();
    assert!(cfg.iterations <= 3000 && cfg.regularization == RegWeights::default() && !cfg.warmup.enabled);
    let init = initial_model(d, &cfg).unwrap();
    let before = full_data_loss(d, &init, cfg.epsilon).unwrap();
    let out = reconstruct_from(d, &cfg, init, &mut |_| Ok(())).unwrap();
    let after = full_data_loss(d, &out.model, cfg.epsilon).unwrap();
    let rep = magnitude_report(&out.model, d, &acq.ground_truth);
    let secs = start.elapsed().as_secs_f64();
    let msg = format!(
        "min frame SSIM {:.4}, data loss {before:.3e} -> {after:.3e} ({:.1}x), {} iterations, {secs:.0} s",
        rep.ssim.min,
        before / after,
        cfg.iterations
    );
    if rep.ssim.min >= 0.95 && before / after >= 10.0 && secs <= 900.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn undersampled() -> Outcome {
    let start = Instant::now();
    let mut cfg = RunConfig::desk();
    cfg.warmup.enabled = true;
    let mut results = Vec::new();
    for af in [8.0, 16.0] {
        let acq = simulate_acquisition(&Preset::desk().acquisition(af, MaskKind::Rectilinear, 7).unwrap()).unwrap();
        let d = &acq.dataset;
        let out = reconstruct_from(d, &cfg, initial_model(d, &cfg).unwrap(), &mut |_| Ok(())).unwrap();
        let rep = magnitude_report(&out.model, d, &acq.ground_truth);
        let zf = zero_filled_rss(d).unwrap();
        let gt: Vec<f64> = acq.ground_truth.iter().map(|z| z.norm()).collect();
        let base = MetricReport::compare(&zf, &gt, d.grid_shape()).unwrap();
        results.push((rep.ssim.mean, base.ssim.mean));
    }
    let secs = start.elapsed().as_secs_f64();
    let [(s8, z8), (s16, _)] = [results[0], results[1]];
    let msg = format!(
        "AF8 SSIM {s8:.4} vs zero-filled {z8:.4} (+{:.3}), AF16 SSIM {s16:.4}, {secs:.0} s",
        s8 - z8
    );
    if s8 - z8 >= 0.10 && s8 >= s16 && secs <= 1800.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn mean_time_derivative(model: &ReconstructionModel, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = model.geometry();
    let mut axes = vec![sorted_uniform(&mut rng, 32, 0.0, g.tau)];
    for &s in &g.fov {
        axes.push(sorted_uniform(&mut rng, 16, -0.5 * s, 0.5 * s));
    }
    let p = model.magnetization().partial_grid(0, &EvalGrid::new(axes).unwrap()).unwrap();
    p.data().iter().map(|z| z.norm()).sum::<f64>() / p.len() as f64
}

fn regularizer_sanity() -> Outcome {
    let acq = simulate_acquisition(&Preset::desk().acquisition(1.0, MaskKind::Rectilinear, 7).unwrap()).unwrap();
    let d = &acq.dataset;
    let mut cfg = RunConfig::desk();
    cfg.iterations = 300;
    let mut init = initial_model(d, &cfg).unwrap();
    // fast temporal oscillation of every time basis function
    let net = &mut init.magnetization_mut().networks_mut()[0];
    let k = net.shape().width;
    net.params_mut()[..k].iter_mut().for_each(|w| *w *= 10.0);
    cfg.warmup = WarmupConfig {
        enabled: true,
        stages: vec![Stage::TvT],
        ..WarmupConfig::default()
    };
    let reg = reconstruct_from(d, &cfg, init.clone(), &mut |_| Ok(())).unwrap();
    let total = reg.trace.rows.len();
    cfg.warmup.enabled = false;
    cfg.iterations = total;
    let plain = reconstruct_from(d, &cfg, init, &mut |_| Ok(())).unwrap();
    assert_eq!(plain.trace.rows.len(), total);
    let (a, b) = (mean_time_derivative(&reg.model, 9), mean_time_derivative(&plain.model, 9));
    let msg = format!(
        "mean |dm/dt| {a:.4} with lambda_tv_t = {:.3e} vs {b:.4} without, ratio {:.3}, {total} iterations each",
        reg.weights.lambda_tv_t,
        a / b
    );
    if a <= 0.5 * b {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Composite Simpson rule with 512 intervals.
fn simpson(f: impl Fn(f64) -> Vec<C64>, a: f64, b: f64, n: usize) -> Vec<C64> {
    let m = 512;
    let h = (b - a) / m as f64;
    let mut acc = vec![C64::new(0.0, 0.0); n];
    for i in 0..=m {
        let w = if i == 0 || i == m { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        for (s, v) in acc.iter_mut().zip(f(a + i as f64 * h)) {
            *s += v * w;
        }
    }
    acc.iter().map(|s| s * (h / 3.0)).collect()
}

fn contract_rows(coeffs: &DenseTensor, rows: &[Vec<C64>]) -> C64 {
    let modes = coeffs.shape();
    let mut k = vec![0usize; modes.len()];
    let mut sum = C64::new(0.0, 0.0);
    for &c in coeffs.data() {
        let mut term = c;
        for (j, row) in rows.iter().enumerate() {
            term *= row[k[j]];
        }
        sum += term;
        for j in (0..modes.len()).rev() {
            k[j] += 1;
            if k[j] < modes[j] {
                break;
            }
            k[j] = 0;
        }
    }
    sum
}

fn quadrature() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_field: f64 = 0.0;
    for _ in 0..20 {
        let d = rng.gen_range(1..=3);
        let modes: Vec<usize> = (0..d).map(|_| rng.gen_range(1..=4)).collect();
        let domain: Vec<(f64, f64)> = (0..d).map(|_| (-1.0, 1.0)).collect();
        let spec = field_spec(modes, 8, rng.gen_range(1.0..3.0), domain);
        let field = NeuralFieldExpansion::random(&spec, &mut rng).unwrap();
        let rect: Vec<(f64, f64)> = (0..d)
            .map(|_| {
                let a = rng.gen_range(-1.0..0.0);
                (a, rng.gen_range(a + 0.2..1.0))
            })
            .collect();
        let got = field.integrate(&rect, 24).unwrap()[0];
        let rows: Vec<Vec<C64>> = rect
            .iter()
            .enumerate()
            .map(|(j, &(a, b))| {
                let net = &field.networks()[j];
                simpson(|x| net.forward(&[x]).unwrap(), a, b, net.n_out())
            })
            .collect();
        let want = contract_rows(field.coeffs(), &rows);
        worst_field = worst_field.max((got - want).norm() / want.norm());
    }
    let mut worst_poly: f64 = 0.0;
    for q in 1..=6 {
        for d in 1..=3 {
            let n = 2 * q;
            let coeffs = DenseTensor::new(
                vec![n; d],
                (0..n.pow(d as u32)).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect(),
            )
            .unwrap();
            let rect: Vec<(f64, f64)> = (0..d).map(|_| (rng.gen_range(-2.0..0.0), rng.gen_range(0.5..2.0))).collect();
            // monomials x^k, k < 2q
            let got = integrate_separable(&coeffs, 0, &rect, q, |_, xs| {
                Ok(xs.iter().flat_map(|&x| (0..n).map(move |k| C64::new(x.powi(k as i32), 0.0))).collect())
            })
            .unwrap()
            .data()[0];
            let rows: Vec<Vec<C64>> = rect
                .iter()
                .map(|&(a, b)| {
                    (0..n)
                        .map(|k| C64::new((b.powi(k as i32 + 1) - a.powi(k as i32 + 1)) / (k as f64 + 1.0), 0.0))
                        .collect()
                })
                .collect();
            let want = contract_rows(&coeffs, &rows);
            worst_poly = worst_poly.max((got - want).norm() / want.norm());
        }
    }
    let msg = format!("fields {worst_field:.2e} (limit 1e-6), polynomials {worst_poly:.2e} (limit 1e-12)");
    if worst_field < 1e-6 && worst_poly < 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_nfe-mri");
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = |args: &[&str]| {
        let status = Command::new(bin).args(args).output().unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    };
    run(&["synth", "--out", data.to_str().unwrap(), "--preset", "tiny", "--af", "2", "--seed", "3"]);
    let mut cfg = RunConfig::desk();
    cfg.model.magnetization.modes = vec![3, 6, 6];
    cfg.model.coils.modes = vec![2, 2];
    cfg.batch.time = AxisBatch::same(2);
    cfg.batch.space = vec![AxisBatch::same(8); 2];
    cfg.iterations = 40;
    cfg.warmup = WarmupConfig {
        enabled: true,
        budget: 30,
        segment: 5,
        ..WarmupConfig::default()
    };
    let cfg_path = tmp.path().join("config.json");
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    let outs: Vec<_> = ["a", "b"].iter().map(|n| tmp.path().join(n)).collect();
    for out in &outs {
        run(&[
            "recon",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "11",
        ]);
    }
    let (a, b) = (read_dir_sorted(&outs[0]), read_dir_sorted(&outs[1]));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    if a == b && a.len() >= 5 {
        Ok(format!("{} files byte-identical: {names:?}", a.len()))
    } else {
        Err(format!("outputs differ: {names:?}"))
    }
}

fn coil_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for (n_c, dims) in [(2, 2), (4, 2), (8, 3)] {
        let cfg = ModelConfig {
            magnetization: FieldConfig {
                layers: 2,
                width: 8,
                modes: vec![2; dims + 1],
                omega_first: 30.0,
                omega_hidden: 30.0,
            },
            coils: FieldConfig {
                layers: 2,
                width: 16,
                modes: vec![4; dims],
                omega_first: 5.0,
                omega_hidden: 5.0,
            },
        };
        let geometry = Geometry {
            tau: 1.0,
            fov: vec![0.3; dims],
            n_coils: n_c,
        };
        let model = ReconstructionModel::random(&cfg, geometry, &mut rng).unwrap();
        let per_axis = if dims == 2 { 100 } else { 22 };
        let axes: Vec<Vec<f64>> = (0..dims).map(|_| sorted_uniform(&mut rng, per_axis, -0.15, 0.15)).collect();
        let maps = model.coil_maps(&axes).unwrap();
        let points = maps.len() / n_c;
        for p in 0..points {
            let norm: f64 = (0..n_c).map(|c| maps.data()[c * points + p].norm_sqr()).sum::<f64>().sqrt();
            worst = worst.max((norm - 1.0).abs());
        }
    }
    if worst < 1e-10 {
        Ok(format!("max | ||S|| - 1 | = {worst:.2e} over >= 10^4 points per model"))
    } else {
        Err(format!("max | ||S|| - 1 | = {worst:.2e}"))
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("tensor-product correctness", tensor_product),
        ("efficiency invariant", efficiency),
        ("gradient fidelity", gradient_fidelity),
        ("forward-model exactness", forward_exactness),
        ("fully-sampled reconstruction", fully_sampled),
        ("undersampled benefit", undersampled),
        ("regularizer sanity", regularizer_sanity),
        ("quadrature", quadrature),
        ("determinism", determinism),
        ("coil normalization", coil_normalization),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(m) => println!("PASS {:>2} {name}: {m} [{secs:.1} s]", i + 1),
            Err(m) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {m} [{secs:.1} s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
