//! Univariate sine-activated MLPs with complex outputs.
//!
//! A [`SirenMlp`] maps an interval `[a, b]` to `C^N`. Inputs are first
//! rescaled affinely to `[-1, 1]`; then `L` sine layers of width `K` follow,
//! the first scaled by `omega_first` and the rest by `omega_hidden`; a final
//! linear layer produces `2N` reals that are folded into `N` complex values
//! as consecutive `(re, im)` pairs.
//!
//! Parameters live in one flat vector, layer by layer, each layer storing its
//! row-major `fan_in x fan_out` weight matrix followed by its bias.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::ModelError;
use crate::tensor::{kernels, C64};

/// Frequency scalings of the first and the deeper sine layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyEmbedding {
    pub omega_first: f64,
    pub omega_hidden: f64,
}

impl FrequencyEmbedding {
    /// Default for magnetization fields.
    pub const MAGNETIZATION: Self = Self {
        omega_first: 30.0,
        omega_hidden: 30.0,
    };
    /// Default for coil-sensitivity fields, which are smooth.
    pub const COIL: Self = Self {
        omega_first: 5.0,
        omega_hidden: 5.0,
    };

    pub fn new(omega_first: f64, omega_hidden: f64) -> Result<Self, ModelError> {
        let e = Self {
            omega_first,
            omega_hidden,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = |w: f64| w.is_finite() && w > 0.0;
        if ok(self.omega_first) && ok(self.omega_hidden) {
            Ok(())
        } else {
            Err(ModelError::Config(format!(
                "frequency embedding must be positive, got ({}, {})",
                self.omega_first, self.omega_hidden
            )))
        }
    }
}

/// Architecture of a univariate network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SirenShape {
    /// Number of sine layers.
    pub layers: usize,
    /// Width of every sine layer.
    pub width: usize,
    /// Number of complex outputs.
    pub n_out: usize,
}

impl SirenShape {
    fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 || self.width == 0 || self.n_out == 0 {
            return Err(ModelError::Config(format!(
                "network sizes must be positive, got L={}, K={}, N={}",
                self.layers, self.width, self.n_out
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer, final linear layer included.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.layers + 1);
        dims.push((1, self.width));
        for _ in 1..self.layers {
            dims.push((self.width, self.width));
        }
        dims.push((self.width, 2 * self.n_out));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Sine-activated MLP on an interval with complex outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SirenMlp {
    shape: SirenShape,
    embedding: FrequencyEmbedding,
    domain: (f64, f64),
    params: Vec<f64>,
}

/// Seeded initialization; see [`SirenMlp::random`].
pub fn init_siren(
    seed: u64,
    shape: SirenShape,
    embedding: FrequencyEmbedding,
    domain: (f64, f64),
) -> Result<SirenMlp, ModelError> {
    SirenMlp::random(shape, embedding, domain, &mut ChaCha8Rng::seed_from_u64(seed))
}

impl SirenMlp {
    /// First-layer weights are drawn from `U(-1/fan_in, 1/fan_in)`; every
    /// other weight and every bias from `U(-r, r)` with
    /// `r = sqrt(6 / fan_in) / omega_hidden`, using the layer's own fan-in.
    pub fn random<R: Rng + ?Sized>(
        shape: SirenShape,
        embedding: FrequencyEmbedding,
        domain: (f64, f64),
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let mut net = Self::zeros(shape, embedding, domain)?;
        let mut offset = 0;
        for (l, (fan_in, fan_out)) in shape.layer_dims().into_iter().enumerate() {
            let deep = (6.0 / fan_in as f64).sqrt() / embedding.omega_hidden;
            let w_bound = if l == 0 { 1.0 / fan_in as f64 } else { deep };
            for p in &mut net.params[offset..offset + fan_in * fan_out] {
                *p = rng.gen_range(-w_bound..w_bound);
            }
            offset += fan_in * fan_out;
            for p in &mut net.params[offset..offset + fan_out] {
                *p = rng.gen_range(-deep..deep);
            }
            offset += fan_out;
        }
        Ok(net)
    }

    /// Network with all parameters zero.
    pub fn zeros(shape: SirenShape, embedding: FrequencyEmbedding, domain: (f64, f64)) -> Result<Self, ModelError> {
        Self::from_params(shape, embedding, domain, vec![0.0; shape.num_params()])
    }

    pub fn from_params(
        shape: SirenShape,
        embedding: FrequencyEmbedding,
        domain: (f64, f64),
        params: Vec<f64>,
    ) -> Result<Self, ModelError> {
        shape.validate()?;
        embedding.validate()?;
        if !(domain.0.is_finite() && domain.1.is_finite() && domain.0 < domain.1) {
            return Err(ModelError::DegenerateInterval {
                axis: 0,
                lo: domain.0,
                hi: domain.1,
            });
        }
        if params.len() != shape.num_params() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, got {}",
                shape.num_params(),
                params.len()
            )));
        }
        Ok(Self {
            shape,
            embedding,
            domain,
            params,
        })
    }

    pub fn shape(&self) -> SirenShape {
        self.shape
    }

    pub fn embedding(&self) -> FrequencyEmbedding {
        self.embedding
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn n_out(&self) -> usize {
        self.shape.n_out
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight and bias slices of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let dims = self.shape.layer_dims();
        let offset: usize = dims[..l].iter().map(|(i, o)| i * o + o).sum();
        let (i, o) = dims[l];
        (
            &self.params[offset..offset + i * o],
            &self.params[offset + i * o..offset + i * o + o],
        )
    }

    /// Derivative of the rescaled input with respect to the physical one.
    pub fn chain_factor(&self) -> f64 {
        2.0 / (self.domain.1 - self.domain.0)
    }

    /// Maps `x` in `[a, b]` to `[-1, 1]`. Points a hair outside the interval
    /// (relative `1e-9`) are accepted to absorb rounding in grid construction.
    pub fn rescale(&self, x: f64) -> Result<f64, ModelError> {
        let (a, b) = self.domain;
        let tol = 1e-9 * (b - a);
        if !(x >= a - tol && x <= b + tol) {
            return Err(ModelError::OutOfDomain {
                axis: 0,
                value: x,
                lo: a,
                hi: b,
            });
        }
        Ok(((x - a) * self.chain_factor() - 1.0).clamp(-1.0, 1.0))
    }

    fn rescaled(&self, xs: &[f64]) -> Result<Vec<f64>, ModelError> {
        xs.iter().map(|&x| self.rescale(x)).collect()
    }

    fn omega(&self, l: usize) -> f64 {
        if l == 0 {
            self.embedding.omega_first
        } else {
            self.embedding.omega_hidden
        }
    }

    /// Values at `xs`, row-major `xs.len() x n_out`.
    pub fn forward(&self, xs: &[f64]) -> Result<Vec<C64>, ModelError> {
        Ok(self.run(xs, false)?.0)
    }

    /// Values and derivatives with respect to the physical coordinate.
    pub fn forward_with_derivative(&self, xs: &[f64]) -> Result<(Vec<C64>, Vec<C64>), ModelError> {
        let (v, d) = self.run(xs, true)?;
        Ok((v, d.expect("derivative requested")))
    }

    fn run(&self, xs: &[f64], with_derivative: bool) -> Result<(Vec<C64>, Option<Vec<C64>>), ModelError> {
        let batch = xs.len();
        let dims = self.shape.layer_dims();
        let mut h = self.rescaled(xs)?;
        let mut d = with_derivative.then(|| vec![self.chain_factor(); batch]);
        let last = dims.len() - 1;
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let (w, b) = self.layer(l);
            let mut z = vec![0.0; batch * fan_out];
            kernels::real_gemm(batch, fan_in, fan_out, &h, fan_in, 1, w, fan_out, 1, &mut z, fan_out, 1, false);
            for row in z.chunks_mut(fan_out) {
                row.iter_mut().zip(b).for_each(|(v, bias)| *v += bias);
            }
            let dz = d.as_ref().map(|d| {
                let mut dz = vec![0.0; batch * fan_out];
                kernels::real_gemm(batch, fan_in, fan_out, d, fan_in, 1, w, fan_out, 1, &mut dz, fan_out, 1, false);
                dz
            });
            if l == last {
                h = z;
                d = dz;
            } else {
                let omega = self.omega(l);
                if let Some(mut dz) = dz {
                    for (dv, zv) in dz.iter_mut().zip(&z) {
                        *dv *= omega * (omega * zv).cos();
                    }
                    d = Some(dz);
                }
                h = z.into_iter().map(|v| (omega * v).sin()).collect();
            }
        }
        let fold = |v: Vec<f64>| -> Vec<C64> { v.chunks(2).map(|p| C64::new(p[0], p[1])).collect() };
        Ok((fold(h), d.map(fold)))
    }

    /// Registers the parameters as leaves on `tape`.
    pub fn bind(&self, tape: &Tape) -> BoundSiren {
        let dims = self.shape.layer_dims();
        let layers = dims
            .iter()
            .enumerate()
            .map(|(l, &(i, o))| {
                let (w, b) = self.layer(l);
                (tape.leaf(w.to_vec(), &[i, o]), tape.leaf(b.to_vec(), &[o]))
            })
            .collect();
        BoundSiren { layers }
    }
}

/// Parameter leaves of a [`SirenMlp`] on a tape.
#[derive(Clone, Debug)]
pub struct BoundSiren {
    layers: Vec<(Var, Var)>,
}

impl BoundSiren {
    /// Tape forward pass; returns complex `[xs.len(), n_out]` values and,
    /// when requested, their derivatives with respect to the physical
    /// coordinate.
    pub fn forward(
        &self,
        tape: &Tape,
        net: &SirenMlp,
        xs: &[f64],
        with_derivative: bool,
    ) -> Result<(Var, Option<Var>), ModelError> {
        let u = net.rescaled(xs)?;
        let batch = u.len();
        let mut h = tape.constant(u, &[batch, 1]);
        let mut d: Option<Var> = None;
        let last = self.layers.len() - 1;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.add_row(tape.matmul(h, w), b);
            if l == last {
                h = z;
                d = d.map(|d| tape.matmul(d, w));
                break;
            }
            let omega = net.omega(l);
            let zs = tape.scale(z, omega);
            if with_derivative {
                let cz = tape.cos(zs);
                d = Some(match d {
                    // first layer: the input derivative is the chain factor
                    None => tape.mul_row(cz, tape.scale(w, omega * net.chain_factor())),
                    Some(d) => tape.mul(cz, tape.scale(tape.matmul(d, w), omega)),
                });
            }
            h = tape.sin(zs);
        }
        Ok((tape.as_complex(h), d.map(|d| tape.as_complex(d))))
    }

    /// Flat parameter gradient in the layout of [`SirenMlp::params`].
    pub fn gradient(&self, tape: &Tape, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for &(w, b) in &self.layers {
            out.extend(grads.wrt(tape, w));
            out.extend(grads.wrt(tape, b));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(layers: usize, width: usize, n_out: usize) -> SirenShape {
        SirenShape { layers, width, n_out }
    }

    fn random_net(seed: u64) -> SirenMlp {
        init_siren(seed, shape(3, 12, 4), FrequencyEmbedding::new(6.0, 3.0).unwrap(), (-0.3, 0.5)).unwrap()
    }

    #[test]
    fn first_layer_bounds_for_unit_fan_in() {
        let net = init_siren(1, shape(3, 256, 8), FrequencyEmbedding::MAGNETIZATION, (0.0, 1.0)).unwrap();
        let (w0, _) = net.layer(0);
        assert!(w0.iter().all(|w| w.abs() < 1.0));
    }

    #[test]
    fn deep_bound_for_width_256() {
        let bound = (6.0f64 / 256.0).sqrt() / 30.0;
        assert!((bound - 0.005103).abs() < 1e-6);
        let net = init_siren(2, shape(3, 256, 8), FrequencyEmbedding::MAGNETIZATION, (0.0, 1.0)).unwrap();
        for l in 1..4 {
            let (w, b) = net.layer(l);
            assert!(w.iter().all(|v| v.abs() < bound));
            assert!(b.iter().all(|v| v.abs() < bound));
            // the draws actually fill the range
            assert!(w.iter().any(|v| v.abs() > 0.9 * bound));
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        assert_eq!(random_net(5), random_net(5));
        assert_ne!(random_net(5).params(), random_net(6).params());
    }

    #[test]
    fn invalid_sizes_and_embeddings() {
        let e = FrequencyEmbedding::COIL;
        assert!(init_siren(0, shape(0, 4, 2), e, (0.0, 1.0)).is_err());
        assert!(init_siren(0, shape(1, 0, 2), e, (0.0, 1.0)).is_err());
        assert!(init_siren(0, shape(1, 4, 0), e, (0.0, 1.0)).is_err());
        assert!(FrequencyEmbedding::new(0.0, 1.0).is_err());
        assert!(init_siren(0, shape(1, 4, 2), e, (1.0, 1.0)).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = SirenMlp::zeros(shape(2, 5, 3), FrequencyEmbedding::MAGNETIZATION, (-1.0, 1.0)).unwrap();
        let (v, d) = net.forward_with_derivative(&[-0.5, 0.0, 0.9]).unwrap();
        assert!(v.iter().chain(&d).all(|z| z.norm() == 0.0));
    }

    /// One sine neuron `sin(omega x)` read out on the real part.
    fn single_neuron(omega: f64) -> SirenMlp {
        // layer 0: w = 1, b = 0; readout: w = (1, 0), b = (0, 0)
        SirenMlp::from_params(
            shape(1, 1, 1),
            FrequencyEmbedding::new(omega, 1.0).unwrap(),
            (-1.0, 1.0),
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn single_neuron_values_and_derivative() {
        let net = single_neuron(30.0);
        let (v, d) = net.forward_with_derivative(&[0.0, 0.01]).unwrap();
        assert_eq!(v[0], C64::new(0.0, 0.0));
        assert!((d[0].re - 30.0).abs() < 1e-12);
        assert!((v[1].re - (0.3f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn rescale_roundtrip_and_domain_errors() {
        let net = random_net(3);
        let (a, b) = net.domain();
        for &x in &[a, b, 0.1, 0.42] {
            let u = net.rescale(x).unwrap();
            let back = a + (u + 1.0) / net.chain_factor();
            assert!((back - x).abs() < 1e-15);
            assert_eq!(net.forward(&[x]).unwrap(), net.forward(&[back]).unwrap());
        }
        assert!(matches!(net.forward(&[0.6]), Err(ModelError::OutOfDomain { .. })));
        assert!(net.forward(&[f64::NAN]).is_err());
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let net = random_net(4);
        let xs = [-0.25, -0.1, 0.0, 0.05, 0.13, 0.2, 0.28, 0.33, 0.41, 0.47];
        let (_, d) = net.forward_with_derivative(&xs).unwrap();
        let h = 1e-6;
        let plus: Vec<f64> = xs.iter().map(|x| x + h).collect();
        let minus: Vec<f64> = xs.iter().map(|x| x - h).collect();
        let (fp, fm) = (net.forward(&plus).unwrap(), net.forward(&minus).unwrap());
        for i in 0..d.len() {
            let fd = (fp[i] - fm[i]) / (2.0 * h);
            let scale = fd.norm().max(d[i].norm()).max(1e-2);
            assert!((fd - d[i]).norm() / scale < 1e-6, "entry {i}: {} vs {fd}", d[i]);
        }
    }

    #[test]
    fn outputs_bounded_by_readout_norm() {
        for seed in 0..10 {
            let net = random_net(seed);
            let (w, b) = net.layer(net.shape().layers);
            let n2 = 2 * net.n_out();
            let bound: Vec<f64> = (0..n2)
                .map(|j| w.iter().skip(j).step_by(n2).map(|v| v.abs()).sum::<f64>() + b[j].abs())
                .collect();
            let xs: Vec<f64> = (0..50).map(|i| -0.3 + 0.8 * i as f64 / 49.0).collect();
            for (i, z) in net.forward(&xs).unwrap().iter().enumerate() {
                let j = i % net.n_out();
                assert!(z.re.abs() <= bound[2 * j] + 1e-12);
                assert!(z.im.abs() <= bound[2 * j + 1] + 1e-12);
            }
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let net = random_net(7);
        let xs = [-0.3, -0.05, 0.2, 0.5];
        let tape = Tape::new();
        let bound = net.bind(&tape);
        let (v, d) = bound.forward(&tape, &net, &xs, true).unwrap();
        let (pv, pd) = net.forward_with_derivative(&xs).unwrap();
        assert_eq!(tape.shape(v), vec![4, 4]);
        for (a, b) in tape.complex_value(v).iter().zip(&pv) {
            assert!((a - b).norm() < 1e-12);
        }
        for (a, b) in tape.complex_value(d.unwrap()).iter().zip(&pd) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn tv_style_loss_gradient_matches_finite_differences() {
        // L = mean sqrt(|phi'(x)|^2 + delta^2) over a few points
        let net = random_net(11);
        let xs = [-0.2, 0.0, 0.31];
        let loss_of = |n: &SirenMlp| {
            let (_, d) = n.forward_with_derivative(&xs).unwrap();
            d.iter().map(|z| (z.norm_sqr() + 1e-16).sqrt()).sum::<f64>() / d.len() as f64
        };
        let tape = Tape::new();
        let bound = net.bind(&tape);
        let (_, d) = bound.forward(&tape, &net, &xs, true).unwrap();
        let loss = tape.mean(tape.sqrt_shift(tape.cabs2(d.unwrap()), 1e-16));
        assert!((tape.scalar_value(loss) - loss_of(&net)).abs() < 1e-12);
        let g = bound.gradient(&tape, &tape.backward(loss).unwrap());
        let h = 1e-6;
        for i in (0..net.params().len()).step_by(7) {
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let mut m = net.clone();
            m.params_mut()[i] -= h;
            let fd = (loss_of(&p) - loss_of(&m)) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-4);
            assert!(err < 1e-5, "param {i}: {} vs {fd}", g[i]);
        }
    }
}
