//! Centered unitary multi-dimensional DFT used to map coil images to
//! k-space. Transform lengths are restricted to products of 2, 3, 5 and 7.
//!
//! The centered convention puts the spatial origin and the zero frequency at
//! index `n / 2` (integer division) along every axis:
//!
//! `X[k] = n^{-1/2} sum_i x[i] exp(-2 pi i (k - n/2)(i - n/2) / n)`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::{Fft, FftPlanner};

use crate::error::DataError;
use crate::tensor::C64;

/// Whether `n` is a supported transform length.
pub fn is_supported_length(n: usize) -> bool {
    if n == 0 {
        return false;
    }
    let mut m = n;
    for p in [2, 3, 5, 7] {
        while m.is_multiple_of(p) {
            m /= p;
        }
    }
    m == 1
}

#[derive(Clone)]
struct AxisPlan {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

/// Centered, unitary DFT over the trailing axes of a batched array.
#[derive(Clone)]
pub struct CenteredDft {
    shape: Vec<usize>,
    plans: Vec<AxisPlan>,
}

impl fmt::Debug for CenteredDft {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CenteredDft").field("shape", &self.shape).finish()
    }
}

impl CenteredDft {
    pub fn new(shape: &[usize]) -> Result<Self, DataError> {
        let mut planner = FftPlanner::new();
        let plans = shape
            .iter()
            .map(|&n| {
                if !is_supported_length(n) {
                    return Err(DataError::UnsupportedLength(n));
                }
                Ok(AxisPlan {
                    n,
                    forward: planner.plan_fft_forward(n),
                    inverse: planner.plan_fft_inverse(n),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            shape: shape.to_vec(),
            plans,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Number of points in one transformed block.
    pub fn block_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn forward(&self, data: &mut [C64]) {
        self.apply(data, false);
    }

    pub fn inverse(&self, data: &mut [C64]) {
        self.apply(data, true);
    }

    fn apply(&self, data: &mut [C64], inverse: bool) {
        let block = self.block_len();
        assert_eq!(data.len() % block, 0, "data length is not a multiple of the transform block");
        let max_n = self.shape.iter().copied().max().unwrap_or(1);
        let mut line = vec![C64::new(0.0, 0.0); max_n];
        let scratch_len = self
            .plans
            .iter()
            .map(|p| p.forward.get_inplace_scratch_len().max(p.inverse.get_inplace_scratch_len()))
            .max()
            .unwrap_or(0);
        let mut scratch = vec![C64::new(0.0, 0.0); scratch_len];
        for chunk in data.chunks_mut(block) {
            for (axis, plan) in self.plans.iter().enumerate() {
                let n = plan.n;
                let fft = if inverse { &plan.inverse } else { &plan.forward };
                let inner: usize = self.shape[axis + 1..].iter().product();
                let outer = block / (n * inner);
                let scale = 1.0 / (n as f64).sqrt();
                let c = n / 2;
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        // ifftshift on the way in
                        for j in 0..n {
                            line[j] = chunk[base + ((j + c) % n) * inner];
                        }
                        let buf = &mut line[..n];
                        fft.process_with_scratch(buf, &mut scratch[..fft.get_inplace_scratch_len()]);
                        // fftshift on the way out
                        for j in 0..n {
                            chunk[base + ((j + c) % n) * inner] = buf[j] * scale;
                        }
                    }
                }
            }
        }
    }
}

/// Direct `O(n^2)` centered unitary DFT along one axis, used as a test oracle.
pub fn naive_centered_dft(x: &[C64], inverse: bool) -> Vec<C64> {
    let n = x.len();
    let c = (n / 2) as f64;
    let sign = if inverse { 1.0 } else { -1.0 };
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(i, v)| {
                    let phase = sign * 2.0 * PI * (k as f64 - c) * (i as f64 - c) / n as f64;
                    v * C64::from_polar(1.0, phase)
                })
                .sum::<C64>()
                / (n as f64).sqrt()
        })
        .collect()
}
