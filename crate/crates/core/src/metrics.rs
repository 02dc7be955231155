//! PSNR and SSIM between magnitude volumes.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::MetricError;

/// SSIM window edge length.
pub const SSIM_WINDOW: usize = 7;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB; identical inputs give `Infinite`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn as_f64(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }

    fn from_f64(v: f64) -> Self {
        if v == f64::INFINITY {
            Psnr::Infinite
        } else {
            Psnr::Finite(v)
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => match f.precision() {
                Some(p) => write!(f, "{v:.p$}"),
                None => write!(f, "{v}"),
            },
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(v) => s.serialize_f64(*v),
            Psnr::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Psnr::Finite(v)),
            Raw::Text(t) if t == "inf" => Ok(Psnr::Infinite),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

fn check_shapes(a: &[f64], b: &[f64], shape: &[usize]) -> Result<(), MetricError> {
    let n: usize = shape.iter().product();
    if a.len() != n || b.len() != n {
        return Err(MetricError::ShapeMismatch(vec![a.len()], vec![b.len(), n]));
    }
    Ok(())
}

/// Largest magnitude of the reference.
pub fn dynamic_range(reference: &[f64]) -> f64 {
    reference.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `20 log10(range / rmse)` with `range = max |ref|`.
pub fn psnr(rec: &[f64], reference: &[f64]) -> Result<Psnr, MetricError> {
    if rec.len() != reference.len() {
        return Err(MetricError::ShapeMismatch(vec![rec.len()], vec![reference.len()]));
    }
    if reference.is_empty() || reference.iter().all(|&v| v == reference[0]) {
        return Err(MetricError::ConstantReference);
    }
    Ok(psnr_with_range(rec, reference, dynamic_range(reference)))
}

/// PSNR against an externally fixed dynamic range.
pub fn psnr_with_range(rec: &[f64], reference: &[f64], range: f64) -> Psnr {
    let mse = rec.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / rec.len() as f64;
    if mse == 0.0 {
        return Psnr::Infinite;
    }
    Psnr::Finite(20.0 * (range / mse.sqrt()).log10())
}

/// Box means over every fully contained window, separable along each axis.
fn box_means(x: &[f64], shape: &[usize], w: usize) -> (Vec<f64>, Vec<usize>) {
    let mut data = x.to_vec();
    let mut dims = shape.to_vec();
    for axis in 0..dims.len() {
        let n = dims[axis];
        let m = n + 1 - w;
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut next = vec![0.0; outer * m * inner];
        let mut prefix = vec![0.0; n + 1];
        for o in 0..outer {
            for i in 0..inner {
                for k in 0..n {
                    prefix[k + 1] = prefix[k] + data[(o * n + k) * inner + i];
                }
                for k in 0..m {
                    next[(o * m + k) * inner + i] = (prefix[k + w] - prefix[k]) / w as f64;
                }
            }
        }
        data = next;
        dims[axis] = m;
    }
    (data, dims)
}

/// Mean SSIM over valid 7-wide box windows with the dynamic range of the
/// reference.
pub fn ssim(rec: &[f64], reference: &[f64], shape: &[usize]) -> Result<f64, MetricError> {
    check_shapes(rec, reference, shape)?;
    ssim_with_range(rec, reference, shape, dynamic_range(reference))
}

/// SSIM with an externally fixed dynamic range.
pub fn ssim_with_range(rec: &[f64], reference: &[f64], shape: &[usize], range: f64) -> Result<f64, MetricError> {
    check_shapes(rec, reference, shape)?;
    if shape.is_empty() || shape.iter().any(|&n| n < SSIM_WINDOW) {
        return Err(MetricError::WindowTooLarge {
            window: SSIM_WINDOW,
            shape: shape.to_vec(),
        });
    }
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { rec.iter().zip(reference).map(|(&a, &b)| f(a, b)).collect() };
    let w = SSIM_WINDOW;
    let (mx, _) = box_means(rec, shape, w);
    let (my, _) = box_means(reference, shape, w);
    let (mxx, _) = box_means(&prod(|a, _| a * a), shape, w);
    let (myy, _) = box_means(&prod(|_, b| b * b), shape, w);
    let (mxy, _) = box_means(&prod(|a, b| a * b), shape, w);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let vx = mxx[i] - mx[i] * mx[i];
        let vy = myy[i] - my[i] * my[i];
        let cxy = mxy[i] - mx[i] * my[i];
        let num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2);
        let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
        total += if den == 0.0 { 1.0 } else { num / den };
    }
    Ok(total / mx.len() as f64)
}

/// Metrics of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub ssim: f64,
    pub psnr: Psnr,
}

/// Summary statistics of a metric over frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary<T> {
    pub mean: T,
    pub median: T,
    pub min: T,
}

fn summarize(mut v: Vec<f64>) -> Summary<f64> {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    Summary {
        mean: v.iter().sum::<f64>() / n as f64,
        median,
        min: v[0],
    }
}

/// Per-frame and aggregated SSIM and PSNR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub ssim: Summary<f64>,
    pub psnr: Summary<Psnr>,
    pub dynamic_range: f64,
    /// How the dynamic range was chosen.
    pub range_convention: String,
}

impl MetricReport {
    /// Compares magnitude volumes `[frame, spatial...]` frame by frame, with
    /// one dynamic range taken over the whole reference volume.
    pub fn compare(rec: &[f64], reference: &[f64], frame_shape: &[usize]) -> Result<Self, MetricError> {
        let n: usize = frame_shape.iter().product();
        if n == 0 || rec.len() != reference.len() || !reference.len().is_multiple_of(n) {
            return Err(MetricError::ShapeMismatch(vec![rec.len()], vec![reference.len()]));
        }
        if reference.iter().all(|&v| v == reference[0]) {
            return Err(MetricError::ConstantReference);
        }
        let range = dynamic_range(reference);
        let frames = (0..reference.len() / n)
            .map(|f| {
                let (a, b) = (&rec[f * n..(f + 1) * n], &reference[f * n..(f + 1) * n]);
                Ok(FrameMetrics {
                    frame: f,
                    ssim: ssim_with_range(a, b, frame_shape, range)?,
                    psnr: psnr_with_range(a, b, range),
                })
            })
            .collect::<Result<Vec<_>, MetricError>>()?;
        let ssim = summarize(frames.iter().map(|f| f.ssim).collect());
        let p = summarize(frames.iter().map(|f| f.psnr.as_f64()).collect());
        Ok(Self {
            ssim,
            psnr: Summary {
                mean: Psnr::from_f64(p.mean),
                median: Psnr::from_f64(p.median),
                min: Psnr::from_f64(p.min),
            },
            frames,
            dynamic_range: range,
            range_convention: "max |reference| over the volume".into(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per frame followed by the aggregates.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,ssim,psnr\n");
        for f in &self.frames {
            out.push_str(&format!("{},{},{}\n", f.frame, f.ssim, f.psnr));
        }
        out.push_str(&format!("mean,{},{}\n", self.ssim.mean, self.psnr.mean));
        out.push_str(&format!("median,{},{}\n", self.ssim.median, self.psnr.median));
        out.push_str(&format!("min,{},{}\n", self.ssim.min, self.psnr.min));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn structured(n: usize) -> Vec<f64> {
        (0..n * n)
            .map(|k| {
                let (i, j) = ((k / n) as f64, (k % n) as f64);
                0.5 + 0.4 * (0.3 * i).sin() * (0.2 * j).cos()
            })
            .collect()
    }

    #[test]
    fn psnr_of_offset() {
        let r: Vec<f64> = (0..100).map(|k| k as f64 / 99.0).collect();
        let x: Vec<f64> = r.iter().map(|v| v + 0.1).collect();
        match psnr(&x, &r).unwrap() {
            Psnr::Finite(v) => assert!((v - 20.0).abs() < 1e-10),
            Psnr::Infinite => panic!(),
        }
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let r = structured(8);
        assert_eq!(psnr(&r, &r).unwrap(), Psnr::Infinite);
        assert_eq!(serde_json::to_string(&Psnr::Infinite).unwrap(), "\"inf\"");
        assert_eq!(serde_json::from_str::<Psnr>("\"inf\"").unwrap(), Psnr::Infinite);
        assert_eq!(serde_json::from_str::<Psnr>("12.5").unwrap(), Psnr::Finite(12.5));
    }

    #[test]
    fn psnr_scale_invariant() {
        let r = structured(10);
        let x: Vec<f64> = r.iter().map(|v| v * 0.9 + 0.01).collect();
        let a = psnr(&x, &r).unwrap().as_f64();
        let r2: Vec<f64> = r.iter().map(|v| v * 2.0).collect();
        let x2: Vec<f64> = x.iter().map(|v| v * 2.0).collect();
        assert!((psnr(&x2, &r2).unwrap().as_f64() - a).abs() < 1e-10);
    }

    #[test]
    fn psnr_errors() {
        assert!(matches!(psnr(&[1.0], &[1.0, 2.0]), Err(MetricError::ShapeMismatch(..))));
        assert_eq!(psnr(&[1.0, 2.0], &[3.0, 3.0]), Err(MetricError::ConstantReference));
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let r = structured(16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise: Vec<f64> = (0..r.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [0.001, 0.01, 0.05, 0.2] {
            let x: Vec<f64> = r.iter().zip(&noise).map(|(a, n)| a + amp * n).collect();
            let p = psnr(&x, &r).unwrap().as_f64();
            assert!(p < last);
            last = p;
        }
    }

    /// Direct window loop as an oracle for the separable box means.
    fn ssim_direct(x: &[f64], y: &[f64], n: usize, range: f64) -> f64 {
        let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
        let w = 7;
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..=n - w {
            for j in 0..=n - w {
                let idx: Vec<usize> = (0..w).flat_map(|a| (0..w).map(move |b| (i + a) * n + j + b)).collect();
                let m = idx.len() as f64;
                let mx = idx.iter().map(|&k| x[k]).sum::<f64>() / m;
                let my = idx.iter().map(|&k| y[k]).sum::<f64>() / m;
                let vx = idx.iter().map(|&k| (x[k] - mx).powi(2)).sum::<f64>() / m;
                let vy = idx.iter().map(|&k| (y[k] - my).powi(2)).sum::<f64>() / m;
                let cxy = idx.iter().map(|&k| (x[k] - mx) * (y[k] - my)).sum::<f64>() / m;
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_direct_windows() {
        let n = 12;
        let r = structured(n);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = r.iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
        let got = ssim(&x, &r, &[n, n]).unwrap();
        assert!((got - ssim_direct(&x, &r, n, dynamic_range(&r))).abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_and_sign() {
        let r = structured(16);
        assert!((ssim(&r, &r, &[16, 16]).unwrap() - 1.0).abs() < 1e-12);
        // locally zero-mean, so the structure term dominates
        let r: Vec<f64> = (0..256).map(|k| ((k / 16) as f64 * 2.1).sin() * ((k % 16) as f64 * 1.7).cos()).collect();
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        assert!(ssim(&neg, &r, &[16, 16]).unwrap() < 0.0);
    }

    #[test]
    fn ssim_symmetric_with_fixed_range() {
        let r = structured(14);
        let x: Vec<f64> = r.iter().map(|v| v * v).collect();
        let a = ssim_with_range(&x, &r, &[14, 14], 1.0).unwrap();
        let b = ssim_with_range(&r, &x, &[14, 14], 1.0).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!(a < 1.0);
    }

    #[test]
    fn independent_noise_has_low_ssim() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 64;
        let a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert!(ssim(&a, &b, &[n, n]).unwrap().abs() < 0.1);
    }

    #[test]
    fn ssim_3d_and_errors() {
        let n = 8;
        let r: Vec<f64> = (0..n * n * n).map(|k| (k as f64 * 0.37).sin()).collect();
        assert!((ssim(&r, &r, &[n, n, n]).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(ssim(&r[..36], &r[..36], &[6, 6]), Err(MetricError::WindowTooLarge { .. })));
    }

    #[test]
    fn report_aggregates() {
        let n = 8;
        let r: Vec<f64> = (0..3).flat_map(|_| structured(n)).collect();
        let mut x = r.clone();
        for v in &mut x[n * n..] {
            *v += 0.01;
        }
        let rep = MetricReport::compare(&x, &r, &[n, n]).unwrap();
        assert_eq!(rep.frames.len(), 3);
        assert_eq!(rep.frames[0].psnr, Psnr::Infinite);
        assert_eq!(rep.psnr.mean, Psnr::Infinite);
        assert_eq!(rep.psnr.min, rep.frames[1].psnr);
        assert!(rep.ssim.min < 1.0 && rep.ssim.median < 1.0);
        let csv = rep.to_csv();
        assert!(csv.starts_with("frame,ssim,psnr\n0,1,inf\n"));
        let back: MetricReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
    }
}
