//! On-disk formats: dataset containers, complex volumes and checkpoints.
//!
//! Metadata is JSON. Complex arrays are interleaved little-endian `f32`
//! pairs, masks are one byte per entry, and checkpoint parameters are
//! little-endian `f64`. All arrays are row-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::forward::{Geometry, KSpaceDataset, ReconstructionModel};
use crate::optimize::{stream_rng, AdamState, INIT_STREAM};
use crate::synth::MaskSpec;
use crate::tensor::C64;

pub const DATASET_FORMAT: &str = "nfe-mri-dataset";
pub const VOLUME_FORMAT: &str = "nfe-mri-volume";
pub const CHECKPOINT_FORMAT: &str = "nfe-mri-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
pub const ENDIANNESS: &str = "little";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const KSPACE_FILE: &str = "kspace.c64";
pub const MASKS_FILE: &str = "masks.u8";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.c64";

fn format_err(what: &str, message: impl Into<String>) -> Error {
    Error::Format {
        what: what.into(),
        message: message.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| format_err(what, format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("metadata serializes");
    text.push('\n');
    write(path, text.as_bytes())
}

/// Interleaved little-endian `f32` pairs.
pub fn encode_c64(values: &[C64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for z in values {
        out.extend_from_slice(&(z.re as f32).to_le_bytes());
        out.extend_from_slice(&(z.im as f32).to_le_bytes());
    }
    out
}

pub fn decode_c64(bytes: &[u8]) -> Result<Vec<C64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(format_err("complex array", format!("{} bytes is not a whole number of pairs", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes(c[..4].try_into().expect("4 bytes"));
            let im = f32::from_le_bytes(c[4..].try_into().expect("4 bytes"));
            C64::new(re as f64, im as f64)
        })
        .collect())
}

fn encode_f64(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode_f64(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(format_err("f64 array", format!("{} bytes is not a multiple of 8", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// File name and array shape of a binary member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayRef {
    pub file: String,
    pub shape: Vec<usize>,
}

impl ArrayRef {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// How the sampling mask was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskDescription {
    pub spec: Option<MaskSpec>,
    /// Sampled phase-encode lines of each frame, if every line is either
    /// fully sampled or empty.
    pub lines_per_frame: Option<Vec<usize>>,
    pub sampling_fraction: f64,
}

impl MaskDescription {
    pub fn describe(dataset: &KSpaceDataset, spec: Option<MaskSpec>) -> Self {
        let grid = dataset.grid_shape();
        let per_line: usize = grid[1..].iter().product();
        let mut lines = Vec::with_capacity(dataset.n_frames());
        let mut whole = true;
        for t in 0..dataset.n_frames() {
            let mut count = 0;
            for row in dataset.mask(t).chunks(per_line) {
                if row.iter().all(|&b| b) {
                    count += 1;
                } else if row.iter().any(|&b| b) {
                    whole = false;
                }
            }
            lines.push(count);
        }
        Self {
            spec,
            lines_per_frame: whole.then_some(lines),
            sampling_fraction: dataset.sampling_fraction(),
        }
    }
}

/// `manifest.json` of a dataset container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub endianness: String,
    pub grid_shape: Vec<usize>,
    /// Field of view per spatial axis, in meters.
    pub fov: Vec<f64>,
    /// Acquisition duration in seconds.
    pub tau: f64,
    pub times: Vec<f64>,
    pub n_coils: usize,
    pub mask: MaskDescription,
    pub kspace: ArrayRef,
    pub masks: ArrayRef,
    pub ground_truth: Option<ArrayRef>,
}

impl Manifest {
    pub fn effective_acceleration(&self) -> f64 {
        1.0 / self.mask.sampling_fraction
    }
}

/// A dataset with optional ground truth `[frame, spatial...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetContainer {
    pub dataset: KSpaceDataset,
    pub mask_spec: Option<MaskSpec>,
    pub ground_truth: Option<Vec<C64>>,
}

impl DatasetContainer {
    pub fn manifest(&self) -> Manifest {
        let d = &self.dataset;
        let mut kshape = vec![d.n_coils(), d.n_frames()];
        kshape.extend_from_slice(d.grid_shape());
        let mut vshape = vec![d.n_frames()];
        vshape.extend_from_slice(d.grid_shape());
        Manifest {
            format: DATASET_FORMAT.into(),
            version: FORMAT_VERSION,
            endianness: ENDIANNESS.into(),
            grid_shape: d.grid_shape().to_vec(),
            fov: d.fov().to_vec(),
            tau: d.tau(),
            times: d.times().to_vec(),
            n_coils: d.n_coils(),
            mask: MaskDescription::describe(d, self.mask_spec.clone()),
            kspace: ArrayRef {
                file: KSPACE_FILE.into(),
                shape: kshape,
            },
            masks: ArrayRef {
                file: MASKS_FILE.into(),
                shape: vshape.clone(),
            },
            ground_truth: self.ground_truth.as_ref().map(|_| ArrayRef {
                file: GROUND_TRUTH_FILE.into(),
                shape: vshape,
            }),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest();
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        write(&dir.join(KSPACE_FILE), &encode_c64(self.dataset.kspace()))?;
        let masks: Vec<u8> = self.dataset.masks().iter().map(|&b| b as u8).collect();
        write(&dir.join(MASKS_FILE), &masks)?;
        if let Some(gt) = &self.ground_truth {
            write(&dir.join(GROUND_TRUTH_FILE), &encode_c64(gt))?;
        }
        Ok(())
    }

    pub fn read_manifest(dir: &Path) -> Result<Manifest> {
        let m: Manifest = read_json(&dir.join(MANIFEST_FILE), "manifest")?;
        if m.format != DATASET_FORMAT || m.version != FORMAT_VERSION {
            return Err(format_err("manifest", format!("unsupported format {} v{}", m.format, m.version)));
        }
        if m.endianness != ENDIANNESS {
            return Err(format_err("manifest", format!("unsupported endianness {:?}", m.endianness)));
        }
        Ok(m)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let m = Self::read_manifest(dir)?;
        let member = |r: &ArrayRef, width: usize| -> Result<Vec<u8>> {
            let bytes = read(&dir.join(&r.file))?;
            if bytes.len() != r.len() * width {
                return Err(format_err(
                    "dataset",
                    format!("{} holds {} bytes, manifest shape {:?} needs {}", r.file, bytes.len(), r.shape, r.len() * width),
                ));
            }
            Ok(bytes)
        };
        let points: usize = m.grid_shape.iter().product();
        let frames = m.times.len();
        if m.kspace.len() != m.n_coils * frames * points || m.masks.len() != frames * points {
            return Err(format_err("manifest", "array shapes disagree with the geometry"));
        }
        let kspace = decode_c64(&member(&m.kspace, 8)?)?;
        let masks = member(&m.masks, 1)?
            .into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(format_err("mask", format!("byte {b} is neither 0 nor 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let ground_truth = match &m.ground_truth {
            Some(r) => {
                if r.len() != frames * points {
                    return Err(format_err("manifest", "ground-truth shape disagrees with the geometry"));
                }
                Some(decode_c64(&member(r, 8)?)?)
            }
            None => None,
        };
        let dataset = KSpaceDataset::new(m.grid_shape, m.fov, m.tau, m.times, m.n_coils, masks, kspace)?;
        Ok(Self {
            dataset,
            mask_spec: m.mask.spec,
            ground_truth,
        })
    }
}

/// Header of a complex volume `[frame, spatial...]`, stored next to the
/// binary with a `.json` extension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub format: String,
    pub version: u32,
    pub endianness: String,
    pub shape: Vec<usize>,
    pub times: Vec<f64>,
    pub fov: Vec<f64>,
}

/// Complex volume with its header.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub header: VolumeHeader,
    pub data: Vec<C64>,
}

impl Volume {
    pub fn new(shape: Vec<usize>, times: Vec<f64>, fov: Vec<f64>, data: Vec<C64>) -> Result<Self> {
        if shape.first() != Some(&times.len()) || shape.len() != fov.len() + 1 || shape.iter().product::<usize>() != data.len() {
            return Err(Error::Validation(format!(
                "volume of {} values does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self {
            header: VolumeHeader {
                format: VOLUME_FORMAT.into(),
                version: FORMAT_VERSION,
                endianness: ENDIANNESS.into(),
                shape,
                times,
                fov,
            },
            data,
        })
    }

    pub fn frame_shape(&self) -> &[usize] {
        &self.header.shape[1..]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    /// Header path belonging to a binary path.
    pub fn header_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(&Self::header_path(path), &self.header)?;
        write(path, &encode_c64(&self.data))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let header: VolumeHeader = read_json(&Self::header_path(path), "volume header")?;
        if header.format != VOLUME_FORMAT || header.endianness != ENDIANNESS {
            return Err(format_err("volume header", format!("unsupported format {}", header.format)));
        }
        let data = decode_c64(&read(path)?)?;
        Self::new(header.shape, header.times, header.fov, data)
    }
}

/// Checkpoint metadata; parameters live in a sibling `.f64` file as model
/// parameters, then the Adam first and second moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub endianness: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub iteration: usize,
    pub tau: f64,
    pub fov: Vec<f64>,
    pub n_coils: usize,
    pub num_params: usize,
    pub adam_step: u64,
    pub lr: f64,
}

/// Model and optimizer state at some iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, iteration: usize, model: &ReconstructionModel, adam: &AdamState) -> Self {
        let g = model.geometry();
        let (m, v) = adam.moments();
        Self {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                version: FORMAT_VERSION,
                endianness: ENDIANNESS.into(),
                config_hash: config.hash(),
                config: config.clone(),
                iteration,
                tau: g.tau,
                fov: g.fov.clone(),
                n_coils: g.n_coils,
                num_params: model.num_params(),
                adam_step: adam.step_count(),
                lr: adam.lr,
            },
            params: model.params(),
            adam_m: m.to_vec(),
            adam_v: v.to_vec(),
        }
    }

    pub fn binary_path(path: &Path) -> PathBuf {
        path.with_extension("f64")
    }

    /// Writes `<path>` (JSON) and `<path>.f64`.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, &self.header)?;
        let mut flat = self.params.clone();
        flat.extend_from_slice(&self.adam_m);
        flat.extend_from_slice(&self.adam_v);
        write(&Self::binary_path(path), &encode_f64(&flat))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let header: CheckpointHeader = read_json(path, "checkpoint")?;
        if header.format != CHECKPOINT_FORMAT || header.endianness != ENDIANNESS {
            return Err(format_err("checkpoint", format!("unsupported format {}", header.format)));
        }
        if header.config.hash() != header.config_hash {
            return Err(format_err("checkpoint", "config hash does not match the stored config"));
        }
        let flat = decode_f64(&read(&Self::binary_path(path))?)?;
        let n = header.num_params;
        if flat.len() != 3 * n {
            return Err(format_err("checkpoint", format!("expected {} values, found {}", 3 * n, flat.len())));
        }
        Ok(Self {
            params: flat[..n].to_vec(),
            adam_m: flat[n..2 * n].to_vec(),
            adam_v: flat[2 * n..].to_vec(),
            header,
        })
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            tau: self.header.tau,
            fov: self.header.fov.clone(),
            n_coils: self.header.n_coils,
        }
    }

    /// Rebuilds the model from the stored architecture and parameters.
    pub fn model(&self) -> Result<ReconstructionModel> {
        let cfg = &self.header.config;
        let mut model = ReconstructionModel::random(&cfg.model, self.geometry(), &mut stream_rng(cfg.seed, INIT_STREAM))?;
        if model.num_params() != self.params.len() {
            return Err(format_err("checkpoint", "parameter count does not match the stored architecture"));
        }
        model.set_params(&self.params)?;
        Ok(model)
    }

    pub fn adam(&self) -> AdamState {
        let cfg = &self.header.config;
        let mut adam = AdamState::new(self.params.len(), self.header.lr, cfg.weight_decay);
        adam.set_moments(self.adam_m.clone(), self.adam_v.clone(), self.header.adam_step);
        adam
    }
}

/// Parses a grid such as `128x128` or `64x64x32`.
pub fn parse_grid(text: &str) -> Result<Vec<usize>> {
    let dims: Vec<usize> = text
        .split(['x', 'X'])
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Validation(format!("grid {text:?}: {e}")))?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::Validation(format!("grid {text:?} must have positive sizes")));
    }
    Ok(dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::tests::tiny_config;
    use crate::synth::{simulate_acquisition, MaskKind, Preset};

    fn container() -> DatasetContainer {
        let spec = Preset::tiny().acquisition(2.0, MaskKind::Rectilinear, 5).unwrap();
        let acq = simulate_acquisition(&spec).unwrap();
        DatasetContainer {
            dataset: acq.dataset,
            mask_spec: Some(spec.mask),
            ground_truth: Some(acq.ground_truth),
        }
    }

    fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
            })
            .collect();
        files.sort();
        files
    }

    #[test]
    fn container_roundtrip_is_byte_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        container().write(&a).unwrap();
        let back = DatasetContainer::read(&a).unwrap();
        back.write(&b).unwrap();
        assert_eq!(snapshot(&a), snapshot(&b));
        let m = DatasetContainer::read_manifest(&a).unwrap();
        assert_eq!(m.mask.lines_per_frame, Some(vec![8; 4]));
        assert_eq!(m.kspace.shape, vec![2, 4, 16, 16]);
        assert!((m.effective_acceleration() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn c64_encoding_is_little_endian_pairs() {
        let bytes = encode_c64(&[C64::new(1.0, -2.0)]);
        assert_eq!(bytes, [0, 0, 128, 63, 0, 0, 0, 192]);
        assert_eq!(decode_c64(&bytes).unwrap(), vec![C64::new(1.0, -2.0)]);
        assert!(decode_c64(&bytes[..5]).is_err());
    }

    #[test]
    fn corrupt_containers_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("d");
        container().write(&dir).unwrap();
        let k = dir.join(KSPACE_FILE);
        let bytes = fs::read(&k).unwrap();
        fs::write(&k, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(DatasetContainer::read(&dir), Err(Error::Format { .. })));
        fs::write(dir.join(MANIFEST_FILE), b"{ not json").unwrap();
        assert!(matches!(DatasetContainer::read_manifest(&dir), Err(Error::Format { .. })));
        assert!(matches!(DatasetContainer::read(&tmp.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn volume_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("v.c64");
        let data: Vec<C64> = (0..2 * 3 * 4).map(|k| C64::new(k as f64 * 0.5, -(k as f64))).collect();
        let v = Volume::new(vec![2, 3, 4], vec![0.25, 0.75], vec![0.1, 0.2], data).unwrap();
        v.write(&path).unwrap();
        assert_eq!(Volume::read(&path).unwrap(), v);
        assert!(Volume::new(vec![2, 3], vec![0.1], vec![1.0], vec![]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let c = container();
        let mut cfg = RunConfig::desk();
        cfg.model = tiny_config(2);
        let model = crate::optimize::initial_model(&c.dataset, &cfg).unwrap();
        let mut adam = AdamState::new(model.num_params(), 0.01, 0.0);
        let mut p = model.params();
        let g: Vec<f64> = (0..p.len()).map(|k| (k as f64).sin()).collect();
        adam.update(&mut p, &g).unwrap();
        let mut model = model;
        model.set_params(&p).unwrap();
        let ck = Checkpoint::capture(&cfg, 1, &model, &adam);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("checkpoint.json");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.model().unwrap(), model);
        assert_eq!(back.adam(), adam);
        let again = tmp.path().join("again.json");
        back.write(&again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
        assert_eq!(fs::read(Checkpoint::binary_path(&path)).unwrap(), fs::read(Checkpoint::binary_path(&again)).unwrap());
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("128x128").unwrap(), vec![128, 128]);
        assert_eq!(parse_grid("64X64x32").unwrap(), vec![64, 64, 32]);
        assert!(parse_grid("64x").is_err());
        assert!(parse_grid("0x4").is_err());
    }
}
