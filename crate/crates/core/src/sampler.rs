//! Mixed continuous/discrete sampling of coils and space-time coordinates.
//!
//! Each coordinate direction is sampled independently: a number of points
//! uniformly on the interval and a number of nodes, with replacement, from
//! the axis partition (the frame times for the time axis, the acquisition
//! grid for the spatial axes). The regularizers are evaluated on the product
//! grid of these per-axis lists. Data-consistency frames are drawn without
//! replacement from the recorded frames.

use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::ModelError;
use crate::forward::KSpaceDataset;
use crate::nfe::EvalGrid;

/// Number of coils per batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CoilCount {
    #[default]
    All,
    Count(usize),
}

impl Serialize for CoilCount {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            CoilCount::All => s.serialize_str("all"),
            CoilCount::Count(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for CoilCount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = CoilCount;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("\"all\" or a coil count")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<CoilCount, E> {
                Ok(CoilCount::Count(v as usize))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<CoilCount, E> {
                u64::try_from(v).map(|v| CoilCount::Count(v as usize)).map_err(E::custom)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<CoilCount, E> {
                if v.eq_ignore_ascii_case("all") {
                    Ok(CoilCount::All)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// Continuous and discrete sample counts of one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisBatch {
    pub continuous: usize,
    pub discrete: usize,
}

impl AxisBatch {
    /// The same count from the interval and from the partition.
    pub const fn same(n: usize) -> Self {
        Self {
            continuous: n,
            discrete: n,
        }
    }

    pub fn total(&self) -> usize {
        self.continuous + self.discrete
    }
}

/// Batch sizes of one optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSpec {
    pub coils: CoilCount,
    pub time: AxisBatch,
    /// One entry per spatial axis.
    pub space: Vec<AxisBatch>,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            coils: CoilCount::All,
            time: AxisBatch::same(8),
            space: vec![AxisBatch::same(64); 2],
        }
    }
}

impl BatchSpec {
    pub fn validate(&self, spatial_dim: usize) -> Result<(), ModelError> {
        if self.space.len() != spatial_dim {
            return Err(ModelError::Config(format!(
                "batch spec has {} spatial axes, data has {spatial_dim}",
                self.space.len()
            )));
        }
        if self.time.total() == 0 || self.space.iter().any(|a| a.total() == 0) {
            return Err(ModelError::Config("every axis needs at least one sample".into()));
        }
        if self.coils == CoilCount::Count(0) {
            return Err(ModelError::Config("coil batch must be positive".into()));
        }
        Ok(())
    }
}

/// Axis domains and partitions to sample from.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGeometry {
    /// Interval per axis, time first.
    pub domain: Vec<(f64, f64)>,
    /// Partition nodes per axis, time first.
    pub partitions: Vec<Vec<f64>>,
    pub n_coils: usize,
}

impl From<&KSpaceDataset> for SamplingGeometry {
    fn from(d: &KSpaceDataset) -> Self {
        let mut domain = vec![(0.0, d.tau())];
        domain.extend(d.fov().iter().map(|&s| (-0.5 * s, 0.5 * s)));
        let mut partitions = vec![d.times().to_vec()];
        partitions.extend(d.spatial_axes());
        Self {
            domain,
            partitions,
            n_coils: d.n_coils(),
        }
    }
}

/// Origin of a sampled coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleKind {
    Continuous,
    /// Partition node with its index.
    Node(usize),
}

/// Coordinates drawn for one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisSamples {
    pub coords: Vec<f64>,
    pub kinds: Vec<SampleKind>,
}

/// One stochastic batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    /// Coils, distinct.
    pub coils: Vec<usize>,
    /// Frames for the data term, distinct.
    pub data_frames: Vec<usize>,
    /// Time axis first, then the spatial axes.
    pub axes: Vec<AxisSamples>,
}

impl SampleSet {
    /// Product grid of all sampled coordinates.
    pub fn grid(&self) -> Result<EvalGrid, ModelError> {
        EvalGrid::new(self.axes.iter().map(|a| a.coords.clone()).collect())
    }
}

/// Draws one batch.
pub fn draw_batch<R: Rng + ?Sized>(spec: &BatchSpec, geometry: &SamplingGeometry, rng: &mut R) -> Result<SampleSet, ModelError> {
    let spatial = geometry.domain.len().saturating_sub(1);
    spec.validate(spatial)?;
    if geometry.partitions.len() != geometry.domain.len() || geometry.partitions.iter().any(Vec::is_empty) {
        return Err(ModelError::Config("every axis needs a non-empty partition".into()));
    }
    let n_coils = geometry.n_coils;
    let b_coils = match spec.coils {
        CoilCount::All => n_coils,
        CoilCount::Count(n) if n > n_coils => {
            log::warn!("coil batch {n} exceeds the {n_coils} available coils; using all");
            n_coils
        }
        CoilCount::Count(n) => n,
    };
    let coils = if b_coils == n_coils {
        (0..n_coils).collect()
    } else {
        index::sample(rng, n_coils, b_coils).into_vec()
    };
    let n_frames = geometry.partitions[0].len();
    let b_frames = spec.time.discrete.max(1).min(n_frames);
    let data_frames = index::sample(rng, n_frames, b_frames).into_vec();

    let counts = std::iter::once(spec.time).chain(spec.space.iter().copied());
    let axes = counts
        .zip(geometry.domain.iter().zip(&geometry.partitions))
        .map(|(batch, (&(lo, hi), nodes))| {
            let mut coords = Vec::with_capacity(batch.total());
            let mut kinds = Vec::with_capacity(batch.total());
            for _ in 0..batch.continuous {
                coords.push(rng.gen_range(lo..=hi));
                kinds.push(SampleKind::Continuous);
            }
            for _ in 0..batch.discrete {
                let i = rng.gen_range(0..nodes.len());
                coords.push(nodes[i]);
                kinds.push(SampleKind::Node(i));
            }
            AxisSamples { coords, kinds }
        })
        .collect();
    Ok(SampleSet {
        coils,
        data_frames,
        axes,
    })
}
