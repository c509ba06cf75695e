//! Grid containers shared by every stage of the engine.
//!
//! All grids are stored row-major over `(H, W, D)` with `D` fastest. Multi-channel
//! grids (features, displacement fields) are channel-first: every channel is a
//! contiguous block of `H·W·D` values.

use crate::error::{Error, Result};

/// Spatial extent `(H, W, D)` in voxels.
pub type Dims = [usize; 3];

/// Millimeters per voxel along each axis.
pub type Spacing = [f64; 3];

pub const UNIT_SPACING: Spacing = [1.0, 1.0, 1.0];

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, i: usize, j: usize, k: usize) -> usize {
    (i * dims[1] + j) * dims[2] + k
}

/// Inverse of [`linear_index`].
#[inline]
pub fn grid_position(dims: Dims, idx: usize) -> [usize; 3] {
    let k = idx % dims[2];
    let rest = idx / dims[2];
    [rest / dims[1], rest % dims[1], k]
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::invalid(format!("dims {dims:?} must be positive")));
    }
    Ok(())
}

fn check_finite(what: &str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(Error::NonFinite(format!("{what} element {pos}"))),
        None => Ok(()),
    }
}

/// A channel-first stack of scalar grids. Implemented by every real-valued tensor
/// so resampling and pooling can be written once.
pub trait Grid: Sized {
    fn dims(&self) -> Dims;
    fn channels(&self) -> usize;
    fn values(&self) -> &[f64];

    /// Rebuild a tensor of the same kind from raw channel-first values.
    fn with_values(&self, dims: Dims, values: Vec<f64>) -> Self;

    /// Whether the stored values are lengths measured in voxels, so a change of grid
    /// resolution must rescale them.
    fn is_displacement() -> bool {
        false
    }

    fn channel(&self, c: usize) -> &[f64] {
        let n = voxel_count(self.dims());
        &self.values()[c * n..(c + 1) * n]
    }
}

/// Scalar 3D image with physical voxel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        Self::with_spacing(dims, UNIT_SPACING, data)
    }

    pub fn with_spacing(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != voxel_count(dims) {
            return Err(Error::shape(format!(
                "volume dims {dims:?} need {} values, got {}",
                voxel_count(dims),
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::invalid(format!(
                "spacing {spacing:?} must be positive"
            )));
        }
        check_finite("volume", &data)?;
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: Dims, value: f64) -> Result<Self> {
        Self::new(dims, vec![value; voxel_count(dims)])
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(voxel_count(dims));
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn set_spacing(&mut self, spacing: Spacing) -> Result<()> {
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::invalid(format!(
                "spacing {spacing:?} must be positive"
            )));
        }
        self.spacing = spacing;
        Ok(())
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[linear_index(self.dims, i, j, k)]
    }
}

impl Grid for Volume {
    fn dims(&self) -> Dims {
        self.dims
    }
    fn channels(&self) -> usize {
        1
    }
    fn values(&self) -> &[f64] {
        &self.data
    }
    fn with_values(&self, dims: Dims, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), voxel_count(dims));
        Self {
            dims,
            spacing: self.spacing,
            data: values,
        }
    }
}

/// Channel-first embedding grid aligned to a [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    channels: usize,
    dims: Dims,
    data: Vec<f64>,
}

impl FeatureVolume {
    pub fn new(channels: usize, dims: Dims, data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        if channels == 0 {
            return Err(Error::invalid("feature volume needs at least one channel"));
        }
        if data.len() != channels * voxel_count(dims) {
            return Err(Error::shape(format!(
                "feature dims ({channels}, {dims:?}) need {} values, got {}",
                channels * voxel_count(dims),
                data.len()
            )));
        }
        check_finite("feature volume", &data)?;
        Ok(Self {
            channels,
            dims,
            data,
        })
    }

    /// Stacks equally-shaped scalar channels.
    pub fn from_channels(dims: Dims, channels: Vec<Vec<f64>>) -> Result<Self> {
        let c = channels.len();
        let data: Vec<f64> = channels.into_iter().flatten().collect();
        Self::new(c, dims, data)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, c: usize, i: usize, j: usize, k: usize) -> f64 {
        self.data[c * voxel_count(self.dims) + linear_index(self.dims, i, j, k)]
    }
}

impl Grid for FeatureVolume {
    fn dims(&self) -> Dims {
        self.dims
    }
    fn channels(&self) -> usize {
        self.channels
    }
    fn values(&self) -> &[f64] {
        &self.data
    }
    fn with_values(&self, dims: Dims, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.channels * voxel_count(dims));
        Self {
            channels: self.channels,
            dims,
            data: values,
        }
    }
}

/// On-disk integer width of a label grid. Kept so a file read and written back
/// reproduces its bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelStorage {
    U8,
    I32,
}

/// Integer segmentation grid; label 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    labels: Vec<u32>,
    label_set: Vec<u32>,
    storage: LabelStorage,
}

impl LabelVolume {
    pub fn new(dims: Dims, labels: Vec<u32>) -> Result<Self> {
        let max = labels.iter().copied().max().unwrap_or(0);
        let storage = if max <= u8::MAX as u32 {
            LabelStorage::U8
        } else {
            LabelStorage::I32
        };
        Self::with_storage(dims, labels, storage)
    }

    pub fn with_storage(dims: Dims, labels: Vec<u32>, storage: LabelStorage) -> Result<Self> {
        check_dims(dims)?;
        if labels.len() != voxel_count(dims) {
            return Err(Error::shape(format!(
                "label dims {dims:?} need {} values, got {}",
                voxel_count(dims),
                labels.len()
            )));
        }
        let limit = match storage {
            LabelStorage::U8 => u8::MAX as u32,
            LabelStorage::I32 => i32::MAX as u32,
        };
        if let Some(bad) = labels.iter().find(|&&l| l > limit) {
            return Err(Error::invalid(format!(
                "label {bad} does not fit {storage:?} storage"
            )));
        }
        let mut label_set = labels.clone();
        label_set.sort_unstable();
        label_set.dedup();
        Ok(Self {
            dims,
            labels,
            label_set,
            storage,
        })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> u32) -> Result<Self> {
        let mut labels = Vec::with_capacity(voxel_count(dims));
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    labels.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, labels)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Sorted distinct labels present, background included when present.
    pub fn label_set(&self) -> &[u32] {
        &self.label_set
    }

    pub fn foreground_labels(&self) -> Vec<u32> {
        self.label_set.iter().copied().filter(|&l| l != 0).collect()
    }

    pub fn storage(&self) -> LabelStorage {
        self.storage
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> u32 {
        self.labels[linear_index(self.dims, i, j, k)]
    }

    pub fn mask(&self, label: u32) -> Vec<bool> {
        self.labels.iter().map(|&l| l == label).collect()
    }

    /// One soft-mask channel per requested label, 1.0 inside and 0.0 outside.
    pub fn one_hot(&self, labels: &[u32]) -> Result<FeatureVolume> {
        let channels = labels
            .iter()
            .map(|&target| {
                self.labels
                    .iter()
                    .map(|&l| if l == target { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        FeatureVolume::from_channels(self.dims, channels)
    }
}

/// Per-voxel 3-vectors in voxel units, component-first (all `u_x`, then `u_y`,
/// then `u_z`). A stationary velocity field uses the same representation.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    dims: Dims,
    data: Vec<f64>,
}

/// A stationary velocity field, integrated by scaling and squaring.
pub type VelocityField = DisplacementField;

impl DisplacementField {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != 3 * voxel_count(dims) {
            return Err(Error::shape(format!(
                "field dims {dims:?} need {} values, got {}",
                3 * voxel_count(dims),
                data.len()
            )));
        }
        check_finite("displacement field", &data)?;
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "dims must be positive");
        Self {
            dims,
            data: vec![0.0; 3 * voxel_count(dims)],
        }
    }

    pub fn constant(dims: Dims, value: [f64; 3]) -> Self {
        Self::from_fn(dims, |_, _, _| value)
    }

    /// Builds a field by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> [f64; 3]) -> Self {
        let n = voxel_count(dims);
        let mut field = Self::zeros(dims);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let idx = linear_index(dims, i, j, k);
                    let v = f(i, j, k);
                    for (c, value) in v.into_iter().enumerate() {
                        field.data[c * n + idx] = value;
                    }
                }
            }
        }
        field
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = voxel_count(self.dims);
        &self.data[c * n..(c + 1) * n]
    }

    pub fn vector(&self, idx: usize) -> [f64; 3] {
        let n = voxel_count(self.dims);
        [self.data[idx], self.data[n + idx], self.data[2 * n + idx]]
    }

    pub fn vector_at(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        self.vector(linear_index(self.dims, i, j, k))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Elementwise sum; dims must match.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "field dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(Self {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Largest per-voxel Euclidean norm.
    pub fn max_norm(&self) -> f64 {
        let n = voxel_count(self.dims);
        (0..n)
            .map(|idx| {
                let v = self.vector(idx);
                (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Grid for DisplacementField {
    fn dims(&self) -> Dims {
        self.dims
    }
    fn channels(&self) -> usize {
        3
    }
    fn values(&self) -> &[f64] {
        &self.data
    }
    fn with_values(&self, dims: Dims, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), 3 * voxel_count(dims));
        Self { dims, data: values }
    }
    fn is_displacement() -> bool {
        true
    }
}
