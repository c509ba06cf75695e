//! MVF1 binary tensor container.
//!
//! Layout (all multi-byte values little-endian):
//!
//! ```text
//! offset  size      field
//! 0       4         magic "MVF1"
//! 4       1         dtype code: 0 = f32, 1 = u8, 2 = i32
//! 5       1         ndim
//! 6       2         zero
//! 8       8·ndim    dims as u64, outermost first
//! ...               payload, row-major, last dim fastest
//! ```
//!
//! Real-valued tensors are held as f64 in memory and stored as f32. Physical
//! spacing lives in a `<name>.meta.json` sidecar next to the tensor file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    DisplacementField, FeatureVolume, Grid, LabelStorage, LabelVolume, Spacing, Volume,
    UNIT_SPACING,
};

pub const MAGIC: [u8; 4] = *b"MVF1";
pub const HEADER_FIXED_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    U8 = 1,
    I32 = 2,
}

impl DType {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::U8),
            2 => Ok(DType::I32),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 | DType::I32 => 4,
        }
    }
}

/// How a 4D real tensor with a leading dimension of 3 should be interpreted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Role {
    /// 4D real tensors decode as features.
    #[default]
    Auto,
    /// 4D real tensors with a leading 3 decode as displacement fields.
    Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    Volume(Volume),
    Features(FeatureVolume),
    Labels(LabelVolume),
    Field(DisplacementField),
}

impl Tensor {
    pub fn kind(&self) -> &'static str {
        match self {
            Tensor::Volume(_) => "volume",
            Tensor::Features(_) => "features",
            Tensor::Labels(_) => "labels",
            Tensor::Field(_) => "displacement field",
        }
    }

    fn dims_u64(&self) -> Vec<u64> {
        let (lead, d) = match self {
            Tensor::Volume(v) => (None, v.dims()),
            Tensor::Labels(l) => (None, l.dims()),
            Tensor::Features(f) => (Some(f.channels()), f.dims()),
            Tensor::Field(f) => (Some(3), f.dims()),
        };
        lead.into_iter().chain(d).map(|x| x as u64).collect()
    }
}

impl From<Volume> for Tensor {
    fn from(v: Volume) -> Self {
        Tensor::Volume(v)
    }
}
impl From<FeatureVolume> for Tensor {
    fn from(v: FeatureVolume) -> Self {
        Tensor::Features(v)
    }
}
impl From<LabelVolume> for Tensor {
    fn from(v: LabelVolume) -> Self {
        Tensor::Labels(v)
    }
}
impl From<DisplacementField> for Tensor {
    fn from(v: DisplacementField) -> Self {
        Tensor::Field(v)
    }
}

fn reals_to_f32(values: &[f64], out: &mut Vec<u8>) -> Result<()> {
    for (i, &v) in values.iter().enumerate() {
        let single = v as f32;
        if !single.is_finite() {
            return Err(Error::NonFinite(format!(
                "element {i} ({v}) is not representable as f32"
            )));
        }
        out.extend_from_slice(&single.to_le_bytes());
    }
    Ok(())
}

/// Serializes a tensor to MVF bytes.
pub fn encode(tensor: &Tensor) -> Result<Vec<u8>> {
    let dims = tensor.dims_u64();
    let dtype = match tensor {
        Tensor::Labels(l) => match l.storage() {
            LabelStorage::U8 => DType::U8,
            LabelStorage::I32 => DType::I32,
        },
        _ => DType::F32,
    };
    let count: usize = dims.iter().product::<u64>() as usize;
    let mut out = Vec::with_capacity(HEADER_FIXED_LEN + 8 * dims.len() + count * dtype.size());
    out.extend_from_slice(&MAGIC);
    out.push(dtype as u8);
    out.push(dims.len() as u8);
    out.extend_from_slice(&[0, 0]);
    for d in &dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    match tensor {
        Tensor::Volume(v) => reals_to_f32(v.data(), &mut out)?,
        Tensor::Features(f) => reals_to_f32(f.data(), &mut out)?,
        Tensor::Field(f) => reals_to_f32(f.data(), &mut out)?,
        Tensor::Labels(l) => match dtype {
            DType::U8 => out.extend(l.labels().iter().map(|&x| x as u8)),
            _ => {
                for &x in l.labels() {
                    out.extend_from_slice(&(x as i32).to_le_bytes());
                }
            }
        },
    }
    Ok(out)
}

/// Parses MVF bytes. `role` decides whether a `(3, H, W, D)` real tensor is a field.
pub fn decode(bytes: &[u8], role: Role) -> Result<Tensor> {
    if bytes.len() < HEADER_FIXED_LEN {
        return Err(Error::Truncated {
            expected: HEADER_FIXED_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let dtype = DType::from_code(bytes[4])?;
    let ndim = bytes[5] as usize;
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(Error::invalid("reserved header bytes must be zero"));
    }
    let header_len = HEADER_FIXED_LEN + 8 * ndim;
    if bytes.len() < header_len {
        return Err(Error::Truncated {
            expected: header_len,
            found: bytes.len(),
        });
    }
    let dims: Vec<u64> = bytes[HEADER_FIXED_LEN..header_len]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|c| c.checked_mul(dtype.size() as u64))
        .and_then(|b| usize::try_from(b).ok())
        .and_then(|b| b.checked_add(header_len))
        .ok_or_else(|| Error::DimsOverflow(dims.clone()))?;
    if bytes.len() < count {
        return Err(Error::Truncated {
            expected: count,
            found: bytes.len(),
        });
    }
    if bytes.len() > count {
        return Err(Error::shape(format!(
            "{} trailing bytes after payload",
            bytes.len() - count
        )));
    }
    let payload = &bytes[header_len..];
    let udims: Vec<usize> = dims.iter().map(|&d| d as usize).collect();

    match (dtype, ndim) {
        (DType::F32, 3) => {
            let dims3 = [udims[0], udims[1], udims[2]];
            Ok(Tensor::Volume(Volume::new(dims3, read_f32(payload))?))
        }
        (DType::U8 | DType::I32, 3) => {
            let dims3 = [udims[0], udims[1], udims[2]];
            let (labels, storage) = if dtype == DType::U8 {
                (
                    payload.iter().map(|&b| b as u32).collect(),
                    LabelStorage::U8,
                )
            } else {
                let mut labels = Vec::with_capacity(payload.len() / 4);
                for c in payload.chunks_exact(4) {
                    let v = i32::from_le_bytes(c.try_into().unwrap());
                    if v < 0 {
                        return Err(Error::invalid(format!("negative label {v}")));
                    }
                    labels.push(v as u32);
                }
                (labels, LabelStorage::I32)
            };
            Ok(Tensor::Labels(LabelVolume::with_storage(
                dims3, labels, storage,
            )?))
        }
        (DType::F32, 4) => {
            let dims3 = [udims[1], udims[2], udims[3]];
            let values = read_f32(payload);
            if role == Role::Vector {
                if udims[0] != 3 {
                    return Err(Error::shape(format!(
                        "vector role needs a leading dim of 3, found {}",
                        udims[0]
                    )));
                }
                Ok(Tensor::Field(DisplacementField::new(dims3, values)?))
            } else {
                Ok(Tensor::Features(FeatureVolume::new(
                    udims[0], dims3, values,
                )?))
            }
        }
        (dtype, ndim) => Err(Error::shape(format!(
            "unsupported tensor: dtype {dtype:?} with {ndim} dims"
        ))),
    }
}

fn read_f32(payload: &[u8]) -> Vec<f64> {
    payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect()
}

pub fn write_mvf(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let bytes = encode(tensor)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_mvf(path: impl AsRef<Path>, role: Role) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    decode(&bytes, role)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    spacing: [f64; 3],
}

/// `scan.mvf` → `scan.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn write_spacing(path: impl AsRef<Path>, spacing: Spacing) -> Result<()> {
    let text = serde_json::to_string_pretty(&Sidecar { spacing })?;
    fs::write(sidecar_path(path.as_ref()), text)?;
    Ok(())
}

/// Spacing from the sidecar of `path`, or unit spacing when none exists.
pub fn read_spacing(path: impl AsRef<Path>) -> Result<Spacing> {
    let side = sidecar_path(path.as_ref());
    if !side.exists() {
        return Ok(UNIT_SPACING);
    }
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(side)?)?;
    if sidecar.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::invalid(format!(
            "sidecar spacing {:?} must be positive",
            sidecar.spacing
        )));
    }
    Ok(sidecar.spacing)
}

/// Writes a volume and, when its spacing is not unit, its spacing sidecar.
pub fn write_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    let path = path.as_ref();
    write_mvf(path, &Tensor::Volume(vol.clone()))?;
    if vol.spacing() != UNIT_SPACING {
        write_spacing(path, vol.spacing())?;
    }
    Ok(())
}

fn wrong_kind(path: &Path, wanted: &str, got: &Tensor) -> Error {
    Error::shape(format!(
        "{}: expected {wanted}, found {}",
        path.display(),
        got.kind()
    ))
}

/// Reads a scalar volume together with its sidecar spacing.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match read_mvf(path, Role::Auto)? {
        Tensor::Volume(mut v) => {
            v.set_spacing(read_spacing(path)?)?;
            Ok(v)
        }
        other => Err(wrong_kind(path, "volume", &other)),
    }
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureVolume> {
    let path = path.as_ref();
    match read_mvf(path, Role::Auto)? {
        Tensor::Features(f) => Ok(f),
        // A single-channel feature grid written as 3D is still usable.
        Tensor::Volume(v) => FeatureVolume::new(1, v.dims(), v.into_data()),
        other => Err(wrong_kind(path, "features", &other)),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    match read_mvf(path, Role::Auto)? {
        Tensor::Labels(l) => Ok(l),
        other => Err(wrong_kind(path, "labels", &other)),
    }
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    match read_mvf(path, Role::Vector)? {
        Tensor::Field(f) => Ok(f),
        other => Err(wrong_kind(path, "displacement field", &other)),
    }
}

/// Number of bytes an encoded tensor of these dims occupies.
pub fn encoded_len(dtype: DType, dims: &[u64]) -> usize {
    HEADER_FIXED_LEN + 8 * dims.len() + dims.iter().product::<u64>() as usize * dtype.size()
}
