//! Feature embeddings: slice-wise encoder adaptation geometry, the built-in
//! hand-crafted extractor, channel reduction and feature pyramids.
//!
//! The adaptation geometry prepares every axial slice for a square 2D encoder
//! (pad to a square, upsample to the encoder input size `k`) and maps the coarse
//! per-slice embeddings back onto the original voxel grid (stack, upsample, crop).
//! The encoder itself is external; anything that consumes `k×k` slices and returns
//! `C×h×w` grids fits.

use crate::error::{Error, Result};
use crate::field::downsample;
use crate::filter::{box_sum, central_difference, laplacian};
use crate::tensor::{linear_index, voxel_count, Dims, FeatureVolume, Grid, Volume};

/// Number of channels produced by [`extract_fallback_features`].
pub const FALLBACK_CHANNELS: usize = 8;

/// Padding and resize parameters for one volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdaptationPlan {
    pub orig_dims: Dims,
    /// Side of the square padded slice (`H' = W'`).
    pub padded: usize,
    /// Encoder input side `k`.
    pub encoder_size: usize,
    /// Leading zero rows along H.
    pub pad_h: usize,
    /// Leading zero columns along W.
    pub pad_w: usize,
}

impl AdaptationPlan {
    pub fn padded_dims(&self) -> [usize; 2] {
        [self.padded, self.padded]
    }
}

/// Square pad to `max(H, W)` with centered offsets.
pub fn plan_adaptation(dims: Dims, encoder_size: usize) -> Result<AdaptationPlan> {
    if dims.contains(&0) {
        return Err(Error::invalid(format!("dims {dims:?} must be positive")));
    }
    let padded = dims[0].max(dims[1]);
    if encoder_size < padded {
        return Err(Error::invalid(format!(
            "encoder size {encoder_size} is smaller than the padded slice side {padded}"
        )));
    }
    Ok(AdaptationPlan {
        orig_dims: dims,
        padded,
        encoder_size,
        pad_h: (padded - dims[0]) / 2,
        pad_w: (padded - dims[1]) / 2,
    })
}

/// A square single-channel 2D image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice2D {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Slice2D {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.size + c]
    }
}

/// Per-slice embedding grid `C × h × w` returned by an encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceFeatures {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

#[inline]
fn align_corners(t: usize, src: usize, dst: usize) -> f64 {
    if dst <= 1 || src <= 1 {
        0.0
    } else {
        t as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

/// Bilinear align-corners resize of one row-major plane.
fn resize_plane(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let lerp_axis = |p: f64, n: usize| -> (usize, usize, f64) {
        if n == 1 {
            return (0, 0, 0.0);
        }
        let i0 = (p.floor() as usize).min(n - 2);
        (i0, i0 + 1, p - i0 as f64)
    };
    let mut out = Vec::with_capacity(dh * dw);
    for r in 0..dh {
        let (r0, r1, tr) = lerp_axis(align_corners(r, sh, dh), sh);
        for c in 0..dw {
            let (c0, c1, tc) = lerp_axis(align_corners(c, sw, dw), sw);
            let top = (1.0 - tc) * src[r0 * sw + c0] + tc * src[r0 * sw + c1];
            let bottom = (1.0 - tc) * src[r1 * sw + c0] + tc * src[r1 * sw + c1];
            out.push((1.0 - tr) * top + tr * bottom);
        }
    }
    out
}

/// Slices the volume along depth, zero-pads each slice into the square plan and
/// upsamples it to `k × k`.
pub fn apply_adaptation(vol: &Volume, plan: &AdaptationPlan) -> Result<Vec<Slice2D>> {
    let dims = vol.dims();
    if dims != plan.orig_dims {
        return Err(Error::shape(format!(
            "volume dims {dims:?} do not match plan {:?}",
            plan.orig_dims
        )));
    }
    let p = plan.padded;
    let k = plan.encoder_size;
    let slices = (0..dims[2])
        .map(|z| {
            let mut padded = vec![0.0; p * p];
            for i in 0..dims[0] {
                for j in 0..dims[1] {
                    padded[(i + plan.pad_h) * p + j + plan.pad_w] = vol.at(i, j, z);
                }
            }
            Slice2D {
                size: k,
                data: resize_plane(&padded, p, p, k, k),
            }
        })
        .collect();
    Ok(slices)
}

/// Stacks per-slice embeddings along depth, upsamples each slice plane to the
/// padded square and crops the padding away, giving `(C, H, W, D)`.
pub fn restore_features(slices: &[SliceFeatures], plan: &AdaptationPlan) -> Result<FeatureVolume> {
    let dims = plan.orig_dims;
    if slices.len() != dims[2] {
        return Err(Error::shape(format!(
            "expected {} slice embeddings, got {}",
            dims[2],
            slices.len()
        )));
    }
    let first = &slices[0];
    if first.channels == 0 || first.height == 0 || first.width == 0 {
        return Err(Error::invalid("empty slice embedding"));
    }
    for (z, s) in slices.iter().enumerate() {
        if (s.channels, s.height, s.width) != (first.channels, first.height, first.width)
            || s.data.len() != s.channels * s.height * s.width
        {
            return Err(Error::shape(format!(
                "slice {z} embedding has shape ({}, {}, {}) / {} values, expected ({}, {}, {})",
                s.channels,
                s.height,
                s.width,
                s.data.len(),
                first.channels,
                first.height,
                first.width
            )));
        }
    }
    let channels = first.channels;
    let (h, w) = (first.height, first.width);
    let p = plan.padded;
    let n = voxel_count(dims);
    let mut data = vec![0.0; channels * n];
    for (z, s) in slices.iter().enumerate() {
        for c in 0..channels {
            let plane = &s.data[c * h * w..(c + 1) * h * w];
            let up = resize_plane(plane, h, w, p, p);
            for i in 0..dims[0] {
                for j in 0..dims[1] {
                    data[c * n + linear_index(dims, i, j, z)] =
                        up[(i + plan.pad_h) * p + j + plan.pad_w];
                }
            }
        }
    }
    FeatureVolume::new(channels, dims, data)
}

fn standardize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    // relative threshold so rounding noise in a constant channel stays zero
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if var.sqrt() <= 1e-12 * scale {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let inv = 1.0 / var.sqrt();
    values.iter_mut().for_each(|v| *v = (*v - mean) * inv);
}

/// Deterministic 8-channel structural embedding used when no external encoder
/// output is supplied.
///
/// Channels: standardized intensity, the three central-difference gradients,
/// gradient magnitude, 3×3×3 local mean, 3×3×3 local standard deviation and the
/// six-neighbor Laplacian. Every channel is standardized over the volume; a
/// channel with zero variance becomes all zeros.
pub fn extract_fallback_features(vol: &Volume) -> Result<FeatureVolume> {
    let dims = vol.dims();
    let mut intensity = vol.data().to_vec();
    standardize(&mut intensity);

    let gx = central_difference(&intensity, dims, 0);
    let gy = central_difference(&intensity, dims, 1);
    let gz = central_difference(&intensity, dims, 2);
    let grad_mag: Vec<f64> = (0..intensity.len())
        .map(|i| (gx[i] * gx[i] + gy[i] * gy[i] + gz[i] * gz[i]).sqrt())
        .collect();
    let sum = box_sum(&intensity, dims, 1);
    let squares: Vec<f64> = intensity.iter().map(|v| v * v).collect();
    let sum_sq = box_sum(&squares, dims, 1);
    let local_mean: Vec<f64> = sum.iter().map(|s| s / 27.0).collect();
    let local_std: Vec<f64> = sum_sq
        .iter()
        .zip(&local_mean)
        .map(|(s2, m)| {
            // running sums leave ~1e-17 residue in flat regions; keep those at zero
            let var = s2 / 27.0 - m * m;
            if var > 1e-12 {
                var.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let lap = laplacian(&intensity, dims);

    let mut channels = vec![intensity, gx, gy, gz, grad_mag, local_mean, local_std, lap];
    channels.iter_mut().for_each(|c| standardize(c));
    FeatureVolume::from_channels(dims, channels)
}

/// Fixed stand-in for a learned channel-reduction head: contiguous channel groups
/// averaged into `target` outputs.
pub fn reduce_channels(f: &FeatureVolume, target: usize) -> Result<FeatureVolume> {
    let c = f.channels();
    if target == 0 || target > c {
        return Err(Error::invalid(format!(
            "cannot reduce {c} channels to {target}"
        )));
    }
    if target == c {
        return Ok(f.clone());
    }
    let n = voxel_count(f.dims());
    let mut data = vec![0.0; target * n];
    for j in 0..target {
        let (lo, hi) = channel_group(c, target, j);
        let out = &mut data[j * n..(j + 1) * n];
        for ch in lo..hi {
            out.iter_mut().zip(f.channel(ch)).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / (hi - lo) as f64;
        out.iter_mut().for_each(|o| *o *= inv);
    }
    FeatureVolume::new(target, f.dims(), data)
}

/// Channel range `[lo, hi)` of output group `j`. Groups are `⌈C/C'⌉` wide when
/// that partitions the channels without an empty group, otherwise the split is
/// balanced (`⌊jC/C'⌋` boundaries).
pub fn channel_group(channels: usize, target: usize, j: usize) -> (usize, usize) {
    let width = channels.div_ceil(target);
    if width * (target - 1) < channels {
        (j * width, ((j + 1) * width).min(channels))
    } else {
        (j * channels / target, (j + 1) * channels / target)
    }
}

/// Multi-resolution features, finest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureVolume>,
}

impl FeaturePyramid {
    pub fn levels(&self) -> &[FeatureVolume] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Level `l` counted from 1 (full resolution).
    pub fn level(&self, l: usize) -> &FeatureVolume {
        &self.levels[l - 1]
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels()
    }

    pub fn from_levels(levels: Vec<FeatureVolume>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("a pyramid needs at least one level"));
        }
        if levels.iter().any(|l| l.channels() != levels[0].channels()) {
            return Err(Error::shape("pyramid levels differ in channel count"));
        }
        Ok(Self { levels })
    }
}

/// Checks that `dims` support `levels` halvings, each axis at least `2^(levels-1)`.
pub fn check_pyramid_depth(dims: Dims, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::invalid("pyramid depth must be at least 1"));
    }
    let min = 1usize << (levels - 1);
    if dims.iter().any(|&d| d < min) {
        return Err(Error::invalid(format!(
            "dims {dims:?} are too small for {levels} pyramid levels (need {min} per axis)"
        )));
    }
    Ok(())
}

/// Level 1 is `f`; each further level is a 2× average pooling of the previous one.
pub fn build_pyramid(f: &FeatureVolume, levels: usize) -> Result<FeaturePyramid> {
    check_pyramid_depth(f.dims(), levels)?;
    let mut out = vec![f.clone()];
    for _ in 1..levels {
        let next = downsample(out.last().unwrap())?;
        out.push(next);
    }
    Ok(FeaturePyramid { levels: out })
}
