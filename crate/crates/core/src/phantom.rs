//! Synthetic phantoms with known deformations, and the contrast/noise
//! perturbations used for robustness checks.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{integrate_velocity, warp, warp_labels, DEFAULT_SQUARING_STEPS};
use crate::filter::gaussian_blur;
use crate::tensor::{Dims, DisplacementField, Grid, LabelVolume, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    Spheres,
    Slabs,
    CardiacLike,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spheres" => Ok(Self::Spheres),
            "slabs" => Ok(Self::Slabs),
            "cardiac-like" => Ok(Self::CardiacLike),
            other => Err(Error::invalid(format!("unknown phantom kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeformKind {
    None,
    Translate,
    Svf,
}

impl std::str::FromStr for DeformKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "translate" => Ok(Self::Translate),
            "svf" => Ok(Self::Svf),
            other => Err(Error::invalid(format!("unknown deformation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub kind: PhantomKind,
    pub dims: Dims,
    pub deform: DeformKind,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            kind: PhantomKind::Spheres,
            dims: [64, 64, 64],
            deform: DeformKind::Svf,
            gamma: 1.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

/// A phantom pair with its ground truth: `fixed = moving ∘ (id + truth)`.
#[derive(Clone, Debug)]
pub struct SynthCase {
    pub moving: Volume,
    pub fixed: Volume,
    pub moving_labels: LabelVolume,
    pub fixed_labels: LabelVolume,
    pub truth: DisplacementField,
    pub moving_perturbed: Volume,
    pub fixed_perturbed: Volume,
}

/// Smooth low-amplitude texture so no intensity window is flat.
fn texture(p: [f64; 3], phase: [f64; 3], scale: f64) -> f64 {
    let f = 2.0 * std::f64::consts::PI / scale;
    (f * p[0] + phase[0]).sin() * (0.8 * f * p[1] + phase[1]).cos()
        + 0.7 * (1.1 * f * p[2] + phase[2]).sin() * (0.6 * f * (p[0] + p[1])).cos()
}

fn normalize_unit(values: &mut [f64]) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range > 0.0 {
        values.iter_mut().for_each(|v| *v = (*v - min) / range);
    }
}

struct Blob {
    label: u32,
    center: [f64; 3],
    radii: [f64; 3],
    intensity: f64,
}

fn render(
    dims: Dims,
    rng: &mut ChaCha8Rng,
    background: f64,
    blobs: &[Blob],
) -> Result<(Volume, LabelVolume)> {
    let side = dims.iter().copied().min().unwrap() as f64;
    let phase = [
        rng.gen_range(0.0..TAU),
        rng.gen_range(0.0..TAU),
        rng.gen_range(0.0..TAU),
    ];
    let labels = LabelVolume::from_fn(dims, |i, j, k| {
        let p = [i as f64, j as f64, k as f64];
        let mut out = 0;
        for b in blobs {
            let r2: f64 = (0..3)
                .map(|a| ((p[a] - b.center[a]) / b.radii[a]).powi(2))
                .sum();
            if r2 <= 1.0 {
                out = b.label;
            }
        }
        out
    })?;
    let base: Vec<f64> = labels
        .labels()
        .iter()
        .map(|&l| {
            blobs
                .iter()
                .rev()
                .find(|b| b.label == l)
                .map_or(background, |b| b.intensity)
        })
        .collect();
    let textured = Volume::from_fn(dims, |i, j, k| {
        let p = [i as f64, j as f64, k as f64];
        let idx = crate::tensor::linear_index(dims, i, j, k);
        base[idx] + 0.06 * texture(p, phase, (0.25 * side).max(4.0))
    })?;
    let mut data = gaussian_blur(textured.data(), dims, 0.7);
    normalize_unit(&mut data);
    Ok((Volume::new(dims, data)?, labels))
}

fn spheres(dims: Dims, rng: &mut ChaCha8Rng) -> Result<(Volume, LabelVolume)> {
    let side = dims.iter().copied().min().unwrap() as f64;
    let count = 5;
    let mut blobs: Vec<Blob> = Vec::new();
    let mut attempts = 0;
    while blobs.len() < count && attempts < 1000 {
        attempts += 1;
        let r = rng.gen_range(0.11 * side..0.19 * side).max(1.5);
        let margin = r + 0.1 * side;
        let center = [0, 1, 2].map(|a| {
            let hi = (dims[a] as f64 - 1.0 - margin).max(margin + 1e-6);
            rng.gen_range(margin.min(hi - 1e-6)..hi)
        });
        let clear = blobs.iter().all(|b| {
            let d: f64 = (0..3)
                .map(|a| (center[a] - b.center[a]).powi(2))
                .sum::<f64>()
                .sqrt();
            d > 0.85 * (r + b.radii[0])
        });
        if !clear && attempts < 900 {
            continue;
        }
        let label = blobs.len() as u32 + 1;
        blobs.push(Blob {
            label,
            center,
            radii: [r; 3],
            intensity: 0.35 + 0.13 * label as f64 + rng.gen_range(-0.04..0.04),
        });
    }
    render(dims, rng, 0.1, &blobs)
}

fn slabs(dims: Dims, rng: &mut ChaCha8Rng) -> Result<(Volume, LabelVolume)> {
    let h = dims[0] as f64;
    let bounds = [0.2, 0.4, 0.6, 0.8].map(|f| f * h + rng.gen_range(-0.03..0.03) * h);
    let labels = LabelVolume::from_fn(dims, |i, _, _| {
        let x = i as f64;
        bounds.iter().filter(|&&b| x >= b).count() as u32
    })?;
    let intensities = [0.1, 0.45, 0.8, 0.3, 0.65];
    let blobs: Vec<Blob> = (1..=4)
        .map(|l| Blob {
            label: l,
            center: [0.0; 3],
            radii: [0.0; 3],
            intensity: intensities[l as usize],
        })
        .collect();
    let phase = [rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU), 0.0];
    let side = dims.iter().copied().min().unwrap() as f64;
    let data = Volume::from_fn(dims, |i, j, k| {
        let l = labels.at(i, j, k);
        let base = blobs
            .iter()
            .find(|b| b.label == l)
            .map_or(intensities[0], |b| b.intensity);
        base + 0.06
            * texture(
                [i as f64, j as f64, k as f64],
                phase,
                (0.25 * side).max(4.0),
            )
    })?;
    let mut values = gaussian_blur(data.data(), dims, 0.7);
    normalize_unit(&mut values);
    Ok((Volume::new(dims, values)?, labels))
}

/// Short-axis-like stack: bright cavity (1) inside a dark wall (2), with a bright
/// crescent-shaped second cavity (3) alongside.
fn cardiac_like(dims: Dims, rng: &mut ChaCha8Rng) -> Result<(Volume, LabelVolume)> {
    let (h, w, d) = (dims[0] as f64, dims[1] as f64, dims[2] as f64);
    let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(-0.03..0.03);
    let c = [
        h * (0.5 + jitter(rng)),
        w * (0.45 + jitter(rng)),
        (d - 1.0) / 2.0,
    ];
    let r_cav = 0.14 * h.min(w);
    let r_wall = 0.22 * h.min(w);
    let long = (0.7 * d).max(1.0);
    let blobs = [
        Blob {
            label: 3,
            center: [c[0], c[1] + 1.15 * r_wall, c[2]],
            radii: [1.3 * r_wall, 0.7 * r_wall, long],
            intensity: 0.75,
        },
        Blob {
            label: 2,
            center: c,
            radii: [r_wall, r_wall, long],
            intensity: 0.3,
        },
        Blob {
            label: 1,
            center: c,
            radii: [r_cav, r_cav, long],
            intensity: 0.9,
        },
    ];
    render(dims, rng, 0.12, &blobs)
}

/// Random smooth stationary velocity: a sum of Gaussian bumps, rescaled so the
/// largest vector is `max_norm` voxels.
pub fn random_velocity(dims: Dims, max_norm: f64, rng: &mut ChaCha8Rng) -> DisplacementField {
    let side = dims.iter().copied().min().unwrap() as f64;
    let bumps: Vec<([f64; 3], f64, [f64; 3])> = (0..6)
        .map(|_| {
            let center = [0, 1, 2].map(|a| rng.gen_range(0.2..0.8) * dims[a] as f64);
            let sigma = rng.gen_range(0.15..0.25) * side;
            let amp = [0, 1, 2].map(|a| {
                if dims[a] > 1 {
                    rng.gen_range(-1.0..1.0)
                } else {
                    0.0
                }
            });
            (center, sigma, amp)
        })
        .collect();
    let v = DisplacementField::from_fn(dims, |i, j, k| {
        let p = [i as f64, j as f64, k as f64];
        let mut out = [0.0; 3];
        for (center, sigma, amp) in &bumps {
            let r2: f64 = (0..3).map(|a| (p[a] - center[a]).powi(2)).sum();
            let g = (-r2 / (2.0 * sigma * sigma)).exp();
            for a in 0..3 {
                out[a] += amp[a] * g;
            }
        }
        out
    });
    let peak = v.max_norm();
    if peak > 0.0 {
        v.scaled(max_norm / peak)
    } else {
        v
    }
}

/// Gamma correction on intensities normalized to `[0, 1]` (mapped back to the
/// original range), then additive Gaussian noise with standard deviation
/// `sigma · range`. `gamma == 1` and `sigma == 0` leave the input untouched.
pub fn perturb(vol: &Volume, gamma: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Volume> {
    if !(gamma.is_finite() && gamma > 0.0) || !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid(format!(
            "gamma {gamma} must be positive and noise sigma {sigma} non-negative"
        )));
    }
    let mut data = vol.data().to_vec();
    let min = data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if gamma != 1.0 && range > 0.0 {
        data.iter_mut()
            .for_each(|v| *v = min + range * ((*v - min) / range).powf(gamma));
    }
    if sigma > 0.0 {
        let scale = if range > 0.0 { range } else { 1.0 };
        let normal = Normal::new(0.0, sigma * scale).expect("valid normal");
        data.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    Volume::with_spacing(vol.dims(), vol.spacing(), data)
}

/// Builds a phantom pair, its labels, ground-truth field and perturbed copies.
pub fn synthesize(cfg: &SynthConfig) -> Result<SynthCase> {
    let dims = cfg.dims;
    if dims.iter().any(|&d| d < 4) {
        return Err(Error::invalid(format!(
            "phantom dims {dims:?} must be at least 4 per axis"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (moving, moving_labels) = match cfg.kind {
        PhantomKind::Spheres => spheres(dims, &mut rng)?,
        PhantomKind::Slabs => slabs(dims, &mut rng)?,
        PhantomKind::CardiacLike => cardiac_like(dims, &mut rng)?,
    };
    let side = dims.iter().copied().min().unwrap() as f64;
    let truth = match cfg.deform {
        DeformKind::None => DisplacementField::zeros(dims),
        DeformKind::Translate => {
            let t = [0, 1, 2].map(|a| {
                if dims[a] > 1 {
                    rng.gen_range(-0.04..0.04) * side
                } else {
                    0.0
                }
            });
            DisplacementField::constant(dims, t)
        }
        DeformKind::Svf => {
            let v = random_velocity(dims, 0.05 * side, &mut rng);
            integrate_velocity(&v, DEFAULT_SQUARING_STEPS)?
        }
    };
    let (fixed, fixed_labels) = if cfg.deform == DeformKind::None {
        (moving.clone(), moving_labels.clone())
    } else {
        (warp(&moving, &truth)?, warp_labels(&moving_labels, &truth)?)
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);
    let moving_perturbed = perturb(&moving, cfg.gamma, cfg.noise_sigma, &mut noise_rng)?;
    let fixed_perturbed = perturb(&fixed, cfg.gamma, cfg.noise_sigma, &mut noise_rng)?;
    Ok(SynthCase {
        moving,
        fixed,
        moving_labels,
        fixed_labels,
        truth,
        moving_perturbed,
        fixed_perturbed,
    })
}

/// Mean Euclidean distance between two fields over the voxels where `mask` holds.
pub fn endpoint_error(a: &DisplacementField, b: &DisplacementField, mask: &[bool]) -> f64 {
    let n = mask.len();
    let (mut acc, mut count) = (0.0, 0usize);
    for idx in (0..n).filter(|&i| mask[i]) {
        let (p, q) = (a.vector(idx), b.vector(idx));
        acc += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}
