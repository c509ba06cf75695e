//! Independent reference implementations shared by the test suites.
#![allow(dead_code)]

use std::f64::consts::TAU;

use featreg::features::FeaturePyramid;
use featreg::field::warp;
use featreg::losses::{hfc_loss, ncc_loss, pullback, smoothness_loss, soft_dice_loss};
use featreg::tensor::{grid_position, voxel_count};
use featreg::{DisplacementField, FeatureVolume, Grid, LabelVolume, Spacing, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- fields

/// Plain clamped trilinear sampler of a three-component field.
pub fn sample(field: &DisplacementField, p: [f64; 3]) -> [f64; 3] {
    let d = field.dims();
    let n = d[0] * d[1] * d[2];
    let data = field.data();
    let mut base = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let max = (d[a] - 1) as f64;
        let q = p[a].clamp(0.0, max);
        let i0 = (q.floor() as usize).min(d[a].saturating_sub(2));
        base[a] = i0;
        t[a] = q - i0 as f64;
    }
    let mut out = [0.0; 3];
    for (dx, wx) in [(0, 1.0 - t[0]), (1, t[0])] {
        for (dy, wy) in [(0, 1.0 - t[1]), (1, t[1])] {
            for (dz, wz) in [(0, 1.0 - t[2]), (1, t[2])] {
                let idx = ((base[0] + dx) * d[1] + base[1] + dy) * d[2] + base[2] + dz;
                let w = wx * wy * wz;
                for a in 0..3 {
                    out[a] += w * data[a * n + idx];
                }
            }
        }
    }
    out
}

/// Explicit Euler integration of `dφ/dt = v(φ)` from the identity.
pub fn euler_flow(v: &DisplacementField, steps: usize) -> DisplacementField {
    let d = v.dims();
    let dt = 1.0 / steps as f64;
    let mut pts: Vec<[f64; 3]> = Vec::with_capacity(d[0] * d[1] * d[2]);
    for i in 0..d[0] {
        for j in 0..d[1] {
            for k in 0..d[2] {
                pts.push([i as f64, j as f64, k as f64]);
            }
        }
    }
    let start = pts.clone();
    for _ in 0..steps {
        for p in pts.iter_mut() {
            let s = sample(v, *p);
            for a in 0..3 {
                p[a] += dt * s[a];
            }
        }
    }
    let mut idx = 0;
    DisplacementField::from_fn(d, |_, _, _| {
        let (p, q) = (pts[idx], start[idx]);
        idx += 1;
        [p[0] - q[0], p[1] - q[1], p[2] - q[2]]
    })
}

/// Largest vector difference over voxels at least `margin` from every face.
pub fn interior_max_diff(a: &DisplacementField, b: &DisplacementField, margin: usize) -> f64 {
    let d = a.dims();
    let mut worst: f64 = 0.0;
    for i in margin..d[0] - margin {
        for j in margin..d[1] - margin {
            for k in margin..d[2] - margin {
                let (p, q) = (a.vector_at(i, j, k), b.vector_at(i, j, k));
                let n = (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>().sqrt();
                worst = worst.max(n);
            }
        }
    }
    worst
}

pub const CORPUS_SIDE: usize = 32;
pub const CORPUS_DIMS: [usize; 3] = [CORPUS_SIDE; 3];

/// Sum of broad Gaussian bumps (widths 10–14 voxels), peak norm 0.4 voxels.
pub fn smooth_velocity(seed: u64) -> DisplacementField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bumps: Vec<([f64; 3], f64, [f64; 3])> = (0..4)
        .map(|_| {
            (
                [0, 1, 2].map(|_| rng.gen_range(8.0..24.0)),
                rng.gen_range(10.0..14.0),
                [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0)),
            )
        })
        .collect();
    let v = DisplacementField::from_fn(CORPUS_DIMS, |i, j, k| {
        let p = [i as f64, j as f64, k as f64];
        let mut out = [0.0; 3];
        for (c, s, amp) in &bumps {
            let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
            let g = (-r2 / (2.0 * s * s)).exp();
            for a in 0..3 {
                out[a] += amp[a] * g;
            }
        }
        out
    });
    v.scaled(0.4 / v.max_norm())
}

/// Infinitesimal rotation by `angle` radians about the third axis, centered.
pub fn rotation_velocity(angle: f64) -> DisplacementField {
    let c = (CORPUS_SIDE - 1) as f64 / 2.0;
    DisplacementField::from_fn(CORPUS_DIMS, |i, j, _| {
        let (x, y) = (i as f64 - c, j as f64 - c);
        [-angle * y, angle * x, 0.0]
    })
}

/// Smooth velocity fields used by the integration checks.
pub fn velocity_corpus() -> Vec<(String, DisplacementField)> {
    let mut out: Vec<_> = (0..3)
        .map(|s| (format!("bumps seed {s}"), smooth_velocity(s)))
        .collect();
    out.push(("rotation 0.05".into(), rotation_velocity(0.05)));
    out
}

// ---------------------------------------------------------------- metrics

/// Six-connected surface voxels of `label`; outside the grid counts as background.
pub fn brute_surface(labels: &LabelVolume, label: u32) -> Vec<[usize; 3]> {
    let d = labels.dims();
    let is = |i: i64, j: i64, k: i64| {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < d[0]
            && (j as usize) < d[1]
            && (k as usize) < d[2]
            && labels.at(i as usize, j as usize, k as usize) == label
    };
    let mut out = Vec::new();
    for i in 0..d[0] {
        for j in 0..d[1] {
            for k in 0..d[2] {
                if labels.at(i, j, k) != label {
                    continue;
                }
                let (a, b, c) = (i as i64, j as i64, k as i64);
                let boundary = !is(a + 1, b, c)
                    || !is(a - 1, b, c)
                    || !is(a, b + 1, c)
                    || !is(a, b - 1, c)
                    || !is(a, b, c + 1)
                    || !is(a, b, c - 1);
                if boundary {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

/// 95th percentile (linear interpolation) of nearest-surface distances.
pub fn brute_directed(from: &[[usize; 3]], to: &[[usize; 3]], s: Spacing) -> f64 {
    let mut d: Vec<f64> = from
        .iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    let x = (p[0] as f64 - q[0] as f64) * s[0];
                    let y = (p[1] as f64 - q[1] as f64) * s[1];
                    let z = (p[2] as f64 - q[2] as f64) * s[2];
                    x * x + y * y + z * z
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (d.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    d[lo] + (pos - lo as f64) * (d[hi] - d[lo])
}

/// Symmetric HD95 by exhaustive search; `None` when either surface is empty.
pub fn brute_hd95(a: &LabelVolume, b: &LabelVolume, label: u32, s: Spacing) -> Option<f64> {
    let (sa, sb) = (brute_surface(a, label), brute_surface(b, label));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    Some(brute_directed(&sa, &sb, s).max(brute_directed(&sb, &sa, s)))
}

/// Dice in percent by counting voxels.
pub fn brute_dice(a: &LabelVolume, b: &LabelVolume, label: u32) -> f64 {
    let na = a.labels().iter().filter(|&&l| l == label).count();
    let nb = b.labels().iter().filter(|&&l| l == label).count();
    let both = a
        .labels()
        .iter()
        .zip(b.labels())
        .filter(|(&x, &y)| x == label && y == label)
        .count();
    if na + nb == 0 {
        100.0
    } else {
        100.0 * 2.0 * both as f64 / (na + nb) as f64
    }
}

/// Union of random boxes and balls, sometimes with speckle.
pub fn random_mask(dims: [usize; 3], rng: &mut ChaCha8Rng) -> LabelVolume {
    let shapes: Vec<(bool, [f64; 3], f64)> = (0..rng.gen_range(1..4))
        .map(|_| {
            (
                rng.gen_bool(0.5),
                [0, 1, 2].map(|a| rng.gen_range(0.0..dims[a] as f64)),
                rng.gen_range(1.0..6.0),
            )
        })
        .collect();
    let speckle = rng.gen_bool(0.3);
    let mut noise = ChaCha8Rng::seed_from_u64(rng.gen());
    LabelVolume::from_fn(dims, |i, j, k| {
        let p = [i as f64, j as f64, k as f64];
        let hit = shapes.iter().any(|(ball, c, r)| {
            if *ball {
                (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= r * r
            } else {
                (0..3).all(|a| (p[a] - c[a]).abs() <= *r)
            }
        });
        let flip = speckle && noise.gen_bool(0.05);
        (hit ^ flip) as u32
    })
    .unwrap()
}

// ---------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-4;
pub const FD_SITES: usize = 100;
/// Central differences resolve about `ε·|L|/h ≈ 1e-12`; relative errors are
/// taken against at least this magnitude.
pub const FD_FLOOR: f64 = 1e-7;

/// Sum of random plane waves, smooth at the scale of a few voxels.
pub fn smooth_scalar(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let k = [0, 1, 2].map(|_| rng.gen_range(0.15..0.6));
            (k, rng.gen_range(0.0..TAU), rng.gen_range(0.3..1.0))
        })
        .collect();
    let mut out = Vec::with_capacity(voxel_count(dims));
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let p = [i as f64, j as f64, k as f64];
                let v: f64 = waves
                    .iter()
                    .map(|(f, ph, a)| a * (f[0] * p[0] + f[1] * p[1] + f[2] * p[2] + ph).sin())
                    .sum();
                out.push(v);
            }
        }
    }
    out
}

/// Smooth displacement of up to ~1.5 voxels.
pub fn smooth_field(dims: [usize; 3], rng: &mut ChaCha8Rng) -> DisplacementField {
    let mut data = Vec::new();
    for _ in 0..3 {
        let base = smooth_scalar(dims, rng);
        data.extend(base.iter().map(|v| 0.5 * v + 0.37));
    }
    DisplacementField::new(dims, data).unwrap()
}

/// Random `(voxel, component)` sites whose displaced sample sits strictly
/// inside the grid and clear of cell faces, so finite differences never
/// straddle a kink of trilinear interpolation.
pub fn sample_sites(field: &DisplacementField, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let dims = field.dims();
    let n = voxel_count(dims);
    let mut sites = Vec::with_capacity(FD_SITES);
    while sites.len() < FD_SITES {
        let idx = rng.gen_range(0..n);
        let c = rng.gen_range(0..3);
        let pos = grid_position(dims, idx);
        let p = pos[c] as f64 + field.vector(idx)[c];
        let inside = p > 0.0 && p < (dims[c] - 1) as f64;
        let f = p - p.floor();
        if inside && f > 10.0 * FD_STEP && f < 1.0 - 10.0 * FD_STEP {
            sites.push((idx, c));
        }
    }
    sites
}

/// Like [`sample_sites`], restricted to sites where `grad` is non-zero.
pub fn sample_sites_where(
    u: &DisplacementField,
    grad: &DisplacementField,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let n = voxel_count(u.dims());
    let mut out = Vec::with_capacity(FD_SITES);
    while out.len() < FD_SITES {
        for site in sample_sites(u, rng) {
            if grad.data()[site.1 * n + site.0] != 0.0 && out.len() < FD_SITES {
                out.push(site);
            }
        }
    }
    out
}

fn nudged(u: &DisplacementField, idx: usize, c: usize, delta: f64) -> DisplacementField {
    let mut out = u.clone();
    let n = voxel_count(u.dims());
    out.data_mut()[c * n + idx] += delta;
    out
}

/// Worst relative error between `analytic` and central differences of `loss`
/// over `sites`.
pub fn worst_fd_error(
    u: &DisplacementField,
    analytic: &DisplacementField,
    sites: &[(usize, usize)],
    loss: impl Fn(&DisplacementField) -> f64,
) -> f64 {
    let n = voxel_count(u.dims());
    let h = FD_STEP;
    let mut worst: f64 = 0.0;
    for &(idx, c) in sites {
        let numeric = (loss(&nudged(u, idx, c, h)) - loss(&nudged(u, idx, c, -h))) / (2.0 * h);
        let a = analytic.data()[c * n + idx];
        let scale = a.abs().max(numeric.abs()).max(FD_FLOOR);
        worst = worst.max((a - numeric).abs() / scale);
    }
    worst
}

// ---------------------------------------------------------------- gradient instances

pub const FD_DIMS: [usize; 3] = [16, 16, 16];

fn smooth_volume(rng: &mut ChaCha8Rng) -> Volume {
    Volume::new(FD_DIMS, smooth_scalar(FD_DIMS, rng)).unwrap()
}

fn smooth_features(dims: [usize; 3], channels: usize, rng: &mut ChaCha8Rng) -> FeatureVolume {
    let data = (0..channels)
        .flat_map(|_| smooth_scalar(dims, rng))
        .collect();
    FeatureVolume::new(channels, dims, data).unwrap()
}

/// NCC gradient with respect to the displacement.
pub fn ncc_gradient_error(seed: u64, window: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let moving = smooth_volume(&mut rng);
    let fixed = smooth_volume(&mut rng);
    let u = smooth_field(FD_DIMS, &mut rng);
    let loss = |u: &DisplacementField| {
        ncc_loss(&warp(&moving, u).unwrap(), &fixed, window)
            .unwrap()
            .0
    };
    let (_, dwarped) = ncc_loss(&warp(&moving, &u).unwrap(), &fixed, window).unwrap();
    let analytic = pullback(&moving, &u, &dwarped).unwrap();
    worst_fd_error(&u, &analytic, &sample_sites(&u, &mut rng), loss)
}

/// HFC gradient with respect to each level's field of a three-level pyramid.
pub fn hfc_gradient_errors(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let level_dims = [[16, 16, 16], [8, 8, 8], [4, 4, 4]];
    let pyramid = |rng: &mut ChaCha8Rng| {
        FeaturePyramid::from_levels(
            level_dims
                .iter()
                .map(|&d| smooth_features(d, 3, rng))
                .collect(),
        )
        .unwrap()
    };
    let moving = pyramid(&mut rng);
    let fixed = pyramid(&mut rng);
    let fields: Vec<DisplacementField> = level_dims
        .iter()
        .map(|&d| smooth_field(d, &mut rng))
        .collect();
    let out = hfc_loss(&moving, &fixed, &fields).unwrap();
    (0..fields.len())
        .map(|level| {
            let loss = |u: &DisplacementField| {
                let mut fs = fields.clone();
                fs[level] = u.clone();
                hfc_loss(&moving, &fixed, &fs).unwrap().loss
            };
            let sites = sample_sites(&fields[level], &mut rng);
            worst_fd_error(&fields[level], &out.grads[level], &sites, loss)
        })
        .collect()
}

fn two_blobs(dims: [usize; 3], a: ([f64; 3], f64), b: ([f64; 3], f64)) -> LabelVolume {
    let inside = |(c, r): ([f64; 3], f64), i: usize, j: usize, k: usize| {
        (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2) < r * r
    };
    LabelVolume::from_fn(dims, |i, j, k| {
        if inside(a, i, j, k) {
            1
        } else if inside(b, i, j, k) {
            2
        } else {
            0
        }
    })
    .unwrap()
}

/// Soft Dice gradient through the warped one-hot moving labels.
pub fn dice_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let moving = two_blobs(FD_DIMS, ([6.0, 6.0, 7.0], 4.0), ([10.0, 9.0, 8.0], 3.5));
    let fixed = two_blobs(FD_DIMS, ([7.0, 6.5, 7.0], 4.2), ([9.0, 10.0, 8.5], 3.2));
    let labels = [1, 2];
    let onehot = moving.one_hot(&labels).unwrap();
    let u = smooth_field(FD_DIMS, &mut rng);
    let loss = |u: &DisplacementField| {
        soft_dice_loss(&warp(&onehot, u).unwrap(), &fixed, &labels)
            .unwrap()
            .0
    };
    let (_, dprobs) = soft_dice_loss(&warp(&onehot, &u).unwrap(), &fixed, &labels).unwrap();
    let analytic = pullback(&onehot, &u, dprobs.values()).unwrap();
    let sites = sample_sites_where(&u, &analytic, &mut rng);
    worst_fd_error(&u, &analytic, &sites, loss)
}

/// Smoothness gradient on a smooth 16³ field.
pub fn smoothness_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = smooth_field(FD_DIMS, &mut rng);
    let (_, analytic) = smoothness_loss(&u).unwrap();
    let loss = |u: &DisplacementField| smoothness_loss(u).unwrap().0;
    worst_fd_error(&u, &analytic, &sample_sites(&u, &mut rng), loss)
}

// ---------------------------------------------------------------- metric sweeps

/// Compares `hd95` with [`brute_hd95`] on `pairs` random mask pairs up to 16³
/// with random anisotropic spacing. Returns a description of every mismatch.
pub fn hd95_sweep(seed: u64, pairs: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut problems = Vec::new();
    let mut checked = 0;
    while checked < pairs {
        let dims = [0, 1, 2].map(|_| rng.gen_range(1..=16));
        let spacing = if rng.gen_bool(0.5) {
            [1.0, 1.0, 1.0]
        } else {
            [0, 1, 2].map(|_| rng.gen_range(0.5..3.0))
        };
        let a = random_mask(dims, &mut rng);
        let b = random_mask(dims, &mut rng);
        let got = featreg::metrics::hd95(&a, &b, 1, spacing);
        match brute_hd95(&a, &b, 1, spacing) {
            None => {
                if got.is_ok() {
                    problems.push(format!("dims {dims:?}: empty surface accepted"));
                }
            }
            Some(expect) => {
                checked += 1;
                match got {
                    Ok(v) if v == expect => {}
                    other => problems.push(format!(
                        "dims {dims:?} spacing {spacing:?}: {other:?} vs {expect}"
                    )),
                }
            }
        }
    }
    problems
}

/// Compares `dice_score` with [`brute_dice`] on random multi-label maps.
pub fn dice_sweep(seed: u64, cases: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut problems = Vec::new();
    for _ in 0..cases {
        let dims = [0, 1, 2].map(|_| rng.gen_range(1..=16));
        let n = voxel_count(dims);
        let a: Vec<u32> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let b: Vec<u32> = a
            .iter()
            .map(|&l| {
                if rng.gen_bool(0.7) {
                    l
                } else {
                    rng.gen_range(0..4)
                }
            })
            .collect();
        let (a, b) = (
            LabelVolume::new(dims, a).unwrap(),
            LabelVolume::new(dims, b).unwrap(),
        );
        for label in 1..4 {
            let expect = brute_dice(&a, &b, label);
            let got = featreg::metrics::dice_score(&a, &b, label).unwrap();
            if got != expect {
                problems.push(format!("dims {dims:?} label {label}: {got} vs {expect}"));
            }
        }
    }
    problems
}
