use featreg::features::{
    apply_adaptation, channel_group, extract_fallback_features, plan_adaptation, reduce_channels,
    restore_features, SliceFeatures, FALLBACK_CHANNELS,
};
use featreg::phantom::{perturb, synthesize, DeformKind, PhantomKind, SynthConfig};
use featreg::{FeatureVolume, Grid, Volume};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Compactly supported bump, exactly zero beyond `radius`.
fn bump(c: [f64; 3], radius: f64) -> impl Fn(f64, f64, f64) -> f64 {
    move |x, y, z| {
        let r2 = (x - c[0]).powi(2) + (y - c[1]).powi(2) + (z - c[2]).powi(2);
        let t = 1.0 - r2 / (radius * radius);
        if t > 0.0 {
            t * t
        } else {
            0.0
        }
    }
}

#[test]
fn fallback_features_commute_with_translation() {
    let dims = [20, 18, 16];
    let a = bump([9.3, 8.1, 7.6], 5.0);
    let b = bump([6.0, 10.0, 8.0], 3.5);
    let content = |x: f64, y: f64, z: f64| a(x, y, z) + 0.6 * b(x, y, z);
    for axis in 0..3 {
        let mut e = [0.0; 3];
        e[axis] = 1.0;
        let base = Volume::from_fn(dims, |i, j, k| content(i as f64, j as f64, k as f64)).unwrap();
        let shifted = Volume::from_fn(dims, |i, j, k| {
            content(i as f64 - e[0], j as f64 - e[1], k as f64 - e[2])
        })
        .unwrap();
        let fa = extract_fallback_features(&base).unwrap();
        let fb = extract_fallback_features(&shifted).unwrap();
        let mut worst: f64 = 0.0;
        for c in 0..FALLBACK_CHANNELS {
            for i in 1..dims[0] - 2 {
                for j in 1..dims[1] - 2 {
                    for k in 1..dims[2] - 2 {
                        let s = [i + e[0] as usize, j + e[1] as usize, k + e[2] as usize];
                        let d = (fa.at(c, i, j, k) - fb.at(c, s[0], s[1], s[2])).abs();
                        worst = worst.max(d);
                    }
                }
            }
        }
        assert!(worst < 1e-9, "axis {axis}: {worst:e}");
    }
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let mid = (start + end - 1) as f64 / 2.0;
        for &o in &order[start..end] {
            out[o] = mid;
        }
        start = end;
    }
    out
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn gradient_magnitude_ranks_survive_gamma() {
    let magnitude = 4;
    for kind in [
        PhantomKind::Spheres,
        PhantomKind::Slabs,
        PhantomKind::CardiacLike,
    ] {
        let case = synthesize(&SynthConfig {
            kind,
            dims: [32, 32, 32],
            deform: DeformKind::None,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let base = extract_fallback_features(&case.moving).unwrap();
        for gamma in [0.7, 0.8, 1.25, 1.5] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let bent = perturb(&case.moving, gamma, 0.0, &mut rng).unwrap();
            let f = extract_fallback_features(&bent).unwrap();
            let rho = spearman(base.channel(magnitude), f.channel(magnitude));
            assert!(rho > 0.9, "{kind:?} gamma {gamma}: rho {rho}");
        }
    }
}

/// Identity encoder: returns its input slice as a one-channel embedding.
fn identity_encoder(slices: &[featreg::features::Slice2D]) -> Vec<SliceFeatures> {
    slices
        .iter()
        .map(|s| SliceFeatures {
            channels: 1,
            height: s.size,
            width: s.size,
            data: s.data.clone(),
        })
        .collect()
}

fn volume_strategy() -> impl Strategy<Value = Volume> {
    (1usize..20, 1usize..20, 1usize..4).prop_flat_map(|(h, w, d)| {
        prop::collection::vec(-5.0f64..5.0, h * w * d)
            .prop_map(move |data| Volume::new([h, w, d], data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn adaptation_round_trip_is_exact_on_nested_grids(vol in volume_strategy(), m in 1usize..5) {
        let dims = vol.dims();
        let p = dims[0].max(dims[1]);
        let k = if p == 1 { m } else { m * (p - 1) + 1 };
        let plan = plan_adaptation(dims, k).unwrap();
        prop_assert_eq!(plan.padded, p);
        prop_assert!(plan.pad_h + dims[0] <= p && plan.pad_w + dims[1] <= p);
        let slices = apply_adaptation(&vol, &plan).unwrap();
        prop_assert_eq!(slices.len(), dims[2]);
        let back = restore_features(&identity_encoder(&slices), &plan).unwrap();
        prop_assert_eq!(back.dims(), dims);
        for (x, y) in back.data().iter().zip(vol.data()) {
            prop_assert!((x - y).abs() < 1e-9, "{} vs {}", x, y);
        }
    }

    #[test]
    fn adaptation_round_trip_stays_in_range(vol in volume_strategy(), extra in 0usize..40) {
        let dims = vol.dims();
        let k = dims[0].max(dims[1]) + extra;
        let plan = plan_adaptation(dims, k).unwrap();
        let back = restore_features(&identity_encoder(&apply_adaptation(&vol, &plan).unwrap()), &plan)
            .unwrap();
        let lo = vol.data().iter().fold(0.0f64, |m, &v| m.min(v));
        let hi = vol.data().iter().fold(0.0f64, |m, &v| m.max(v));
        for &x in back.data() {
            prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
        }
    }

    #[test]
    fn reduction_averages_contiguous_groups(c in 1usize..48, t_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let target = 1 + ((c - 1) as f64 * t_frac) as usize;
        let dims = [2, 3, 2];
        let n = 12;
        let data: Vec<f64> = (0..c * n)
            .map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 100.0)
            .collect();
        let f = FeatureVolume::new(c, dims, data).unwrap();
        let r = reduce_channels(&f, target).unwrap();
        prop_assert_eq!(r.channels(), target);
        let mut covered = 0;
        let mut weighted = vec![0.0; n];
        for j in 0..target {
            let (lo, hi) = channel_group(c, target, j);
            prop_assert_eq!(lo, covered);
            prop_assert!(hi > lo);
            covered = hi;
            for (v, w) in weighted.iter_mut().enumerate() {
                let mean = (lo..hi).map(|ch| f.channel(ch)[v]).sum::<f64>() / (hi - lo) as f64;
                prop_assert!((r.channel(j)[v] - mean).abs() < 1e-12);
                *w += r.channel(j)[v] * (hi - lo) as f64;
            }
        }
        prop_assert_eq!(covered, c);
        for (v, w) in weighted.iter().enumerate() {
            let total: f64 = (0..c).map(|ch| f.channel(ch)[v]).sum();
            prop_assert!((w - total).abs() < 1e-9);
        }
    }
}

#[test]
fn invalid_adaptation_and_reduction_requests() {
    assert!(plan_adaptation([0, 4, 4], 8).is_err());
    assert!(plan_adaptation([10, 12, 4], 11).is_err());
    let f = FeatureVolume::new(3, [2, 2, 2], vec![0.0; 24]).unwrap();
    assert!(reduce_channels(&f, 0).is_err());
    assert!(reduce_channels(&f, 4).is_err());
}
