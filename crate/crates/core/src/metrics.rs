//! Segmentation overlap, surface distance and deformation regularity metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::jacobian_map;
use crate::tensor::{grid_position, linear_index, Dims, DisplacementField, LabelVolume, Spacing};

fn check_pair(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "label dims {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Dice overlap of one label as a percentage. Both empty → 100, one empty → 0.
pub fn dice_score(a: &LabelVolume, b: &LabelVolume, label: u32) -> Result<f64> {
    check_pair(a, b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * both as f64 / (na + nb) as f64)
}

/// Foreground voxels of `label` with at least one six-connected background
/// neighbor; the volume border counts as background.
pub fn surface_voxels(labels: &LabelVolume, label: u32) -> Vec<[usize; 3]> {
    let dims = labels.dims();
    let data = labels.labels();
    let inside = |i: isize, j: isize, k: isize| -> bool {
        if i < 0 || j < 0 || k < 0 {
            return false;
        }
        let (i, j, k) = (i as usize, j as usize, k as usize);
        if i >= dims[0] || j >= dims[1] || k >= dims[2] {
            return false;
        }
        data[linear_index(dims, i, j, k)] == label
    };
    const NEIGHBORS: [[isize; 3]; 6] = [
        [1, 0, 0],
        [-1, 0, 0],
        [0, 1, 0],
        [0, -1, 0],
        [0, 0, 1],
        [0, 0, -1],
    ];
    (0..data.len())
        .filter(|&idx| data[idx] == label)
        .map(|idx| grid_position(dims, idx))
        .filter(|p| {
            NEIGHBORS.iter().any(|d| {
                !inside(
                    p[0] as isize + d[0],
                    p[1] as isize + d[1],
                    p[2] as isize + d[2],
                )
            })
        })
        .collect()
}

/// Physical Euclidean distance between two voxels. Shared by every distance
/// computation so results are bit-reproducible.
#[inline]
pub fn physical_distance(a: [usize; 3], b: [usize; 3], spacing: Spacing) -> f64 {
    squared_distance(a, b, spacing).sqrt()
}

#[inline]
fn squared_distance(a: [usize; 3], b: [usize; 3], spacing: Spacing) -> f64 {
    let t = |axis: usize| (a[axis] as f64 - b[axis] as f64) * spacing[axis];
    let (x, y, z) = (t(0), t(1), t(2));
    x * x + y * y + z * z
}

/// Nearest-point queries against a fixed voxel set, bucketed by first index so a
/// query only visits slices that can still beat the current best.
struct NearestSurface {
    slices: Vec<Vec<[usize; 3]>>,
    spacing: Spacing,
}

impl NearestSurface {
    fn new(points: &[[usize; 3]], dims: Dims, spacing: Spacing) -> Self {
        let mut slices = vec![Vec::new(); dims[0]];
        for &p in points {
            slices[p[0]].push(p);
        }
        Self { slices, spacing }
    }

    fn distance(&self, q: [usize; 3]) -> f64 {
        let mut best = f64::INFINITY;
        let h = self.slices.len();
        for step in 0..h {
            let gap = step as f64 * self.spacing[0];
            if gap * gap > best {
                break;
            }
            let below = q[0].checked_sub(step);
            let above = if step > 0 && q[0] + step < h {
                Some(q[0] + step)
            } else {
                None
            };
            for slice in below.into_iter().chain(above) {
                for &p in &self.slices[slice] {
                    let d = squared_distance(q, p, self.spacing);
                    if d < best {
                        best = d;
                    }
                }
            }
        }
        best.sqrt()
    }
}

/// Percentile by linear interpolation between order statistics (`q` in `[0, 1]`).
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

/// Symmetric 95th-percentile surface distance in millimeters.
pub fn hd95(a: &LabelVolume, b: &LabelVolume, label: u32, spacing: Spacing) -> Result<f64> {
    check_pair(a, b)?;
    let sa = surface_voxels(a, label);
    let sb = surface_voxels(b, label);
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::invalid(format!(
            "label {label} is empty in {} mask",
            if sa.is_empty() {
                "the first"
            } else {
                "the second"
            }
        )));
    }
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> f64 {
        let index = NearestSurface::new(to, a.dims(), spacing);
        let mut d: Vec<f64> = from.iter().map(|&p| index.distance(p)).collect();
        percentile(&mut d, 0.95)
    };
    Ok(directed(&sa, &sb).max(directed(&sb, &sa)))
}

/// Spread of log Jacobian determinants and folding share of a deformation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianStats {
    pub sdlogj: f64,
    pub folding: f64,
}

/// Population standard deviation of `log det J` over interior voxels with a
/// positive determinant; folded voxels are only counted in `folding`.
pub fn jacobian_stats(field: &DisplacementField, spacing: Spacing) -> Result<JacobianStats> {
    let jac = jacobian_map(field, spacing)?;
    let logs: Vec<f64> = jac.interior().filter(|&d| d > 0.0).map(f64::ln).collect();
    if logs.is_empty() {
        return Err(Error::invalid("every interior voxel is folded"));
    }
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
    Ok(JacobianStats {
        sdlogj: var.sqrt(),
        folding: jac.folding_fraction(),
    })
}

pub fn sdlogj(field: &DisplacementField, spacing: Spacing) -> Result<f64> {
    Ok(jacobian_stats(field, spacing)?.sdlogj)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: u32,
    /// Percent.
    pub dice: f64,
    /// Millimeters; `None` when the label is missing from either mask.
    pub hd95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub labels: Vec<LabelMetrics>,
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
    pub sdlogj: Option<f64>,
    pub folding: Option<f64>,
}

/// Scores `predicted` against `reference` over the foreground labels present in
/// the reference, plus Jacobian statistics when a field is supplied.
pub fn evaluate(
    predicted: &LabelVolume,
    reference: &LabelVolume,
    field: Option<&DisplacementField>,
    spacing: Spacing,
) -> Result<MetricsReport> {
    check_pair(predicted, reference)?;
    let mut labels = Vec::new();
    for label in reference.foreground_labels() {
        let dice = dice_score(predicted, reference, label)?;
        let hd = hd95(predicted, reference, label, spacing).ok();
        labels.push(LabelMetrics {
            label,
            dice,
            hd95: hd,
        });
    }
    let mean_dice = if labels.is_empty() {
        100.0
    } else {
        labels.iter().map(|l| l.dice).sum::<f64>() / labels.len() as f64
    };
    let hds: Vec<f64> = labels.iter().filter_map(|l| l.hd95).collect();
    let mean_hd95 = (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64);
    let stats = field.map(|f| jacobian_stats(f, spacing)).transpose()?;
    Ok(MetricsReport {
        labels,
        mean_dice,
        mean_hd95,
        sdlogj: stats.map(|s| s.sdlogj),
        folding: stats.map(|s| s.folding),
    })
}

impl MetricsReport {
    /// Header and one data row: `case, mean_dice, mean_hd95, sdlogj, folding`, then
    /// `dice_<label>` and `hd95_<label>` per label. Missing values are empty cells.
    pub fn to_csv(&self, case: &str) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut header = vec![
            "case".to_string(),
            "mean_dice".into(),
            "mean_hd95".into(),
            "sdlogj".into(),
            "folding".into(),
        ];
        let mut row = vec![
            case.to_string(),
            self.mean_dice.to_string(),
            opt(self.mean_hd95),
            opt(self.sdlogj),
            opt(self.folding),
        ];
        for l in &self.labels {
            header.push(format!("dice_{}", l.label));
            header.push(format!("hd95_{}", l.label));
            row.push(l.dice.to_string());
            row.push(opt(l.hd95));
        }
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(dims: Dims, lo: [usize; 3], side: usize) -> LabelVolume {
        LabelVolume::from_fn(dims, |i, j, k| {
            let p = [i, j, k];
            u32::from((0..3).all(|a| p[a] >= lo[a] && p[a] < lo[a] + side))
        })
        .unwrap()
    }

    fn point(dims: Dims, p: [usize; 3]) -> LabelVolume {
        LabelVolume::from_fn(dims, |i, j, k| u32::from([i, j, k] == p)).unwrap()
    }

    #[test]
    fn dice_cases() {
        let dims = [10, 10, 10];
        let a = cube(dims, [1, 1, 1], 4);
        assert_eq!(dice_score(&a, &a, 1).unwrap(), 100.0);
        let far = cube(dims, [6, 6, 6], 4);
        assert_eq!(dice_score(&a, &far, 1).unwrap(), 0.0);
        // overlap is a 4×4×2 slab
        let shifted = cube(dims, [1, 1, 3], 4);
        assert_eq!(dice_score(&a, &shifted, 1).unwrap(), 50.0);
        assert_eq!(dice_score(&a, &a, 7).unwrap(), 100.0);
        let empty = LabelVolume::new(dims, vec![0; 1000]).unwrap();
        assert_eq!(dice_score(&a, &empty, 1).unwrap(), 0.0);
    }

    #[test]
    fn hd95_cases() {
        let dims = [8, 8, 12];
        let a = cube(dims, [2, 2, 2], 3);
        assert_eq!(hd95(&a, &a, 1, [1.0; 3]).unwrap(), 0.0);

        let p = point(dims, [3, 3, 3]);
        let q = point(dims, [5, 3, 3]);
        assert_eq!(hd95(&p, &q, 1, [1.0; 3]).unwrap(), 2.0);

        let r = point(dims, [3, 3, 4]);
        assert_eq!(hd95(&p, &r, 1, [1.8, 1.8, 10.0]).unwrap(), 10.0);

        let empty = LabelVolume::new(dims, vec![0; 8 * 8 * 12]).unwrap();
        assert!(hd95(&p, &empty, 1, [1.0; 3]).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0, 0.0];
        assert_eq!(percentile(&mut v, 0.5), 2.0);
        let mut v: Vec<f64> = (0..21).map(f64::from).collect();
        assert_eq!(percentile(&mut v, 0.95), 19.0);
        let mut v = vec![0.0, 10.0];
        assert_eq!(percentile(&mut v, 0.95), 9.5);
    }

    #[test]
    fn surface_excludes_interior() {
        let c = cube([7, 7, 7], [1, 1, 1], 5);
        let s = surface_voxels(&c, 1);
        assert_eq!(s.len(), 125 - 27);
        let whole = LabelVolume::new([3, 3, 3], vec![1; 27]).unwrap();
        // border counts as background, so only the center is interior
        assert_eq!(surface_voxels(&whole, 1).len(), 26);
    }

    #[test]
    fn sdlogj_cases() {
        let dims = [10, 10, 10];
        assert_eq!(
            sdlogj(&DisplacementField::zeros(dims), [1.0; 3]).unwrap(),
            0.0
        );

        let expand = DisplacementField::from_fn(dims, |i, j, k| {
            [0.1 * i as f64, 0.1 * j as f64, 0.1 * k as f64]
        });
        assert!(sdlogj(&expand, [1.0; 3]).unwrap() < 1e-12);

        // u_z = (e - 1)·z on the upper half along x: det is 1 below, e above.
        let e = std::f64::consts::E;
        let blocks = DisplacementField::from_fn(dims, |i, _, k| {
            [0.0, 0.0, if i >= 5 { (e - 1.0) * k as f64 } else { 0.0 }]
        });
        let stats = jacobian_stats(&blocks, [1.0; 3]).unwrap();
        assert!((stats.sdlogj - 0.5).abs() < 1e-12, "{}", stats.sdlogj);
        assert_eq!(stats.folding, 0.0);
    }

    #[test]
    fn folding_is_reported_separately() {
        let dims = [8, 8, 8];
        // u_x = -2x inverts the x axis: det = -1 everywhere
        let flip = DisplacementField::from_fn(dims, |i, _, _| [-2.0 * i as f64, 0.0, 0.0]);
        assert!(jacobian_stats(&flip, [1.0; 3]).is_err());
        let half = DisplacementField::from_fn(dims, |i, j, _| {
            [if j >= 4 { -2.0 * i as f64 } else { 0.0 }, 0.0, 0.0]
        });
        let stats = jacobian_stats(&half, [1.0; 3]).unwrap();
        assert!((stats.folding - 0.5).abs() < 1e-12);
        assert_eq!(stats.sdlogj, 0.0);
    }

    #[test]
    fn report_csv_layout() {
        let dims = [6, 6, 6];
        let a = cube(dims, [1, 1, 1], 3);
        let r = evaluate(&a, &a, Some(&DisplacementField::zeros(dims)), [1.0; 3]).unwrap();
        assert_eq!(r.mean_dice, 100.0);
        assert_eq!(r.sdlogj, Some(0.0));
        let csv = r.to_csv("case0");
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "case,mean_dice,mean_hd95,sdlogj,folding,dice_1,hd95_1"
        );
        assert_eq!(lines[1], "case0,100,0,0,0,100,0");
    }
}
