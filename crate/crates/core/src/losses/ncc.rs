use crate::error::{Error, Result};
use crate::filter::{box_sum, box_sum_adjoint};
use crate::tensor::{Grid, Volume};

pub const DEFAULT_NCC_WINDOW: usize = 9;

/// Per-voxel variance below which a window counts as flat.
const FLAT_VARIANCE: f64 = 1e-10;

/// Windowed squared NCC loss `1 - mean(cc)` where `cc` is the squared local
/// correlation in a `w³` window (border replication for overhang). Flat windows
/// contribute `cc = 0`. Returns the loss and `∂loss/∂warped`.
pub fn ncc_loss(warped: &Volume, fixed: &Volume, window: usize) -> Result<(f64, Vec<f64>)> {
    let dims = warped.dims();
    if dims != fixed.dims() {
        return Err(Error::shape(format!(
            "ncc: warped {dims:?} vs fixed {:?}",
            fixed.dims()
        )));
    }
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "ncc window must be odd and at least 3, got {window}"
        )));
    }
    let r = window / 2;
    let count = (window * window * window) as f64;
    let i = fixed.data();
    let j = warped.data();
    let n = i.len();

    let sq = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x * y).collect() };
    let si = box_sum(i, dims, r);
    let sj = box_sum(j, dims, r);
    let sii = box_sum(&sq(i, i), dims, r);
    let sjj = box_sum(&sq(j, j), dims, r);
    let sij = box_sum(&sq(i, j), dims, r);

    let mut cc_sum = 0.0;
    let mut d_sj = vec![0.0; n];
    let mut d_sjj = vec![0.0; n];
    let mut d_sij = vec![0.0; n];
    for x in 0..n {
        let cross = sij[x] - si[x] * sj[x] / count;
        let ivar = sii[x] - si[x] * si[x] / count;
        let jvar = sjj[x] - sj[x] * sj[x] / count;
        if ivar / count < FLAT_VARIANCE || jvar / count < FLAT_VARIANCE {
            continue;
        }
        let denom = ivar * jvar;
        cc_sum += cross * cross / denom;
        let dc = 2.0 * cross / denom;
        let dv = -cross * cross / (denom * jvar);
        d_sij[x] = dc;
        d_sjj[x] = dv;
        d_sj[x] = -dc * si[x] / count - 2.0 * dv * sj[x] / count;
    }
    let loss = 1.0 - cc_sum / n as f64;

    let a = box_sum_adjoint(&d_sj, dims, r);
    let b = box_sum_adjoint(&d_sjj, dims, r);
    let c = box_sum_adjoint(&d_sij, dims, r);
    let scale = -1.0 / n as f64;
    let grad = (0..n)
        .map(|y| scale * (a[y] + 2.0 * j[y] * b[y] + i[y] * c[y]))
        .collect();
    Ok((loss, grad))
}
