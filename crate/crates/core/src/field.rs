//! Deformation-field algebra.
//!
//! Fields hold displacements in voxel units. Warping is backward: the output at
//! voxel `x` is the input sampled at `x + u(x)`. All sampling clamps coordinates to
//! `[0, dim - 1]` (border replication).

use crate::error::{Error, Result};
use crate::tensor::{
    grid_position, linear_index, voxel_count, Dims, DisplacementField, Grid, LabelVolume, Spacing,
    VelocityField,
};

/// Default number of squarings when integrating a stationary velocity field.
pub const DEFAULT_SQUARING_STEPS: usize = 7;

/// Clamped linear interpolation setup along one axis: lower node, upper node,
/// fractional weight of the upper node, and whether the coordinate was inside the
/// grid (so the interpolant has a non-zero derivative).
#[inline]
fn axis_weights(p: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let max = (n - 1) as f64;
    let (pc, inside) = if p < 0.0 {
        (0.0, false)
    } else if p > max {
        (max, false)
    } else {
        (p, true)
    };
    let i0 = (pc.floor() as usize).min(n - 2);
    (i0, i0 + 1, pc - i0 as f64, inside)
}

/// Eight-node trilinear stencil at one continuous position.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub idx: [usize; 8],
    pub weight: [f64; 8],
}

/// Trilinear stencil plus the partial derivatives of each weight with respect to
/// the sampling position.
#[derive(Clone, Copy, Debug)]
pub struct GradStencil {
    pub idx: [usize; 8],
    pub weight: [f64; 8],
    pub dweight: [[f64; 8]; 3],
}

/// Linear indices of the eight corners `[x0|x1][y0|y1][z0|z1]`.
#[inline]
fn corner_indices(
    dims: Dims,
    x: (usize, usize),
    y: (usize, usize),
    z: (usize, usize),
) -> [usize; 8] {
    let sx = dims[1] * dims[2];
    let sy = dims[2];
    let base = x.0 * sx + y.0 * sy + z.0;
    let (ox, oy, oz) = ((x.1 - x.0) * sx, (y.1 - y.0) * sy, z.1 - z.0);
    [
        base,
        base + oz,
        base + oy,
        base + oy + oz,
        base + ox,
        base + ox + oz,
        base + ox + oy,
        base + ox + oy + oz,
    ]
}

impl Stencil {
    #[inline]
    pub fn new(dims: Dims, pos: [f64; 3]) -> Self {
        let (x0, x1, tx, _) = axis_weights(pos[0], dims[0]);
        let (y0, y1, ty, _) = axis_weights(pos[1], dims[1]);
        let (z0, z1, tz, _) = axis_weights(pos[2], dims[2]);
        let idx = corner_indices(dims, (x0, x1), (y0, y1), (z0, z1));
        let (ux, uy, uz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
        let weight = [
            ux * uy * uz,
            ux * uy * tz,
            ux * ty * uz,
            ux * ty * tz,
            tx * uy * uz,
            tx * uy * tz,
            tx * ty * uz,
            tx * ty * tz,
        ];
        Stencil { idx, weight }
    }

    #[inline]
    pub fn apply(&self, values: &[f64]) -> f64 {
        let mut acc = 0.0;
        for n in 0..8 {
            acc += self.weight[n] * values[self.idx[n]];
        }
        acc
    }
}

impl GradStencil {
    #[inline]
    pub fn new(dims: Dims, pos: [f64; 3]) -> Self {
        let (x0, x1, tx, ix) = axis_weights(pos[0], dims[0]);
        let (y0, y1, ty, iy) = axis_weights(pos[1], dims[1]);
        let (z0, z1, tz, iz) = axis_weights(pos[2], dims[2]);
        let w = [[1.0 - tx, tx], [1.0 - ty, ty], [1.0 - tz, tz]];
        let slope = |inside: bool| if inside { [-1.0, 1.0] } else { [0.0, 0.0] };
        let dw = [slope(ix), slope(iy), slope(iz)];
        let idx = corner_indices(dims, (x0, x1), (y0, y1), (z0, z1));
        let mut weight = [0.0; 8];
        let mut dweight = [[0.0; 8]; 3];
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    let n = a * 4 + b * 2 + c;
                    weight[n] = w[0][a] * w[1][b] * w[2][c];
                    dweight[0][n] = dw[0][a] * w[1][b] * w[2][c];
                    dweight[1][n] = w[0][a] * dw[1][b] * w[2][c];
                    dweight[2][n] = w[0][a] * w[1][b] * dw[2][c];
                }
            }
        }
        GradStencil {
            idx,
            weight,
            dweight,
        }
    }

    /// Interpolated value and its gradient with respect to the sampling position.
    #[inline]
    pub fn apply(&self, values: &[f64]) -> (f64, [f64; 3]) {
        let mut v = 0.0;
        let mut g = [0.0; 3];
        for n in 0..8 {
            let s = values[self.idx[n]];
            v += self.weight[n] * s;
            g[0] += self.dweight[0][n] * s;
            g[1] += self.dweight[1][n] * s;
            g[2] += self.dweight[2][n] * s;
        }
        (v, g)
    }
}

fn check_pos(pos: [f64; 3]) -> Result<()> {
    if pos.iter().all(|p| p.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("sampling position {pos:?}")))
    }
}

/// Trilinear sample of every channel of `grid` at a continuous voxel position.
pub fn sample_trilinear<G: Grid>(grid: &G, pos: [f64; 3]) -> Result<Vec<f64>> {
    check_pos(pos)?;
    let st = Stencil::new(grid.dims(), pos);
    Ok((0..grid.channels())
        .map(|c| st.apply(grid.channel(c)))
        .collect())
}

/// Trilinear sample of one scalar channel with the analytic position gradient.
pub fn sample_with_gradient(values: &[f64], dims: Dims, pos: [f64; 3]) -> (f64, [f64; 3]) {
    GradStencil::new(dims, pos).apply(values)
}

fn check_same_dims(a: Dims, b: Dims, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: dims {a:?} vs field {b:?}")));
    }
    Ok(())
}

/// Sampling position `x + u(x)` of voxel `idx`.
#[inline]
pub fn warped_position(field: &DisplacementField, idx: usize) -> [f64; 3] {
    let [i, j, k] = grid_position(field.dims(), idx);
    let u = field.vector(idx);
    [i as f64 + u[0], j as f64 + u[1], k as f64 + u[2]]
}

/// Calls `f(idx, x + u(x))` for every voxel in storage order.
#[inline]
pub fn for_each_warped_position(field: &DisplacementField, mut f: impl FnMut(usize, [f64; 3])) {
    let dims = field.dims();
    let n = voxel_count(dims);
    let (ux, rest) = field.data().split_at(n);
    let (uy, uz) = rest.split_at(n);
    let mut idx = 0;
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                f(
                    idx,
                    [i as f64 + ux[idx], j as f64 + uy[idx], k as f64 + uz[idx]],
                );
                idx += 1;
            }
        }
    }
}

/// Backward warp of any grid: `out(x) = grid(x + u(x))`, channel by channel.
pub fn warp<G: Grid>(grid: &G, field: &DisplacementField) -> Result<G> {
    let dims = grid.dims();
    check_same_dims(dims, field.dims(), "warp")?;
    let n = voxel_count(dims);
    let channels = grid.channels();
    let values = grid.values();
    let mut out = vec![0.0; channels * n];
    for_each_warped_position(field, |idx, pos| {
        let st = Stencil::new(dims, pos);
        for c in 0..channels {
            out[c * n + idx] = st.apply(&values[c * n..(c + 1) * n]);
        }
    });
    Ok(grid.with_values(dims, out))
}

/// Nearest-neighbor backward warp of a label grid.
pub fn warp_labels(labels: &LabelVolume, field: &DisplacementField) -> Result<LabelVolume> {
    let dims = labels.dims();
    check_same_dims(dims, field.dims(), "warp_labels")?;
    let src = labels.labels();
    let n = voxel_count(dims);
    let nearest = |p: f64, len: usize| -> usize { p.round().clamp(0.0, (len - 1) as f64) as usize };
    let out = (0..n)
        .map(|idx| {
            let p = warped_position(field, idx);
            src[linear_index(
                dims,
                nearest(p[0], dims[0]),
                nearest(p[1], dims[1]),
                nearest(p[2], dims[2]),
            )]
        })
        .collect();
    LabelVolume::with_storage(dims, out, labels.storage())
}

/// Composition under backward warping: warping by the result equals warping by
/// `outer` and then by `inner`. `u(x) = u_inner(x) + u_outer(x + u_inner(x))`.
pub fn compose_fields(
    outer: &DisplacementField,
    inner: &DisplacementField,
) -> Result<DisplacementField> {
    check_same_dims(outer.dims(), inner.dims(), "compose_fields")?;
    let dims = inner.dims();
    let n = voxel_count(dims);
    let values = outer.data();
    let mut out = inner.data().to_vec();
    for_each_warped_position(inner, |idx, pos| {
        let st = Stencil::new(dims, pos);
        for c in 0..3 {
            out[c * n + idx] += st.apply(&values[c * n..(c + 1) * n]);
        }
    });
    DisplacementField::new(dims, out)
}

/// `exp(v)` by scaling and squaring: `u = v / 2^steps`, then `steps` times
/// `u <- u + u ∘ (id + u)`.
pub fn integrate_velocity(v: &VelocityField, squaring_steps: usize) -> Result<DisplacementField> {
    if squaring_steps == 0 {
        return Err(Error::invalid("squaring_steps must be at least 1"));
    }
    let mut u = v.scaled(1.0 / (1u64 << squaring_steps) as f64);
    for _ in 0..squaring_steps {
        u = compose_fields(&u, &u)?;
    }
    Ok(u)
}

/// Align-corners source coordinate of target node `t` when resizing `src -> dst`.
#[inline]
fn align_corners(t: usize, src: usize, dst: usize) -> f64 {
    if dst <= 1 || src <= 1 {
        0.0
    } else {
        t as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

/// Trilinear resize onto `target` with align-corners coordinate mapping. No value
/// rescaling.
pub fn resize_trilinear<G: Grid>(grid: &G, target: Dims) -> Result<G> {
    if target.contains(&0) {
        return Err(Error::invalid(format!("target dims {target:?}")));
    }
    let src = grid.dims();
    let n_src = voxel_count(src);
    let n_dst = voxel_count(target);
    let channels = grid.channels();
    let values = grid.values();
    let mut out = vec![0.0; channels * n_dst];
    for idx in 0..n_dst {
        let [i, j, k] = grid_position(target, idx);
        let pos = [
            align_corners(i, src[0], target[0]),
            align_corners(j, src[1], target[1]),
            align_corners(k, src[2], target[2]),
        ];
        let st = Stencil::new(src, pos);
        for c in 0..channels {
            out[c * n_dst + idx] = st.apply(&values[c * n_src..(c + 1) * n_src]);
        }
    }
    Ok(grid.with_values(target, out))
}

/// Upsamples a field to a finer grid and rescales each component by the per-axis
/// dims ratio so displacements stay in (finer) voxel units.
pub fn upsample_field(field: &DisplacementField, target: Dims) -> Result<DisplacementField> {
    let src = field.dims();
    if target.iter().zip(src).any(|(&t, s)| t < s) || target.contains(&0) {
        return Err(Error::invalid(format!(
            "upsample target {target:?} must be at least {src:?}"
        )));
    }
    let resized = resize_trilinear(field, target)?;
    let n = voxel_count(target);
    let mut data = resized.into_data();
    for c in 0..3 {
        let scale = target[c] as f64 / src[c] as f64;
        data[c * n..(c + 1) * n]
            .iter_mut()
            .for_each(|v| *v *= scale);
    }
    DisplacementField::new(target, data)
}

/// Dims after one 2× pooling step.
pub fn halved_dims(dims: Dims) -> Dims {
    dims.map(|d| d.div_ceil(2))
}

/// 2×2×2 average pooling; a trailing odd voxel is pooled over the truncated
/// window. Displacement values are halved to stay in voxel units of the coarse grid.
pub fn downsample<G: Grid>(grid: &G) -> Result<G> {
    let src = grid.dims();
    if src.iter().any(|&d| d < 2) {
        return Err(Error::invalid(format!(
            "cannot downsample dims {src:?}: every axis needs at least 2 voxels"
        )));
    }
    let dst = halved_dims(src);
    let n_src = voxel_count(src);
    let n_dst = voxel_count(dst);
    let channels = grid.channels();
    let values = grid.values();
    let unit = if G::is_displacement() { 0.5 } else { 1.0 };
    let mut out = vec![0.0; channels * n_dst];
    for c in 0..channels {
        let chan = &values[c * n_src..(c + 1) * n_src];
        for idx in 0..n_dst {
            let [i, j, k] = grid_position(dst, idx);
            let mut acc = 0.0;
            let mut count = 0usize;
            for si in 2 * i..(2 * i + 2).min(src[0]) {
                for sj in 2 * j..(2 * j + 2).min(src[1]) {
                    for sk in 2 * k..(2 * k + 2).min(src[2]) {
                        acc += chan[linear_index(src, si, sj, sk)];
                        count += 1;
                    }
                }
            }
            out[c * n_dst + idx] = unit * acc / count as f64;
        }
    }
    Ok(grid.with_values(dst, out))
}

/// Adjoint of [`downsample`] for a displacement field: distributes a gradient on
/// the coarse grid back onto the fine grid it was pooled from.
pub fn downsample_adjoint(coarse_grad: &DisplacementField, fine: Dims) -> DisplacementField {
    let dst = coarse_grad.dims();
    debug_assert_eq!(dst, halved_dims(fine));
    let n_fine = voxel_count(fine);
    let mut out = vec![0.0; 3 * n_fine];
    for c in 0..3 {
        let g = coarse_grad.component(c);
        for idx in 0..n_fine {
            let [i, j, k] = grid_position(fine, idx);
            let (ci, cj, ck) = (i / 2, j / 2, k / 2);
            let count = ((2 * ci + 2).min(fine[0]) - 2 * ci)
                * ((2 * cj + 2).min(fine[1]) - 2 * cj)
                * ((2 * ck + 2).min(fine[2]) - 2 * ck);
            out[c * n_fine + idx] = 0.5 * g[linear_index(dst, ci, cj, ck)] / count as f64;
        }
    }
    DisplacementField::new(fine, out).expect("finite gradient")
}

/// Jacobian determinant of `φ(x) = x + u(x)` on interior voxels, 1 on the
/// one-voxel boundary shell.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianMap {
    dims: Dims,
    det: Vec<f64>,
}

impl JacobianMap {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn det(&self) -> &[f64] {
        &self.det
    }

    pub fn is_interior(&self, idx: usize) -> bool {
        let p = grid_position(self.dims, idx);
        (0..3).all(|a| p[a] >= 1 && p[a] + 1 < self.dims[a])
    }

    /// Determinants of interior voxels only.
    pub fn interior(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.det.len())
            .filter(|&idx| self.is_interior(idx))
            .map(|idx| self.det[idx])
    }

    /// Share of interior voxels with a non-positive determinant.
    pub fn folding_fraction(&self) -> f64 {
        let (mut folded, mut total) = (0usize, 0usize);
        for d in self.interior() {
            total += 1;
            if d <= 0.0 {
                folded += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            folded as f64 / total as f64
        }
    }
}

/// Central-difference Jacobian determinant of `I + ∇u`. Fields are in voxel
/// units, and the determinant of the physical Jacobian `S (I + ∇u) S⁻¹` equals
/// the voxel-unit one, so `spacing` only has to be valid.
pub fn jacobian_map(field: &DisplacementField, spacing: Spacing) -> Result<JacobianMap> {
    let dims = field.dims();
    if dims.iter().any(|&d| d < 3) {
        return Err(Error::invalid(format!(
            "jacobian needs at least 3 voxels per axis, got {dims:?}"
        )));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::invalid(format!("spacing {spacing:?}")));
    }
    let n = voxel_count(dims);
    let mut det = vec![1.0; n];
    let strides = [dims[1] * dims[2], dims[2], 1];
    for i in 1..dims[0] - 1 {
        for j in 1..dims[1] - 1 {
            for k in 1..dims[2] - 1 {
                let idx = linear_index(dims, i, j, k);
                let mut m = [[0.0; 3]; 3];
                for (c, row) in m.iter_mut().enumerate() {
                    let comp = field.component(c);
                    for (a, entry) in row.iter_mut().enumerate() {
                        let s = strides[a];
                        *entry = 0.5 * (comp[idx + s] - comp[idx - s]);
                    }
                    row[c] += 1.0;
                }
                let d = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
                if !d.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "jacobian determinant at voxel ({i}, {j}, {k})"
                    )));
                }
                det[idx] = d;
            }
        }
    }
    Ok(JacobianMap { dims, det })
}
