use crate::error::Result;
use crate::tensor::{voxel_count, DisplacementField, Grid};

/// Diffusion regularizer on the displacement: for every component and axis, the
/// mean of squared forward differences over the sites where the difference
/// exists, summed over the nine (component, axis) pairs. Returns the loss and its
/// gradient. An axis of length 1 has no difference sites and contributes nothing.
pub fn smoothness_loss(u: &DisplacementField) -> Result<(f64, DisplacementField)> {
    let dims = u.dims();
    let n = voxel_count(dims);
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut loss = 0.0;
    let mut grad = vec![0.0; 3 * n];
    for c in 0..3 {
        let comp = u.component(c);
        let g = &mut grad[c * n..(c + 1) * n];
        for axis in (0..3).filter(|&a| dims[a] > 1) {
            let stride = strides[axis];
            let sites = n / dims[axis] * (dims[axis] - 1);
            let inv = 1.0 / sites as f64;
            let mut acc = 0.0;
            for idx in 0..n {
                if (idx / stride) % dims[axis] == dims[axis] - 1 {
                    continue;
                }
                let d = comp[idx + stride] - comp[idx];
                acc += d * d;
                g[idx + stride] += 2.0 * d * inv;
                g[idx] -= 2.0 * d * inv;
            }
            loss += acc * inv;
        }
    }
    Ok((loss, DisplacementField::new(dims, grad)?))
}
