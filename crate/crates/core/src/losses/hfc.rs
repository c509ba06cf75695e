use crate::error::{Error, Result};
use crate::features::FeaturePyramid;
use crate::field::{for_each_warped_position, GradStencil};
use crate::tensor::{voxel_count, DisplacementField, Grid};

/// Hierarchical feature-consistency value and gradients.
#[derive(Clone, Debug)]
pub struct HfcOutput {
    pub loss: f64,
    /// Weighted term of each evaluated level, in the order of the input fields.
    pub level_terms: Vec<f64>,
    /// Weighted `∂loss/∂u^l` for each evaluated level.
    pub grads: Vec<DisplacementField>,
}

/// `Σ_l 2^{-(l-1)} · mean_{c,x} (F_mov^l ∘ φ^l − F_fix^l)²` over every pyramid level.
pub fn hfc_loss(
    moving: &FeaturePyramid,
    fixed: &FeaturePyramid,
    fields: &[DisplacementField],
) -> Result<HfcOutput> {
    hfc_terms(moving, fixed, 1, fields)
}

/// The feature-consistency sum restricted to levels `first_level ..= n`;
/// `fields[i]` belongs to level `first_level + i`. Level weights keep their
/// absolute `2^{-(l-1)}` values.
pub fn hfc_terms(
    moving: &FeaturePyramid,
    fixed: &FeaturePyramid,
    first_level: usize,
    fields: &[DisplacementField],
) -> Result<HfcOutput> {
    if moving.len() != fixed.len() || moving.channels() != fixed.channels() {
        return Err(Error::shape(format!(
            "pyramids differ: {} levels × {} channels vs {} levels × {} channels",
            moving.len(),
            moving.channels(),
            fixed.len(),
            fixed.channels()
        )));
    }
    if first_level == 0 || first_level + fields.len() - 1 != moving.len() {
        return Err(Error::shape(format!(
            "{} fields starting at level {first_level} do not cover a {}-level pyramid",
            fields.len(),
            moving.len()
        )));
    }
    let mut loss = 0.0;
    let mut level_terms = Vec::with_capacity(fields.len());
    let mut grads = Vec::with_capacity(fields.len());
    for (offset, field) in fields.iter().enumerate() {
        let level = first_level + offset;
        let fm = moving.level(level);
        let ff = fixed.level(level);
        if fm.dims() != ff.dims() || fm.dims() != field.dims() {
            return Err(Error::shape(format!(
                "level {level}: moving {:?}, fixed {:?}, field {:?}",
                fm.dims(),
                ff.dims(),
                field.dims()
            )));
        }
        let weight = 1.0 / (1u64 << (level - 1)) as f64;
        // one stencil pass yields both the residual and its position derivative
        let dims = field.dims();
        let n = voxel_count(dims);
        let channels = fm.channels();
        let count = (channels * n) as f64;
        let (mv, fv) = (fm.values(), ff.values());
        let mut sq = 0.0;
        let mut grad = vec![0.0; 3 * n];
        for_each_warped_position(field, |idx, pos| {
            let st = GradStencil::new(dims, pos);
            let mut acc = [0.0; 3];
            for c in 0..channels {
                let (v, g) = st.apply(&mv[c * n..(c + 1) * n]);
                let r = v - fv[c * n + idx];
                sq += r * r;
                for a in 0..3 {
                    acc[a] += r * g[a];
                }
            }
            let scale = weight * 2.0 / count;
            for a in 0..3 {
                grad[a * n + idx] = scale * acc[a];
            }
        });
        let mse = sq / count;
        grads.push(DisplacementField::new(dims, grad)?);
        level_terms.push(weight * mse);
        loss += weight * mse;
    }
    Ok(HfcOutput {
        loss,
        level_terms,
        grads,
    })
}
