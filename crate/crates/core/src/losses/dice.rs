use crate::error::{Error, Result};
use crate::tensor::{voxel_count, FeatureVolume, Grid, LabelVolume};

const DICE_EPS: f64 = 1e-5;

/// Soft Dice loss `1 − mean_c (2Σpg + ε)/(Σp + Σg + ε)` between soft masks
/// (channel `c` ↔ `labels[c]`) and the one-hot encoding of `fixed_labels`.
/// Returns the loss and `∂loss/∂p`.
pub fn soft_dice_loss(
    warped_probs: &FeatureVolume,
    fixed_labels: &LabelVolume,
    labels: &[u32],
) -> Result<(f64, FeatureVolume)> {
    let dims = warped_probs.dims();
    if dims != fixed_labels.dims() {
        return Err(Error::shape(format!(
            "dice: probabilities {dims:?} vs labels {:?}",
            fixed_labels.dims()
        )));
    }
    if warped_probs.channels() != labels.len() || labels.is_empty() {
        return Err(Error::shape(format!(
            "dice: {} probability channels for {} labels",
            warped_probs.channels(),
            labels.len()
        )));
    }
    let n = voxel_count(dims);
    let target = fixed_labels.labels();
    let mut loss = 0.0;
    let mut grad = vec![0.0; labels.len() * n];
    let inv_labels = 1.0 / labels.len() as f64;
    for (c, &label) in labels.iter().enumerate() {
        let p = warped_probs.channel(c);
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut gsum = 0.0;
        for (x, &pv) in p.iter().enumerate() {
            psum += pv;
            if target[x] == label {
                inter += pv;
                gsum += 1.0;
            }
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = psum + gsum + DICE_EPS;
        loss += num / den;
        let g = &mut grad[c * n..(c + 1) * n];
        for (x, slot) in g.iter_mut().enumerate() {
            let gx = if target[x] == label { 1.0 } else { 0.0 };
            *slot = -inv_labels * (2.0 * gx * den - num) / (den * den);
        }
    }
    let loss = 1.0 - loss * inv_labels;
    Ok((loss, FeatureVolume::new(labels.len(), dims, grad)?))
}
