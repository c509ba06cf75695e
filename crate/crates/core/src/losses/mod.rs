//! Registration objective terms.
//!
//! Every term returns its value together with an analytic gradient. Similarity
//! terms are differentiated with respect to the warped values, and
//! [`pullback`] carries such a gradient onto the displacement that produced the
//! warp via the trilinear interpolant's spatial derivative.

mod dice;
mod hfc;
mod ncc;
mod smooth;

pub use dice::soft_dice_loss;
pub use hfc::{hfc_loss, hfc_terms, HfcOutput};
pub use ncc::{ncc_loss, DEFAULT_NCC_WINDOW};
pub use smooth::smoothness_loss;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{for_each_warped_position, GradStencil};
use crate::tensor::{voxel_count, DisplacementField, Grid};

/// Weights of the four objective terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ncc: f64,
    pub lambda_hfc: f64,
    pub lambda_dice: f64,
    pub lambda_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ncc: 1.0,
            lambda_hfc: 1.0,
            lambda_dice: 1.0,
            lambda_smooth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_ncc,
            self.lambda_hfc,
            self.lambda_dice,
            self.lambda_smooth,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(format!(
                "loss weights must be non-negative: {self:?}"
            )));
        }
        if self.lambda_ncc <= 0.0 && self.lambda_hfc <= 0.0 && self.lambda_dice <= 0.0 {
            return Err(Error::invalid(
                "at least one similarity weight (ncc, hfc, dice) must be positive",
            ));
        }
        Ok(())
    }
}

/// Unweighted term values; `None` marks a skipped term.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub ncc: Option<f64>,
    pub hfc: Option<f64>,
    pub hfc_levels: Vec<f64>,
    pub dice: Option<f64>,
    pub smooth: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub ncc: f64,
    pub hfc: f64,
    /// `None` in unsupervised runs.
    pub dice: Option<f64>,
    pub smooth: f64,
    /// Weighted per-level feature-consistency terms, finest level first.
    pub hfc_levels: Vec<f64>,
}

/// Weighted sum of the available terms.
pub fn total_loss(components: &LossComponents, weights: &LossWeights) -> LossReport {
    let ncc = components.ncc.unwrap_or(0.0);
    let hfc = components.hfc.unwrap_or(0.0);
    let smooth = components.smooth.unwrap_or(0.0);
    let dice = components.dice;
    let total = weights.lambda_ncc * ncc
        + weights.lambda_hfc * hfc
        + weights.lambda_dice * dice.unwrap_or(0.0)
        + weights.lambda_smooth * smooth;
    LossReport {
        total,
        ncc,
        hfc,
        dice,
        smooth,
        hfc_levels: components.hfc_levels.clone(),
    }
}

/// Chain rule through a backward warp: given `∂L/∂W_c(x)` for `W = source ∘ (id + u)`,
/// returns `∂L/∂u(x) = Σ_c ∂L/∂W_c(x) · ∇source_c(x + u(x))`.
pub fn pullback<G: Grid>(
    source: &G,
    field: &DisplacementField,
    dl_dwarped: &[f64],
) -> Result<DisplacementField> {
    let dims = source.dims();
    if dims != field.dims() {
        return Err(Error::shape(format!(
            "pullback: source {dims:?} vs field {:?}",
            field.dims()
        )));
    }
    let n = voxel_count(dims);
    let channels = source.channels();
    if dl_dwarped.len() != channels * n {
        return Err(Error::shape("pullback: gradient length mismatch"));
    }
    let values = source.values();
    let mut out = vec![0.0; 3 * n];
    for_each_warped_position(field, |idx, pos| {
        let st = GradStencil::new(dims, pos);
        let mut acc = [0.0; 3];
        for c in 0..channels {
            let g = dl_dwarped[c * n + idx];
            if g == 0.0 {
                continue;
            }
            let (_, grad) = st.apply(&values[c * n..(c + 1) * n]);
            for a in 0..3 {
                acc[a] += g * grad[a];
            }
        }
        for a in 0..3 {
            out[a * n + idx] = acc[a];
        }
    });
    DisplacementField::new(dims, out)
}
