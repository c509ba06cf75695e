//! Coarse-to-fine registration driver.
//!
//! At the coarsest level a stationary velocity is optimized from zero. At every
//! finer level the previous solution is upsampled (`φ̃`) and a residual velocity
//! `Δv` is optimized from zero, the level's displacement being
//! `compose(φ̃, exp(Δv))`: the residual deformation is applied first, then the
//! upsampled coarse one.
//!
//! The optimizer is normalized gradient descent with step-halving line control:
//! a proposal is accepted only if it lowers the loss, so every level's accepted
//! loss trajectory is non-increasing. Gradients are taken with respect to the
//! level's total displacement and applied to the velocity directly, treating
//! both `∂u/∂Δu` and `∂Δu/∂Δv` as the identity.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    build_pyramid, check_pyramid_depth, extract_fallback_features, FeaturePyramid,
};
use crate::field::{
    compose_fields, downsample, downsample_adjoint, integrate_velocity, upsample_field, warp,
    warp_labels, DEFAULT_SQUARING_STEPS,
};
use crate::filter::gaussian_blur;
use crate::losses::{
    hfc_terms, ncc_loss, pullback, smoothness_loss, soft_dice_loss, total_loss, LossComponents,
    LossReport, LossWeights, DEFAULT_NCC_WINDOW,
};
use crate::tensor::{
    voxel_count, DisplacementField, FeatureVolume, Grid, LabelVolume, VelocityField, Volume,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Pyramid depth `n`; level 1 is full resolution.
    pub levels: usize,
    /// Iteration caps, coarsest level first.
    pub iterations: Vec<usize>,
    /// Largest per-voxel velocity update of a proposal, in voxels of the level.
    pub step_size: f64,
    /// Per-voxel update clip at level 1; doubles with every coarser level.
    pub step_clip: f64,
    pub squaring_steps: usize,
    pub ncc_window: usize,
    pub weights: LossWeights,
    /// Relative loss decrease below which a level is considered converged...
    pub tolerance: f64,
    /// ...measured over this many iterations.
    pub tolerance_window: usize,
    /// Consecutive proposals without meaningful improvement before the step halves.
    pub plateau_patience: usize,
    /// Gaussian width (voxels) applied to the descent direction; 0 disables.
    pub gradient_smoothing: f64,
    /// A level stops once the step shrinks below this.
    pub min_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            iterations: vec![200, 150, 100, 60],
            step_size: 0.5,
            step_clip: 0.4,
            squaring_steps: DEFAULT_SQUARING_STEPS,
            ncc_window: DEFAULT_NCC_WINDOW,
            weights: LossWeights::default(),
            tolerance: 1e-5,
            tolerance_window: 10,
            plateau_patience: 5,
            gradient_smoothing: 1.0,
            min_step: 1e-3,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::invalid("levels must be at least 1"));
        }
        if self.iterations.len() != self.levels {
            return Err(Error::invalid(format!(
                "{} iteration caps given for {} levels",
                self.iterations.len(),
                self.levels
            )));
        }
        if self.iterations.contains(&0) {
            return Err(Error::invalid("iteration caps must be positive"));
        }
        let positive = [
            self.step_size,
            self.step_clip,
            self.tolerance,
            self.min_step,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(
                "step_size, step_clip, tolerance and min_step must be positive",
            ));
        }
        if !(self.gradient_smoothing.is_finite() && self.gradient_smoothing >= 0.0) {
            return Err(Error::invalid("gradient_smoothing must be non-negative"));
        }
        if self.squaring_steps == 0 || self.tolerance_window == 0 || self.plateau_patience == 0 {
            return Err(Error::invalid(
                "squaring_steps, tolerance_window and plateau_patience must be positive",
            ));
        }
        if self.ncc_window < 3 || self.ncc_window.is_multiple_of(2) {
            return Err(Error::invalid("ncc_window must be odd and at least 3"));
        }
        self.weights.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn iterations_for(&self, level: usize) -> usize {
        self.iterations[self.levels - level]
    }
}

/// Optimization record of one pyramid level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub level: usize,
    pub dims: [usize; 3],
    /// Accepted loss after each iteration, starting with the level's initial loss.
    pub losses: Vec<f64>,
    pub iterations: usize,
    pub accepted: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    /// Full-resolution displacement `φ¹`.
    pub field: DisplacementField,
    /// Coarsest level first.
    pub levels: Vec<LevelTrace>,
    /// Full-resolution loss of the identity transform.
    pub initial: LossReport,
    /// Full-resolution loss of `field`.
    pub report: LossReport,
}

/// Optional weak supervision: moving and fixed segmentations.
#[derive(Clone, Copy, Debug)]
pub struct LabelPair<'a> {
    pub moving: &'a LabelVolume,
    pub fixed: &'a LabelVolume,
}

struct DiceTerm<'a> {
    moving_onehot: FeatureVolume,
    fixed: &'a LabelVolume,
    labels: Vec<u32>,
}

/// Objective at one pyramid level.
struct LevelObjective<'a> {
    level: usize,
    moving: &'a Volume,
    fixed: &'a Volume,
    feat_moving: &'a FeaturePyramid,
    feat_fixed: &'a FeaturePyramid,
    dice: Option<&'a DiceTerm<'a>>,
    base: DisplacementField,
    cfg: &'a SolverConfig,
}

struct Evaluation {
    report: LossReport,
    grad: Option<DisplacementField>,
}

fn accumulate(acc: &mut [f64], g: &DisplacementField, weight: f64) {
    acc.iter_mut()
        .zip(g.data())
        .for_each(|(a, v)| *a += weight * v);
}

impl LevelObjective<'_> {
    /// Total displacement of the level for a residual velocity.
    fn displacement(&self, velocity: &VelocityField) -> Result<DisplacementField> {
        let residual = integrate_velocity(velocity, self.cfg.squaring_steps)?;
        compose_fields(&self.base, &residual)
    }

    fn evaluate_displacement(&self, u: &DisplacementField, want_grad: bool) -> Result<Evaluation> {
        let w = &self.cfg.weights;
        let dims = u.dims();
        let mut grad = vec![0.0; 3 * voxel_count(dims)];
        let mut parts = LossComponents::default();

        let warped = warp(self.moving, u)?;
        let (ncc, dncc) = ncc_loss(&warped, self.fixed, self.cfg.ncc_window)?;
        parts.ncc = Some(ncc);
        if want_grad && w.lambda_ncc > 0.0 {
            accumulate(&mut grad, &pullback(self.moving, u, &dncc)?, w.lambda_ncc);
        }

        // HFC over the available scales level..n; coarser fields are pooled copies of u.
        let mut fields = vec![u.clone()];
        for _ in self.level..self.feat_moving.len() {
            let next = downsample(fields.last().unwrap())?;
            fields.push(next);
        }
        let hfc = hfc_terms(self.feat_moving, self.feat_fixed, self.level, &fields)?;
        parts.hfc = Some(hfc.loss);
        parts.hfc_levels = hfc.level_terms.clone();
        if want_grad && w.lambda_hfc > 0.0 {
            let mut acc = hfc.grads.last().unwrap().clone();
            for k in (0..fields.len() - 1).rev() {
                acc = hfc.grads[k].add(&downsample_adjoint(&acc, fields[k].dims()))?;
            }
            accumulate(&mut grad, &acc, w.lambda_hfc);
        }

        if let Some(dice) = self.dice {
            let probs = warp(&dice.moving_onehot, u)?;
            let (value, dprobs) = soft_dice_loss(&probs, dice.fixed, &dice.labels)?;
            parts.dice = Some(value);
            if want_grad && w.lambda_dice > 0.0 {
                let g = pullback(&dice.moving_onehot, u, dprobs.values())?;
                accumulate(&mut grad, &g, w.lambda_dice);
            }
        }

        let (smooth, dsmooth) = smoothness_loss(u)?;
        parts.smooth = Some(smooth);
        if want_grad && w.lambda_smooth > 0.0 {
            accumulate(&mut grad, &dsmooth, w.lambda_smooth);
        }

        let report = total_loss(&parts, w);
        let grad = if want_grad {
            Some(DisplacementField::new(dims, grad)?)
        } else {
            None
        };
        Ok(Evaluation { report, grad })
    }

    fn evaluate(&self, velocity: &VelocityField) -> Result<Evaluation> {
        let u = self.displacement(velocity)?;
        self.evaluate_displacement(&u, true)
    }
}

fn non_finite(level: usize, iteration: usize, report: &LossReport) -> Error {
    Error::NonFiniteLoss {
        level,
        iteration,
        detail: format!("{report:?}"),
    }
}

/// Descent direction scaled so its largest vector has unit length.
fn descent_direction(grad: &DisplacementField, sigma: f64) -> Option<DisplacementField> {
    let dims = grad.dims();
    let n = voxel_count(dims);
    let mut data = Vec::with_capacity(3 * n);
    for c in 0..3 {
        let comp = grad.component(c);
        if sigma > 0.0 {
            data.extend(gaussian_blur(comp, dims, sigma).into_iter().map(|v| -v));
        } else {
            data.extend(comp.iter().map(|v| -v));
        }
    }
    let dir = DisplacementField::new(dims, data).ok()?;
    let peak = dir.max_norm();
    (peak > 0.0 && peak.is_finite()).then(|| dir.scaled(1.0 / peak))
}

/// `velocity + step · direction`, each voxel's update clipped to `clip` voxels.
fn propose(
    velocity: &VelocityField,
    direction: &DisplacementField,
    step: f64,
    clip: f64,
) -> VelocityField {
    let n = voxel_count(velocity.dims());
    let mut out = velocity.clone();
    let data = out.data_mut();
    for idx in 0..n {
        let d = direction.vector(idx);
        let norm = step * (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let scale = if norm > clip {
            step * clip / norm
        } else {
            step
        };
        for c in 0..3 {
            data[c * n + idx] += scale * d[c];
        }
    }
    out
}

fn optimize_level(
    objective: &LevelObjective<'_>,
    cfg: &SolverConfig,
) -> Result<(DisplacementField, LevelTrace)> {
    let start = Instant::now();
    let level = objective.level;
    let dims = objective.moving.dims();
    let clip = cfg.step_clip * (1u64 << (level - 1)) as f64;
    let mut velocity = DisplacementField::zeros(dims);
    let mut current = objective.evaluate(&velocity)?;
    if !current.report.total.is_finite() {
        return Err(non_finite(level, 0, &current.report));
    }
    let mut losses = vec![current.report.total];
    let mut step = cfg.step_size;
    let mut stalled = 0;
    let mut accepted = 0;
    let mut iterations = 0;

    for iteration in 1..=cfg.iterations_for(level) {
        iterations = iteration;
        let grad = current.grad.as_ref().expect("gradient requested");
        let Some(direction) = descent_direction(grad, cfg.gradient_smoothing) else {
            break;
        };
        let candidate = propose(&velocity, &direction, step, clip);
        let trial = objective.evaluate(&candidate)?;
        if !trial.report.total.is_finite() {
            return Err(non_finite(level, iteration, &trial.report));
        }
        let previous = current.report.total;
        if trial.report.total < previous {
            let gain = (previous - trial.report.total) / previous.abs().max(f64::MIN_POSITIVE);
            velocity = candidate;
            current = trial;
            accepted += 1;
            if gain < cfg.tolerance {
                stalled += 1;
            } else {
                stalled = 0;
            }
        } else {
            // line control: a rejected proposal halves the step at once
            step *= 0.5;
            stalled = 0;
        }
        if stalled >= cfg.plateau_patience {
            step *= 0.5;
            stalled = 0;
        }
        losses.push(current.report.total);

        if losses.len() > cfg.tolerance_window {
            let old = losses[losses.len() - 1 - cfg.tolerance_window];
            let new = current.report.total;
            if (old - new) / old.abs().max(f64::MIN_POSITIVE) < cfg.tolerance {
                break;
            }
        }
        if step < cfg.min_step {
            break;
        }
    }

    let u = objective.displacement(&velocity)?;
    let trace = LevelTrace {
        level,
        dims,
        losses,
        iterations,
        accepted,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((u, trace))
}

fn image_pyramid(vol: &Volume, levels: usize) -> Result<Vec<Volume>> {
    let mut out = vec![vol.clone()];
    for _ in 1..levels {
        let next = downsample(out.last().unwrap())?;
        out.push(next);
    }
    Ok(out)
}

/// Registers `moving` onto `fixed`: the returned field `φ` satisfies
/// `moving ∘ (id + φ) ≈ fixed`.
pub fn register(
    moving: &Volume,
    fixed: &Volume,
    moving_feats: &FeatureVolume,
    fixed_feats: &FeatureVolume,
    labels: Option<LabelPair<'_>>,
    cfg: &SolverConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    let dims = fixed.dims();
    if moving.dims() != dims || moving_feats.dims() != dims || fixed_feats.dims() != dims {
        return Err(Error::shape(format!(
            "inconsistent dims: moving {:?}, fixed {dims:?}, moving features {:?}, fixed features {:?}",
            moving.dims(),
            moving_feats.dims(),
            fixed_feats.dims()
        )));
    }
    if moving_feats.channels() != fixed_feats.channels() {
        return Err(Error::shape(format!(
            "feature channels differ: {} vs {}",
            moving_feats.channels(),
            fixed_feats.channels()
        )));
    }
    check_pyramid_depth(dims, cfg.levels)?;

    let dice = match labels {
        Some(pair) => {
            if pair.moving.dims() != dims || pair.fixed.dims() != dims {
                return Err(Error::shape("label dims differ from image dims"));
            }
            let labels = pair.fixed.foreground_labels();
            if labels.is_empty() {
                None
            } else {
                Some(DiceTerm {
                    moving_onehot: pair.moving.one_hot(&labels)?,
                    fixed: pair.fixed,
                    labels,
                })
            }
        }
        None => None,
    };

    let moving_pyr = image_pyramid(moving, cfg.levels)?;
    let fixed_pyr = image_pyramid(fixed, cfg.levels)?;
    let feat_moving = build_pyramid(moving_feats, cfg.levels)?;
    let feat_fixed = build_pyramid(fixed_feats, cfg.levels)?;

    let objective_at = |level: usize, base: DisplacementField| LevelObjective {
        level,
        moving: &moving_pyr[level - 1],
        fixed: &fixed_pyr[level - 1],
        feat_moving: &feat_moving,
        feat_fixed: &feat_fixed,
        dice: if level == 1 { dice.as_ref() } else { None },
        base,
        cfg,
    };

    let mut traces = Vec::with_capacity(cfg.levels);
    let mut field: Option<DisplacementField> = None;
    for level in (1..=cfg.levels).rev() {
        let level_dims = moving_pyr[level - 1].dims();
        let base = match field.take() {
            None => DisplacementField::zeros(level_dims),
            Some(coarse) => upsample_field(&coarse, level_dims)?,
        };
        let (u, trace) = optimize_level(&objective_at(level, base), cfg)?;
        field = Some(u);
        traces.push(trace);
    }
    let field = field.expect("at least one level");

    let full = objective_at(1, DisplacementField::zeros(dims));
    let initial = full
        .evaluate_displacement(&DisplacementField::zeros(dims), false)?
        .report;
    let report = full.evaluate_displacement(&field, false)?.report;
    if !report.total.is_finite() {
        return Err(non_finite(1, traces[traces.len() - 1].iterations, &report));
    }
    Ok(RegistrationResult {
        field,
        levels: traces,
        initial,
        report,
    })
}

/// [`register`] with the built-in feature extractor supplying both embeddings.
pub fn register_with_fallback_features(
    moving: &Volume,
    fixed: &Volume,
    labels: Option<LabelPair<'_>>,
    cfg: &SolverConfig,
) -> Result<RegistrationResult> {
    let fm = extract_fallback_features(moving)?;
    let ff = extract_fallback_features(fixed)?;
    register(moving, fixed, &fm, &ff, labels, cfg)
}

/// Applies a registration result to an image or feature grid.
pub fn warp_with_result<G: Grid>(grid: &G, result: &RegistrationResult) -> Result<G> {
    warp(grid, &result.field)
}

/// Applies a registration result to a label grid (nearest neighbor).
pub fn warp_labels_with_result(
    labels: &LabelVolume,
    result: &RegistrationResult,
) -> Result<LabelVolume> {
    warp_labels(labels, &result.field)
}
