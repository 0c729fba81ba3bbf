//! Classification, quality and regression losses with exact gradients.
//!
//! The classification loss is the hard-negative reweighted focal family:
//!
//! ```text
//!            ⎧ −log(p) · α · m₊(p)                   positive
//! L(p)   =   ⎨ −log(1−p) · (1−α) · m₋(p)             negative, gate ≤ thr
//!            ⎩ −log(1−p) · (1−α) · m₋(p) · w         negative, gate > thr
//! ```
//!
//! In [`AhrMode::AsWritten`] the modulators are `m₊ = p^γ`, `m₋ = (1−p)^γ`;
//! in [`AhrMode::StandardFocal`] they are the usual `m₊ = (1−p)^γ`,
//! `m₋ = p^γ`. All gradients are taken with respect to the pre-sigmoid logit.

use serde::{Deserialize, Serialize};

use crate::assign::{Provenance, SelectionSet};
use crate::error::{Error, Result};
use crate::model::{sigmoid, DenseOutput, OutputGrads, REG_DIMS};
use crate::raster::{Mask, Raster};
use crate::scene::{covered_cells, geometry_cues, Instance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AhrMode {
    AsWritten,
    StandardFocal,
}

/// Which score decides whether a negative is "hard".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HardNegativeGate {
    /// The highest class probability at the cell.
    CellMax,
    /// The pair's own probability.
    PerPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AhrConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub thr: f64,
    pub w: f64,
    pub mode: AhrMode,
    pub gate: HardNegativeGate,
}

impl Default for AhrConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            thr: 0.9,
            w: 0.15,
            mode: AhrMode::AsWritten,
            gate: HardNegativeGate::CellMax,
        }
    }
}

impl AhrConfig {
    pub fn standard_focal() -> Self {
        Self {
            mode: AhrMode::StandardFocal,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma {} must be >= 0", self.gamma)));
        }
        if !(self.thr > 0.0 && self.thr <= 1.0) {
            return Err(Error::invalid(format!("thr {} outside (0, 1]", self.thr)));
        }
        if !(self.w > 0.0 && self.w <= 1.0) {
            return Err(Error::invalid(format!("w {} outside (0, 1]", self.w)));
        }
        Ok(())
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Loss and logit-gradient for one score, given `p`, `ln p` and `ln(1−p)`.
#[inline]
fn ahr_terms(p: f64, ln_p: f64, ln_q: f64, is_positive: bool, gate: f64, cfg: &AhrConfig) -> (f64, f64) {
    let q = 1.0 - p;
    let (a, g) = (cfg.alpha, cfg.gamma);
    match (cfg.mode, is_positive) {
        (AhrMode::AsWritten, true) => {
            let m = p.powf(g);
            (-ln_p * a * m, -a * m * q * (g * ln_p + 1.0))
        }
        (AhrMode::StandardFocal, true) => {
            let m = q.powf(g);
            (-ln_p * a * m, a * m * (g * p * ln_p - q))
        }
        (mode, false) => {
            let (loss, grad) = match mode {
                AhrMode::AsWritten => {
                    let m = q.powf(g);
                    (-ln_q * (1.0 - a) * m, (1.0 - a) * m * p * (g * ln_q + 1.0))
                }
                AhrMode::StandardFocal => {
                    let m = p.powf(g);
                    (-ln_q * (1.0 - a) * m, (1.0 - a) * m * (p - g * q * ln_q))
                }
            };
            if gate > cfg.thr {
                (loss * cfg.w, grad * cfg.w)
            } else {
                (loss, grad)
            }
        }
    }
}

/// Hard-negative reweighted loss of one probability `p_t`, gated by `p_t`
/// itself. Returns `(loss, dloss/dlogit)`.
pub fn ahr_loss(p_t: f64, is_positive: bool, cfg: &AhrConfig) -> Result<(f64, f64)> {
    if !(p_t > 0.0 && p_t < 1.0) {
        return Err(Error::invalid(format!("p_t {p_t} outside (0, 1)")));
    }
    Ok(ahr_terms(p_t, p_t.ln(), (-p_t).ln_1p(), is_positive, p_t, cfg))
}

/// Same loss evaluated from a logit, with an explicit hard-negative gate
/// score. Numerically stable for large `|z|`.
#[inline]
pub fn ahr_from_logit(z: f64, is_positive: bool, gate: f64, cfg: &AhrConfig) -> (f64, f64) {
    let p = sigmoid(z);
    ahr_terms(p, -softplus(-z), -softplus(z), is_positive, gate, cfg)
}

/// Binary cross-entropy against a soft target, from a logit.
#[inline]
pub fn bce_from_logit(z: f64, target: f64) -> (f64, f64) {
    (softplus(z) - target * z, sigmoid(z) - target)
}

pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

#[inline]
pub fn smooth_l1(d: f64) -> (f64, f64) {
    let a = d.abs();
    if a < SMOOTH_L1_BETA {
        (0.5 * d * d / SMOOTH_L1_BETA, d / SMOOTH_L1_BETA)
    } else {
        (a - 0.5 * SMOOTH_L1_BETA, d.signum())
    }
}

fn gate_scores(out: &DenseOutput, cfg: &AhrConfig) -> Option<Raster> {
    match cfg.gate {
        HardNegativeGate::PerPair => None,
        HardNegativeGate::CellMax => {
            let (h, w, c) = out.class_logits.shape();
            let mut g = Raster::filled(h, w, 1, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let m = out
                        .class_logits
                        .cell(y, x)
                        .iter()
                        .fold(f64::NEG_INFINITY, |m, &z| m.max(z));
                    debug_assert!(c > 0);
                    *g.get_mut(y, x, 0) = sigmoid(m);
                }
            }
            Some(g)
        }
    }
}

/// Per-cell supervision derived from a scene's kept annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedTargets {
    pub mask: Mask,
    /// Regression target of each positive cell (smallest covering box).
    pub regression: Vec<Option<[f64; REG_DIMS]>>,
}

impl SupervisedTargets {
    pub fn new(kept: &[Instance], height: usize, width: usize, classes: usize) -> Result<Self> {
        let mask = crate::scene::gt_pixel_mask(kept, height, width, classes)?;
        let mut owner_area = vec![f64::INFINITY; height * width];
        let mut regression = vec![None; height * width];
        for inst in kept {
            let area = inst.bbox.area();
            for (y, x) in covered_cells(&inst.bbox, height, width) {
                let i = y * width + x;
                if area < owner_area[i] {
                    owner_area[i] = area;
                    regression[i] = Some(geometry_cues(&inst.bbox, y, x));
                }
            }
        }
        Ok(Self { mask, regression })
    }

    pub fn from_mask(mask: Mask) -> Self {
        let n = mask.cells();
        Self {
            mask,
            regression: vec![None; n],
        }
    }

    pub fn num_positive_cells(&self) -> usize {
        let (h, w, _) = self.mask.shape();
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| self.mask.any_at(y, x))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub classification: f64,
    pub quality: f64,
    pub regression: f64,
    pub num_positive: usize,
    pub grads: OutputGrads,
}

/// Supervised loss on annotated cells. Classification runs over every
/// `(cell, class)` pair and is normalized by the number of positive cells
/// (at least 1); quality BCE (target 1) and smooth-L1 regression are averaged
/// over positive cells. Terms are summed with unit weights.
pub fn supervised_loss(out: &DenseOutput, targets: &SupervisedTargets, cfg: &AhrConfig) -> Result<LossBreakdown> {
    let (h, w, c) = out.class_logits.shape();
    if targets.mask.shape() != (h, w, c) || targets.regression.len() != h * w {
        return Err(Error::invalid(format!(
            "target mask {:?} does not match output {:?}",
            targets.mask.shape(),
            (h, w, c)
        )));
    }
    let gates = gate_scores(out, cfg);
    let num_pos = targets.num_positive_cells();
    let norm = 1.0 / num_pos.max(1) as f64;
    let mut grads = OutputGrads::zeros(h, w, c);
    let (mut cls, mut qual, mut reg) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let gate = gates.as_ref().map(|g| *g.get(y, x, 0));
            for k in 0..c {
                let z = *out.class_logits.get(y, x, k);
                let pos = *targets.mask.get(y, x, k);
                let gate = gate.unwrap_or_else(|| sigmoid(z));
                let (l, d) = ahr_from_logit(z, pos, gate, cfg);
                cls += l;
                *grads.class_logits.get_mut(y, x, k) = d * norm;
            }
            if targets.mask.any_at(y, x) {
                let zq = *out.quality_logits.get(y, x, 0);
                let (l, d) = bce_from_logit(zq, 1.0);
                qual += l;
                *grads.quality_logits.get_mut(y, x, 0) = d * norm;
                if let Some(t) = targets.regression[y * w + x] {
                    let pred = out.regression.cell(y, x);
                    let g = grads.regression.cell_mut(y, x);
                    for j in 0..REG_DIMS {
                        let (l, d) = smooth_l1(pred[j] - t[j]);
                        reg += l;
                        g[j] = d * norm;
                    }
                }
            }
        }
    }
    let (cls, qual, reg) = (cls * norm, qual * norm, reg * norm);
    Ok(LossBreakdown {
        total: cls + qual + reg,
        classification: cls,
        quality: qual,
        regression: reg,
        num_positive: num_pos,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillBreakdown {
    pub total: f64,
    /// Soft-target BCE over selected pairs (normalized).
    pub positive: f64,
    /// Negative-branch loss over the remaining pairs (normalized).
    pub negative: f64,
    pub num_selected: usize,
    pub grads: OutputGrads,
}

/// Dense distillation. Selected pairs are pulled toward the teacher's joint
/// confidence by soft-target BCE (annotated pairs toward 1); every other pair
/// gets the negative branch of `cfg`. Normalized by the selection size; an
/// empty selection yields zero loss.
pub fn distill_loss(
    student: &DenseOutput,
    teacher_scores: &Raster,
    selected: &SelectionSet,
    cfg: &AhrConfig,
) -> Result<DistillBreakdown> {
    let (h, w, c) = student.class_logits.shape();
    if teacher_scores.shape() != (h, w, c) {
        return Err(Error::invalid("teacher scores do not match student output"));
    }
    if let Some(((y, x, k), _)) = selected.iter().find(|((y, x, k), _)| *y >= h || *x >= w || *k >= c) {
        return Err(Error::invalid(format!("selected pixel ({y}, {x}, {k}) out of bounds")));
    }
    let mut grads = OutputGrads::zeros(h, w, c);
    if selected.is_empty() {
        log::debug!("distill: empty selection, unsupervised loss is zero");
        return Ok(DistillBreakdown {
            total: 0.0,
            positive: 0.0,
            negative: 0.0,
            num_selected: 0,
            grads,
        });
    }
    let norm = 1.0 / selected.len() as f64;
    let gates = gate_scores(student, cfg);
    let (mut pos, mut neg) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let gate = gates.as_ref().map(|g| *g.get(y, x, 0));
            for k in 0..c {
                let z = *student.class_logits.get(y, x, k);
                let d = match selected.get(&(y, x, k)) {
                    Some(s) => {
                        let target = if s.has(Provenance::Gt) {
                            1.0
                        } else {
                            *teacher_scores.get(y, x, k)
                        };
                        let (l, d) = bce_from_logit(z, target);
                        pos += l;
                        d
                    }
                    None => {
                        let gate = gate.unwrap_or_else(|| sigmoid(z));
                        let (l, d) = ahr_from_logit(z, false, gate, cfg);
                        neg += l;
                        d
                    }
                };
                *grads.class_logits.get_mut(y, x, k) = d * norm;
            }
        }
    }
    Ok(DistillBreakdown {
        total: (pos + neg) * norm,
        positive: pos * norm,
        negative: neg * norm,
        num_selected: selected.len(),
        grads,
    })
}
