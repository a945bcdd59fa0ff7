//! Dual decoding heads: turn refined queries and the finest feature map
//! into per-voxel class distributions at detection and diagnosis
//! granularity, and compute the combined segmentation loss.
//!
//! Both heads share the same recipe: stack [background; shared; task]
//! queries, take inner products with L2-normalized per-voxel features, and
//! apply a per-voxel softmax over classes. Rows are ordered so that row `c`
//! of the output is exactly class id `c` of the corresponding label space.
//!
//! In plain mode there is no detection head; detection probabilities are
//! obtained by summing diagnosis probabilities over each detection class's
//! subtypes (a fixed, non-learned merge).

use ndarray::IxDyn;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RepresentationMode};
use crate::queries::RefinedQueries;
use crate::taxonomy::{LabelSpace, Taxonomy};

/// Per-voxel class probabilities (`(classes, N)` with `N` raster voxels)
/// and the log-probabilities they were derived from.
pub struct DualMasks {
    pub detection_probs: Var,
    pub diagnosis_probs: Var,
    pub detection_logp: Var,
    pub diagnosis_logp: Var,
}

/// Scalar loss terms alongside the differentiable total.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total_var: Var,
    pub total: f64,
    pub ce_detection: f64,
    pub dice_detection: f64,
    pub ce_diagnosis: f64,
    pub dice_diagnosis: f64,
}

/// Fixed `(det_classes, diag_classes)` merge matrix: entry `(r, c)` is 1
/// when diagnosis class `c` maps to detection class `r`.
pub fn merge_matrix(taxonomy: &Taxonomy) -> Tensor {
    let table = taxonomy.merge_table();
    let det = taxonomy.class_count(LabelSpace::Detection);
    let diag = taxonomy.class_count(LabelSpace::Diagnosis);
    let mut m = Tensor::zeros(IxDyn(&[det, diag]));
    for (c, &r) in table.iter().enumerate() {
        m[[r as usize, c]] = 1.0;
    }
    m
}

/// Decode both heads from refined queries and the finest feature map
/// `f1` of shape `(d, N)`.
pub fn decode_masks(
    g: &mut Graph,
    cfg: &ModelConfig,
    taxonomy: &Taxonomy,
    queries: &RefinedQueries,
    f1: Var,
) -> Result<DualMasks> {
    let s = taxonomy.shared_count();
    let shared = g.slice_axis0(queries.shared, 0, s);
    let background = g.slice_axis0(queries.shared, s, 1);
    let feat = g.l2_normalize_cols(f1, cfg.feature_norm_eps);

    let diag_stack = g.concat_axis0(&[background, shared, queries.diagnosis]);
    let diag_logits = g.matmul(diag_stack, feat, false, false);
    let diagnosis_logp = g.log_softmax(diag_logits, 0);
    let diagnosis_probs = g.exp(diagnosis_logp);

    let (detection_probs, detection_logp) = match cfg.mode {
        RepresentationMode::Plain => {
            let merge = g.constant(merge_matrix(taxonomy));
            let probs = g.matmul(merge, diagnosis_probs, false, false);
            // Log of merged probabilities, for reporting only: plain mode
            // trains exclusively through the diagnosis head.
            let logp = g.ln(probs);
            (probs, logp)
        }
        _ => {
            let det = queries
                .detection
                .ok_or_else(|| Error::Config("detection queries missing outside plain mode".into()))?;
            let det_stack = g.concat_axis0(&[background, shared, det]);
            let det_logits = g.matmul(det_stack, feat, false, false);
            let logp = g.log_softmax(det_logits, 0);
            (g.exp(logp), logp)
        }
    };

    let det_rows = g.value(detection_probs).shape()[0];
    let diag_rows = g.value(diagnosis_probs).shape()[0];
    debug_assert_eq!(det_rows, taxonomy.class_count(LabelSpace::Detection));
    debug_assert_eq!(diag_rows, taxonomy.class_count(LabelSpace::Diagnosis));

    Ok(DualMasks {
        detection_probs,
        diagnosis_probs,
        detection_logp,
        diagnosis_logp,
    })
}

/// Raster-flatten a label block in the same order as feature columns.
fn flatten_labels(labels: &ndarray::ArrayView3<'_, u8>) -> Vec<u8> {
    labels.iter().copied().collect()
}

/// Distinct non-background classes present in a flat target list, ascending.
fn present_classes(targets: &[u8]) -> Vec<u8> {
    let mut seen = [false; 256];
    for &t in targets {
        seen[t as usize] = true;
    }
    (1..256).filter(|&c| seen[c]).map(|c| c as u8).collect()
}

/// Cross-entropy + soft-Dice on both heads. Targets are diagnosis-space
/// labels for the patch; detection targets are derived via the class merge
/// table. Dice averages over foreground classes present in the patch; if
/// the patch is all background the Dice terms are zero. In plain mode the
/// detection head has no parameters of its own, so only the diagnosis terms
/// carry gradient (detection terms are reported as zero).
pub fn dual_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    taxonomy: &Taxonomy,
    masks: &DualMasks,
    labels: &ndarray::ArrayView3<'_, u8>,
) -> Result<LossBreakdown> {
    let diag_targets = flatten_labels(labels);
    let n = diag_targets.len();
    if g.value(masks.diagnosis_probs).shape()[1] != n {
        return Err(Error::Data(format!(
            "{} mask columns for {n} voxels",
            g.value(masks.diagnosis_probs).shape()[1]
        )));
    }
    let table = taxonomy.merge_table();
    let det_targets: Vec<u8> = diag_targets.iter().map(|&c| table[c as usize]).collect();

    let diag_present = present_classes(&diag_targets);
    let det_present = present_classes(&det_targets);
    let eps = cfg.dice_smooth;

    let zero = g.constant(Tensor::zeros(IxDyn(&[])));
    let (ce_det, dice_det) = match cfg.mode {
        RepresentationMode::Plain => (zero, zero),
        _ => {
            let ce = g.nll_mean(masks.detection_logp, &det_targets);
            let dice = if det_present.is_empty() {
                zero
            } else {
                g.soft_dice(masks.detection_probs, &det_targets, &det_present, eps)
            };
            (ce, dice)
        }
    };
    let ce_diag = g.nll_mean(masks.diagnosis_logp, &diag_targets);
    let dice_diag = if diag_present.is_empty() {
        zero
    } else {
        g.soft_dice(masks.diagnosis_probs, &diag_targets, &diag_present, eps)
    };

    let det_sum = g.add(ce_det, dice_det);
    let diag_sum = g.add(ce_diag, dice_diag);
    let total_var = g.add(det_sum, diag_sum);
    let total = g.scalar(total_var);
    if !total.is_finite() {
        return Err(Error::Divergence(format!("loss is {total}")));
    }
    Ok(LossBreakdown {
        total_var,
        total,
        ce_detection: g.scalar(ce_det),
        dice_detection: g.scalar(dice_det),
        ce_diagnosis: g.scalar(ce_diag),
        dice_diagnosis: g.scalar(dice_diag),
    })
}
