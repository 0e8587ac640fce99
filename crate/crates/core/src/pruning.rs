//! Importance-based unstructured pruning of the fully-connected segment.
//!
//! The flat weight vector splits into a protected front segment (the
//! frozen projection, standing in for convolutional layers) and a
//! prunable fully-connected segment. A weight's importance is how far it
//! moved during its owner's last local update; pruning at ratio `rho`
//! zeroes the `floor(rho * fc_count)` least-moved fully-connected
//! weights. Ties break toward the lower index, so a mask is a pure
//! function of its inputs.

use std::cmp::Ordering;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruningError {
    #[error("weight vectors differ in length: {before} before vs {after} after")]
    LengthMismatch { before: usize, after: usize },
    #[error("pruning ratio {0} outside [0, 1]")]
    BadRatio(f64),
    #[error("scores length {scores} does not match layout total {total}")]
    LayoutMismatch { scores: usize, total: usize },
}

/// Split of the flat weight vector into the protected and prunable
/// segments. The protected segment occupies indices
/// `0..conv_weight_count`, the fully-connected segment the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub conv_weight_count: usize,
    pub fc_weight_count: usize,
}

impl LayerLayout {
    pub fn total(&self) -> usize {
        self.conv_weight_count + self.fc_weight_count
    }

    /// First index of the prunable segment.
    pub fn fc_offset(&self) -> usize {
        self.conv_weight_count
    }
}

/// Keep/prune decision per weight, over the full flat vector. Protected
/// positions are always kept.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningMask {
    keep: Vec<bool>,
    ratio: f64,
}

impl PruningMask {
    /// The all-keep mask, used when a round prunes nothing.
    pub fn all_ones(total: usize) -> Self {
        PruningMask {
            keep: vec![true; total],
            ratio: 0.0,
        }
    }

    /// Rebuilds a mask from raw parts, e.g. when loading a snapshot.
    pub fn from_parts(keep: Vec<bool>, ratio: f64) -> Self {
        PruningMask { keep, ratio }
    }

    /// The ratio this mask was built at.
    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    /// Number of pruned (zeroed) positions.
    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    /// Number of surviving positions.
    pub fn kept_count(&self) -> usize {
        self.keep.len() - self.pruned_count()
    }
}

/// Per-weight importance: how far each weight moved during the last
/// local update, elementwise `|after - before|`.
///
/// # Errors
///
/// The two vectors must have the same length.
pub fn importance_scores(before: &[f64], after: &[f64]) -> Result<Vec<f64>, PruningError> {
    if before.len() != after.len() {
        return Err(PruningError::LengthMismatch {
            before: before.len(),
            after: after.len(),
        });
    }
    Ok(before
        .iter()
        .zip(after)
        .map(|(b, a)| (a - b).abs())
        .collect())
}

/// How many fully-connected weights a ratio removes:
/// `floor(ratio * fc_weight_count)`.
fn fc_pruned_count(layout: &LayerLayout, ratio: f64) -> usize {
    let n = layout.fc_weight_count;
    ((ratio * n as f64).floor() as usize).min(n)
}

/// Surviving weights at ratio `ratio`: the whole protected segment plus
/// the fully-connected weights the floor rule leaves alone.
///
/// # Panics
///
/// `ratio` must lie in `[0, 1]`.
pub fn pruned_weight_count(layout: &LayerLayout, ratio: f64) -> usize {
    assert!(
        (0.0..=1.0).contains(&ratio),
        "pruning ratio {ratio} outside [0, 1]"
    );
    layout.conv_weight_count + layout.fc_weight_count - fc_pruned_count(layout, ratio)
}

/// Builds the keep/prune mask for one participation round: the
/// `floor(ratio * fc_count)` lowest-importance fully-connected weights
/// are pruned, ties resolving toward the lower index. The protected
/// segment is never touched.
///
/// # Errors
///
/// `scores` must cover the full layout and `ratio` must lie in `[0, 1]`.
pub fn build_mask(
    scores: &[f64],
    layout: &LayerLayout,
    ratio: f64,
) -> Result<PruningMask, PruningError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(PruningError::BadRatio(ratio));
    }
    if scores.len() != layout.total() {
        return Err(PruningError::LayoutMismatch {
            scores: scores.len(),
            total: layout.total(),
        });
    }
    let count = fc_pruned_count(layout, ratio);
    let mut keep = vec![true; layout.total()];
    if count > 0 {
        let mut order: Vec<usize> = (layout.fc_offset()..layout.total()).collect();
        // Total order even in the face of NaN scores; index breaks ties.
        order.sort_unstable_by(|&a, &b| match scores[a].total_cmp(&scores[b]) {
            Ordering::Equal => a.cmp(&b),
            other => other,
        });
        for &idx in &order[..count] {
            keep[idx] = false;
        }
    }
    Ok(PruningMask { keep, ratio })
}

/// Applies a mask: pruned positions become exactly `0.0`, kept positions
/// are returned bit-identical.
///
/// # Panics
///
/// The mask must cover the weight vector exactly.
pub fn apply_mask(weights: &[f64], mask: &PruningMask) -> Vec<f64> {
    assert_eq!(
        weights.len(),
        mask.len(),
        "mask length {} does not match weight count {}",
        mask.len(),
        weights.len()
    );
    weights
        .iter()
        .zip(mask.keep())
        .map(|(&w, &k)| if k { w } else { 0.0 })
        .collect()
}
