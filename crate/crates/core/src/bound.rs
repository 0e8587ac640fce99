//! Convergence-bound diagnostics.
//!
//! The training loop can report a closed-form upper bound on the mean
//! squared gradient norm after `K` rounds. The bound decomposes into an
//! initial-gap term, a pruning-noise term that grows with every pruning
//! ratio applied along the way, a local-drift term, and a mixed term
//! built from the tier statistics. None of its constants are observable
//! in practice, so the bound is a *relative* diagnostic — useful for
//! comparing schemes under identical constants, meaningless as an
//! absolute guarantee.
//!
//! The pruning term is, up to the mean-value factor, the same quantity
//! the per-round allocator minimizes; `tests` pin that identity so the
//! optimizer and the diagnostic cannot drift apart.

use thiserror::Error;

use crate::data::LabeledDataset;
use crate::nn::{self, ModelSpec, NnError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("bad constant: {0}")]
    BadConstant(String),
    #[error("contraction margin 1 - 4*L*delta = {margin} is not positive (L = {lipschitz}, delta = {delta})")]
    ContractionViolated {
        lipschitz: f64,
        delta: f64,
        margin: f64,
    },
    #[error("round {round} carries {got} pruning ratios for {expected} tiers")]
    HistoryShape {
        round: usize,
        expected: usize,
        got: usize,
    },
    #[error("pruning ratio {0} outside [0, 1] in the history")]
    BadRatio(f64),
    #[error("tier with {users} users has no data")]
    EmptyTier { users: usize },
}

/// The constants of the convergence analysis. All are model- and
/// data-dependent quantities nobody can measure, supplied as config with
/// documented defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundConstants {
    /// Smoothness constant `L` of the loss.
    pub lipschitz: f64,
    /// Aggregation-error contraction parameter `delta`; must stay below
    /// `1/(4L)`.
    pub delta: f64,
    /// Local dissimilarity radius `epsilon`.
    pub epsilon: f64,
    /// Bounded-gradient-change constant `beta`. Part of the assumption
    /// set, absent from the evaluated bound; carried for completeness.
    pub beta: f64,
    /// Cross-tier gradient dispersion `phi`.
    pub phi: f64,
    /// Pruning-noise scale `D`: pruning at ratio `rho` injects at most
    /// `rho * D^2` of squared weight perturbation.
    pub noise_scale: f64,
    /// Local SGD step size. Distinct from the allocator's Lagrange
    /// multiplier, which shares the same Greek letter in the analysis.
    pub learning_rate: f64,
    /// Mean-value factor `xi` relating gradient norms across rounds.
    pub xi: f64,
}

impl Default for BoundConstants {
    fn default() -> Self {
        BoundConstants {
            lipschitz: 1.0,
            delta: 0.1,
            epsilon: 0.1,
            beta: 1.0,
            phi: 0.1,
            noise_scale: 1.0,
            learning_rate: 0.05,
            xi: 1.0,
        }
    }
}

impl BoundConstants {
    /// `1 - 4*L*delta`, the denominator every term shares. The analysis
    /// only holds while this is positive.
    pub fn contraction_margin(&self) -> f64 {
        1.0 - 4.0 * self.lipschitz * self.delta
    }

    /// # Errors
    ///
    /// Scale-like constants must be strictly positive; the dispersion
    /// radii `epsilon` and `phi` and the contraction parameter `delta`
    /// may be zero (switching their noise source off), and `delta` must
    /// stay below `1/(4L)`.
    pub fn validate(&self) -> Result<(), BoundError> {
        let positive = [
            ("lipschitz", self.lipschitz),
            ("beta", self.beta),
            ("noise_scale", self.noise_scale),
            ("learning_rate", self.learning_rate),
            ("xi", self.xi),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(BoundError::BadConstant(format!(
                    "{name} must be a positive finite number, got {value}"
                )));
            }
        }
        let nonnegative = [
            ("delta", self.delta),
            ("epsilon", self.epsilon),
            ("phi", self.phi),
        ];
        for (name, value) in nonnegative {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(BoundError::BadConstant(format!(
                    "{name} must be a non-negative finite number, got {value}"
                )));
            }
        }
        let margin = self.contraction_margin();
        if !(margin > 0.0) {
            return Err(BoundError::ContractionViolated {
                lipschitz: self.lipschitz,
                delta: self.delta,
                margin,
            });
        }
        Ok(())
    }

    /// Per-round weight of the pruning objective,
    /// `3*L*D^2 / ((1 - 4*L*delta) * M)`, for `tier_count` = `M` tiers.
    /// The allocator scales its per-round sums by this.
    pub fn objective_prefactor(&self, tier_count: usize) -> f64 {
        3.0 * self.lipschitz * self.noise_scale * self.noise_scale
            / (self.contraction_margin() * tier_count as f64)
    }
}

/// Population of one tier: user count `S_m` and sample count `D_m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TierSizes {
    pub users: usize,
    pub data: usize,
}

/// The evaluated bound, broken into its summands.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub rhs_total: f64,
    pub term_init: f64,
    pub term_pruning: f64,
    pub term_drift: f64,
    pub term_mixed: f64,
    pub omega1: f64,
    pub omega2: f64,
}

/// Squared user-to-data ratio `S_m^2 / D_m^2` of one tier; empty tiers
/// contribute nothing.
fn tier_ratio_sq(tier: &TierSizes) -> Result<f64, BoundError> {
    if tier.users == 0 {
        return Ok(0.0);
    }
    if tier.data == 0 {
        return Err(BoundError::EmptyTier { users: tier.users });
    }
    let ratio = tier.users as f64 / tier.data as f64;
    Ok(ratio * ratio)
}

/// Evaluates the bound for a finished run.
///
/// `rho_history` holds one row per global round, one ratio per tier
/// (non-uploading tiers carry whatever ratio their stale model was
/// pruned at; untouched tiers carry 0). `f_init_gap` is the initial
/// suboptimality `F(w^0) - F(w^*)`, in practice approximated by the
/// best loss seen during the run.
///
/// # Errors
///
/// Rejects invalid constants, a ragged or out-of-range history, and
/// populated tiers without data.
pub fn evaluate_bound(
    consts: &BoundConstants,
    tiers: &[TierSizes],
    rho_history: &[Vec<f64>],
    f_init_gap: f64,
) -> Result<BoundReport, BoundError> {
    consts.validate()?;
    let tier_count = tiers.len();
    let rounds = rho_history.len();
    for (round, row) in rho_history.iter().enumerate() {
        if row.len() != tier_count {
            return Err(BoundError::HistoryShape {
                round: round + 1,
                expected: tier_count,
                got: row.len(),
            });
        }
        if let Some(&bad) = row.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(BoundError::BadRatio(bad));
        }
    }

    let margin = consts.contraction_margin();
    let xi = consts.xi;
    let lipschitz = consts.lipschitz;
    let d_sq = consts.noise_scale * consts.noise_scale;
    let m = tier_count as f64;
    let k = rounds as f64;

    let ratios_sq: Vec<f64> = tiers.iter().map(tier_ratio_sq).collect::<Result<_, _>>()?;

    let term_init = f_init_gap / margin;

    let weighted_rho: f64 = rho_history
        .iter()
        .map(|row| {
            row.iter()
                .zip(&ratios_sq)
                .map(|(rho, rsq)| rsq * rho)
                .sum::<f64>()
        })
        .sum();
    let term_pruning = if tier_count == 0 {
        0.0
    } else {
        xi * consts.objective_prefactor(tier_count) * weighted_rho
    };

    let term_drift = k * xi * lipschitz * consts.epsilon * consts.epsilon / margin;

    let omega1: f64 = ratios_sq.iter().sum::<f64>() * consts.epsilon * consts.epsilon;
    // Every tier sums the *other* tiers' squared user counts, so each
    // tier's S_j^2 appears M-1 times.
    let users_sq_total: f64 = tiers
        .iter()
        .map(|t| (t.users as f64) * (t.users as f64))
        .sum();
    let omega2 = (m - 1.0).max(0.0) * users_sq_total * consts.phi * consts.phi;

    let term_mixed = if tier_count == 0 {
        0.0
    } else {
        xi * k / (margin * 2.0 * m)
            * (3.0 * lipschitz * omega1 + (m - 1.0) / (lipschitz * d_sq) * omega2)
    };

    Ok(BoundReport {
        rhs_total: term_init + term_pruning + term_drift + term_mixed,
        term_init,
        term_pruning,
        term_drift,
        term_mixed,
        omega1,
        omega2,
    })
}

/// Squared l2-norm of the loss gradient over the pooled dataset — the
/// quantity the bound caps. The simulator has global visibility, so this
/// is computable here even though no real deployment could.
///
/// # Errors
///
/// Propagates model/data shape mismatches.
pub fn empirical_grad_norm(
    spec: &ModelSpec,
    weights: &[f64],
    data: &LabeledDataset,
) -> Result<f64, NnError> {
    let rows: Vec<usize> = (0..data.len()).collect();
    let (_, grad) = nn::batch_gradient(spec, weights, data, &rows)?;
    Ok(grad.iter().map(|g| g * g).sum())
}
