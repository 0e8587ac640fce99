//! Per-round resource optimizer.
//!
//! Each global round, every participating tier needs a slice of the
//! shared uplink band and a pruning ratio that together fit the tier's
//! deadline. Pruning hurts convergence, so the optimizer minimizes a
//! pruning penalty — each tier's ratio weighted by its squared
//! user-to-data ratio — subject to the band budget.
//!
//! The solution is projected water-filling. For a fixed share `b`, the
//! smallest workable ratio [`min_pruning_ratio`] follows from inverting
//! the latency model against the deadline. The penalty is convex in the
//! share ([`verify_convexity`] checks this numerically), so the
//! constrained optimum comes from a closed form per tier
//! ([`bandwidth_closed_form`]) driven by one multiplier on the budget,
//! located by bisection in [`solve_lambda`]. Every tier's demand is
//! clamped to the interval where its ratio is meaningful: below the
//! share that fits a fully pruned model the tier cannot make its
//! deadline at all, and above the share that fits the unpruned model
//! extra bandwidth buys nothing.
//!
//! All latency math here treats the surviving-weight count as a
//! continuum; the simulator owns the rounding to whole weights.

use thiserror::Error;

use crate::bound::BoundConstants;
use crate::netmodel::{NetModelError, NetworkConfig, DEADLINE_REL_TOL};
use crate::pruning::LayerLayout;

/// Tolerance on the closed-form vs. deadline-inversion identity checked
/// in debug builds.
#[cfg(debug_assertions)]
const IDENTITY_ABS_TOL: f64 = 1e-9;

/// Smallest share the solver will hand a tier whose pruned payload is
/// empty (no protected weights): any positive sliver keeps the rate
/// defined.
const MIN_SHARE: f64 = 1e-12;

/// Budget residual below which the multiplier bisection stops early.
const BUDGET_RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocError {
    #[error(transparent)]
    Network(#[from] NetModelError),
    #[error("noise power tied to the allocated share breaks the rate's linearity in the share, which the closed forms rely on")]
    UnsupportedNoiseModel,
    #[error("bandwidth share must lie in (0, 1], got {0}")]
    BadShare(f64),
    #[error("multiplier must be positive, got {0}")]
    BadMultiplier(f64),
    #[error("no participating tier to allocate for")]
    EmptyTierSet,
    #[error("tier {tier} misses its {deadline_s} s deadline even fully pruned on the whole band (latency {latency_s} s)")]
    TierInfeasible {
        tier: usize,
        latency_s: f64,
        deadline_s: f64,
    },
    #[error("deadlines are jointly unsatisfiable: fully pruned tiers already demand {required} of the band")]
    BudgetInfeasible { required: f64 },
    #[error("bad solver input: {0}")]
    BadContext(String),
}

/// One participating tier, collapsed to its average member. The
/// optimizer treats the tier as a single representative user whose
/// compute speed and channel gain are the members' means and whose
/// share of the band is the decision variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TierProfile {
    /// Tier index `m >= 1`; the deadline is `m` aggregation periods.
    pub tier: usize,
    /// Member count `S_m`.
    pub users: usize,
    /// Total training samples `D_m` across the members.
    pub data_count: usize,
    /// Mean CPU cycles per weight per local epoch.
    pub cycles_per_weight: f64,
    /// Mean CPU frequency in Hz.
    pub cpu_hz: f64,
    /// Mean linear channel power gain for the current round.
    pub channel_gain: f64,
    /// Shared model architecture.
    pub layout: LayerLayout,
}

impl TierProfile {
    fn validate(&self) -> Result<(), AllocError> {
        let complain = |msg: String| Err(AllocError::BadContext(msg));
        if self.tier == 0 {
            return complain("tier indices start at 1".into());
        }
        if self.users == 0 {
            return complain(format!("tier {} has no members", self.tier));
        }
        if self.data_count == 0 {
            return complain(format!("tier {} has members but no data", self.tier));
        }
        for (name, value) in [
            ("cycles_per_weight", self.cycles_per_weight),
            ("cpu_hz", self.cpu_hz),
            ("channel_gain", self.channel_gain),
        ] {
            if !(value > 0.0) || !value.is_finite() {
                return complain(format!(
                    "tier {}: {name} must be positive and finite, got {value}",
                    self.tier
                ));
            }
        }
        if self.layout.total() == 0 {
            return complain(format!("tier {}: model has no weights", self.tier));
        }
        Ok(())
    }
}

/// Everything the solver needs besides the tiers themselves.
#[derive(Debug, Clone, Copy)]
pub struct SolveContext<'a> {
    pub net: &'a NetworkConfig,
    pub consts: &'a BoundConstants,
    /// Aggregation period in seconds; tier `m`'s deadline is `m` times
    /// this.
    pub delta_t: f64,
    /// Local epochs per round (scales compute time).
    pub local_epochs: f64,
    /// Total tier count `M` of the deployment, which sets the penalty
    /// prefactor. Distinct from the number of tiers participating in
    /// the round being solved.
    pub total_tiers: usize,
}

impl SolveContext<'_> {
    fn validate(&self) -> Result<(), AllocError> {
        if !(self.delta_t > 0.0) || !self.delta_t.is_finite() {
            return Err(AllocError::BadContext(format!(
                "aggregation period must be positive and finite, got {}",
                self.delta_t
            )));
        }
        if !(self.local_epochs > 0.0) || !self.local_epochs.is_finite() {
            return Err(AllocError::BadContext(format!(
                "local epoch count must be positive and finite, got {}",
                self.local_epochs
            )));
        }
        if self.total_tiers == 0 {
            return Err(AllocError::BadContext(
                "total tier count must be >= 1".into(),
            ));
        }
        if self.net.quant_bits == 0 {
            return Err(AllocError::BadContext(
                "quantization must spend at least one bit per weight".into(),
            ));
        }
        self.consts
            .validate()
            .map_err(|e| AllocError::BadContext(e.to_string()))?;
        if self
            .net
            .noise
            .share_independent_power(self.net.bandwidth_hz)
            .is_none()
        {
            return Err(AllocError::UnsupportedNoiseModel);
        }
        Ok(())
    }
}

/// Per-tier share and ratio of one solved round.
#[derive(Debug, Clone, PartialEq)]
pub struct TierAllocation {
    pub tier: usize,
    pub users: usize,
    pub bandwidth_fraction: f64,
    pub pruning_ratio: f64,
}

/// A solved round: shares summing to at most 1, ratios in `[0, 1]`,
/// the multiplier that produced them, and the penalty value attained.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationDecision {
    pub per_tier: Vec<TierAllocation>,
    /// Budget multiplier; 0 when the budget did not bind.
    pub lambda_star: f64,
    pub objective_value: f64,
}

/// Precomputed per-tier quantities every formula shares.
struct TierTerms {
    deadline_s: f64,
    /// Compute seconds per surviving weight: `epochs * cycles / f`.
    compute_per_weight_s: f64,
    /// Rate on the whole band, bits/s. The supported noise models make
    /// the rate on a share `b` exactly `b` times this.
    full_band_rate: f64,
    bits_per_weight: f64,
    conv: f64,
    fc: f64,
}

impl TierTerms {
    fn new(tier: &TierProfile, ctx: &SolveContext) -> Result<TierTerms, AllocError> {
        let full_band_rate = ctx.net.uplink_rate(tier.channel_gain, 1.0)?;
        if !(full_band_rate > 0.0) {
            return Err(NetModelError::ZeroBandwidth.into());
        }
        Ok(TierTerms {
            deadline_s: tier.tier as f64 * ctx.delta_t,
            compute_per_weight_s: ctx.local_epochs * tier.cycles_per_weight / tier.cpu_hz,
            full_band_rate,
            bits_per_weight: f64::from(ctx.net.quant_bits),
            conv: tier.layout.conv_weight_count as f64,
            fc: tier.layout.fc_weight_count as f64,
        })
    }

    fn total_weights(&self) -> f64 {
        self.conv + self.fc
    }
}

/// Smallest ratio that fits the deadline, given total per-weight time
/// `unit_time` (compute plus upload at the already-fixed rate).
fn ratio_from_unit_time(
    tier_index: usize,
    terms: &TierTerms,
    unit_time: f64,
) -> Result<f64, AllocError> {
    // Even with everything prunable gone, the protected weights still
    // have to compute and upload.
    let floor_latency = terms.conv * unit_time;
    if floor_latency > terms.deadline_s * (1.0 + DEADLINE_REL_TOL) {
        return Err(AllocError::TierInfeasible {
            tier: tier_index,
            latency_s: floor_latency,
            deadline_s: terms.deadline_s,
        });
    }
    if terms.fc == 0.0 {
        return Ok(0.0);
    }
    let raw = 1.0 - (terms.deadline_s - floor_latency) / (unit_time * terms.fc);
    Ok(raw.clamp(0.0, 1.0))
}

fn check_share(share: f64) -> Result<(), AllocError> {
    if !(share > 0.0 && share <= 1.0) {
        return Err(AllocError::BadShare(share));
    }
    Ok(())
}

/// Smallest pruning ratio that fits tier `m`'s deadline on bandwidth
/// share `share`, by inverting the latency model: zero when the
/// unpruned model already fits, clamped at the point where the whole
/// prunable segment is gone.
///
/// # Errors
///
/// [`AllocError::TierInfeasible`] when even a fully pruned model misses
/// the deadline at this share; share must lie in `(0, 1]`.
pub fn min_pruning_ratio(
    tier: &TierProfile,
    ctx: &SolveContext,
    share: f64,
) -> Result<f64, AllocError> {
    ctx.validate()?;
    tier.validate()?;
    check_share(share)?;
    let terms = TierTerms::new(tier, ctx)?;
    let rate = ctx.net.uplink_rate(tier.channel_gain, share)?;
    if !(rate > 0.0) {
        return Err(NetModelError::ZeroBandwidth.into());
    }
    let unit_time = terms.compute_per_weight_s + terms.bits_per_weight / rate;
    ratio_from_unit_time(tier.tier, &terms, unit_time)
}

/// The final ratio at a solved share, written directly in terms of the
/// share-scaled rate. Algebraically identical to [`min_pruning_ratio`]
/// at the same share — debug builds assert the two agree to 1e-9 —
/// but evaluated along the route the closed-form derivation takes.
///
/// # Errors
///
/// Same conditions as [`min_pruning_ratio`].
pub fn final_pruning_ratio(
    tier: &TierProfile,
    ctx: &SolveContext,
    share: f64,
) -> Result<f64, AllocError> {
    ctx.validate()?;
    tier.validate()?;
    check_share(share)?;
    let terms = TierTerms::new(tier, ctx)?;
    let scaled_rate = share * terms.full_band_rate;
    let unit_time = terms.compute_per_weight_s + terms.bits_per_weight / scaled_rate;
    // Same infeasibility gate as the inversion route, so the two
    // operations fail in the same circumstances.
    let floor_latency = terms.conv * unit_time;
    if floor_latency > terms.deadline_s * (1.0 + DEADLINE_REL_TOL) {
        return Err(AllocError::TierInfeasible {
            tier: tier.tier,
            latency_s: floor_latency,
            deadline_s: terms.deadline_s,
        });
    }
    if terms.fc == 0.0 {
        return Ok(0.0);
    }
    let numer = scaled_rate * (terms.deadline_s - terms.conv * terms.compute_per_weight_s)
        - terms.bits_per_weight * terms.conv;
    let denom = (scaled_rate * terms.compute_per_weight_s + terms.bits_per_weight) * terms.fc;
    let ratio = (1.0 - numer / denom).clamp(0.0, 1.0);
    #[cfg(debug_assertions)]
    {
        if let Ok(reference) = min_pruning_ratio(tier, ctx, share) {
            debug_assert!(
                (ratio - reference).abs() <= IDENTITY_ABS_TOL,
                "ratio routes disagree: {ratio} vs {reference}"
            );
        }
    }
    Ok(ratio)
}

/// Pruning penalty of one round: the shared prefactor times
/// `sum_m (S_m / D_m)^2 * rho_m`.
///
/// # Errors
///
/// Tier and ratio lists must align, with ratios in `[0, 1]`.
pub fn objective(
    tiers: &[TierProfile],
    ctx: &SolveContext,
    ratios: &[f64],
) -> Result<f64, AllocError> {
    ctx.validate()?;
    if tiers.len() != ratios.len() {
        return Err(AllocError::BadContext(format!(
            "{} tiers but {} ratios",
            tiers.len(),
            ratios.len()
        )));
    }
    let mut weighted = 0.0;
    for (tier, &ratio) in tiers.iter().zip(ratios) {
        tier.validate()?;
        if !(0.0..=1.0).contains(&ratio) {
            return Err(AllocError::BadContext(format!(
                "pruning ratio {ratio} outside [0, 1]"
            )));
        }
        let user_ratio = tier.users as f64 / tier.data_count as f64;
        weighted += user_ratio * user_ratio * ratio;
    }
    Ok(ctx.consts.objective_prefactor(ctx.total_tiers) * weighted)
}

/// The stationary share before projection: where the tier's marginal
/// penalty reduction equals the multiplier. Negative when the
/// multiplier prices bandwidth above what the tier's penalty can repay.
fn stationary_share(tier: &TierProfile, terms: &TierTerms, prefactor: f64, multiplier: f64) -> f64 {
    let user_ratio = tier.users as f64 / tier.data_count as f64;
    let gain_term = prefactor
        * user_ratio
        * user_ratio
        * terms.deadline_s
        * terms.bits_per_weight
        * terms.fc
        * terms.full_band_rate
        / multiplier;
    let root = gain_term.sqrt();
    (root - terms.bits_per_weight * terms.fc)
        / (terms.full_band_rate * terms.fc * terms.compute_per_weight_s)
}

/// Unprojected closed-form share at a fixed multiplier; exposed so the
/// sign structure and channel-gain monotonicity can be probed directly.
///
/// # Errors
///
/// Multiplier must be positive; the tier needs a prunable segment.
pub fn unclamped_bandwidth(
    tier: &TierProfile,
    ctx: &SolveContext,
    multiplier: f64,
) -> Result<f64, AllocError> {
    ctx.validate()?;
    tier.validate()?;
    if !(multiplier > 0.0) || !multiplier.is_finite() {
        return Err(AllocError::BadMultiplier(multiplier));
    }
    let terms = TierTerms::new(tier, ctx)?;
    if terms.fc == 0.0 {
        return Err(AllocError::BadContext(format!(
            "tier {} has no prunable weights to trade bandwidth against",
            tier.tier
        )));
    }
    let prefactor = ctx.consts.objective_prefactor(ctx.total_tiers);
    Ok(stationary_share(tier, &terms, prefactor, multiplier))
}

/// Closed-form share at a fixed multiplier, projected onto `[0, 1]`.
///
/// # Errors
///
/// Same conditions as [`unclamped_bandwidth`].
pub fn bandwidth_closed_form(
    tier: &TierProfile,
    ctx: &SolveContext,
    multiplier: f64,
) -> Result<f64, AllocError> {
    Ok(unclamped_bandwidth(tier, ctx, multiplier)?.clamp(0.0, 1.0))
}

/// Share interval a tier's allocation is confined to: the lower end
/// barely fits the fully pruned model, the upper end fits the unpruned
/// model (or the whole band when even that is not enough).
struct ShareInterval {
    lo: f64,
    hi: f64,
    /// Whether `hi` is the exact share at which the unpruned model
    /// meets the deadline. A tier granted that share prunes nothing by
    /// definition, so its ratio is pinned to 0 rather than left to the
    /// closed form's rounding.
    unpruned_fits_at_hi: bool,
}

fn share_interval(terms: &TierTerms) -> ShareInterval {
    let lo = if terms.conv == 0.0 {
        MIN_SHARE
    } else {
        let conv_slack = terms.deadline_s / terms.conv - terms.compute_per_weight_s;
        if conv_slack > 0.0 {
            (terms.bits_per_weight / (terms.full_band_rate * conv_slack)).min(1.0)
        } else {
            1.0
        }
    };
    let slack = terms.deadline_s / terms.total_weights() - terms.compute_per_weight_s;
    let (hi, unpruned_fits_at_hi) = if slack > 0.0 {
        let unpruned_share = terms.bits_per_weight / (terms.full_band_rate * slack);
        (unpruned_share.min(1.0), unpruned_share <= 1.0)
    } else {
        (1.0, false)
    };
    ShareInterval {
        lo: lo.min(hi),
        hi,
        unpruned_fits_at_hi,
    }
}

/// Jointly allocates the band across the participating tiers and
/// derives each tier's final pruning ratio.
///
/// When the tiers' saturation shares fit inside the budget the budget
/// does not bind: every tier gets its saturation share, the multiplier
/// is 0, and no tier prunes more than its deadline forces. Otherwise
/// the multiplier is bisected until the clamped demands spend the band
/// exactly; the bracket's inner end is returned so the spent total
/// never exceeds 1.
///
/// # Errors
///
/// Propagates per-tier infeasibility (even the whole band is not
/// enough), and signals a jointly unsatisfiable budget when the
/// fully-pruned lower bounds alone exceed the band.
pub fn solve_lambda(
    tiers: &[TierProfile],
    ctx: &SolveContext,
) -> Result<AllocationDecision, AllocError> {
    ctx.validate()?;
    if tiers.is_empty() {
        return Err(AllocError::EmptyTierSet);
    }
    let mut terms = Vec::with_capacity(tiers.len());
    for tier in tiers {
        tier.validate()?;
        // Whole band, fully pruned: if that misses the deadline nothing
        // this solver decides can help.
        min_pruning_ratio(tier, ctx, 1.0)?;
        terms.push(TierTerms::new(tier, ctx)?);
    }
    let intervals: Vec<ShareInterval> = terms.iter().map(share_interval).collect();
    let prefactor = ctx.consts.objective_prefactor(ctx.total_tiers);

    let demand = |multiplier: f64| -> f64 {
        tiers
            .iter()
            .zip(&terms)
            .zip(&intervals)
            .map(|((tier, t), iv)| {
                stationary_share(tier, t, prefactor, multiplier).clamp(iv.lo, iv.hi)
            })
            .sum()
    };

    let saturation: f64 = intervals.iter().map(|iv| iv.hi).sum();
    let (lambda_star, shares): (f64, Vec<f64>) = if saturation <= 1.0 {
        (0.0, intervals.iter().map(|iv| iv.hi).collect())
    } else {
        let required: f64 = intervals.iter().map(|iv| iv.lo).sum();
        if required > 1.0 {
            return Err(AllocError::BudgetInfeasible { required });
        }
        let mut lo_mult = 1e-12;
        let mut hi_mult = 1.0;
        if demand(lo_mult) - 1.0 > 0.0 {
            let mut doublings = 0;
            while demand(hi_mult) - 1.0 > 0.0 {
                hi_mult *= 2.0;
                doublings += 1;
                if doublings > 400 {
                    return Err(AllocError::BadContext(
                        "failed to bracket the budget multiplier".into(),
                    ));
                }
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo_mult + hi_mult);
                let residual = demand(mid) - 1.0;
                if residual > 0.0 {
                    lo_mult = mid;
                } else {
                    hi_mult = mid;
                    if residual >= -BUDGET_RESIDUAL_TOL {
                        break;
                    }
                }
            }
        } else {
            // Degenerate: even a vanishing multiplier under-spends.
            hi_mult = lo_mult;
        }
        // The inner bracket end has residual <= 0, so the shares below
        // sum to at most 1 by construction.
        let shares = tiers
            .iter()
            .zip(&terms)
            .zip(&intervals)
            .map(|((tier, t), iv)| {
                stationary_share(tier, t, prefactor, hi_mult).clamp(iv.lo, iv.hi)
            })
            .collect();
        (hi_mult, shares)
    };

    let mut per_tier = Vec::with_capacity(tiers.len());
    let mut ratios = Vec::with_capacity(tiers.len());
    for ((tier, iv), &share) in tiers.iter().zip(&intervals).zip(&shares) {
        let ratio = if iv.unpruned_fits_at_hi && share >= iv.hi {
            0.0
        } else {
            final_pruning_ratio(tier, ctx, share)?
        };
        ratios.push(ratio);
        per_tier.push(TierAllocation {
            tier: tier.tier,
            users: tier.users,
            bandwidth_fraction: share,
            pruning_ratio: ratio,
        });
    }
    let objective_value = objective(tiers, ctx, &ratios)?;
    Ok(AllocationDecision {
        per_tier,
        lambda_star,
        objective_value,
    })
}

/// The fractional family `1 - (v0 - v1/x) / (v2 + v3/x)` that every
/// tier's unclamped ratio-vs-share curve belongs to (`v` nonnegative,
/// `v2 + v3 > 0`). Public so curvature can be probed on hand-picked
/// coefficients as well as on real tiers.
pub fn canonical_term(v: [f64; 4], x: f64) -> f64 {
    1.0 - (v[0] - v[1] / x) / (v[2] + v[3] / x)
}

fn canonical_coefficients(terms: &TierTerms) -> [f64; 4] {
    [
        terms.deadline_s - terms.conv * terms.compute_per_weight_s,
        terms.conv * terms.bits_per_weight / terms.full_band_rate,
        terms.compute_per_weight_s * terms.fc,
        terms.bits_per_weight * terms.fc / terms.full_band_rate,
    ]
}

/// Discrete curvature extremes of one tier's unclamped ratio over a
/// share grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TierCurvature {
    pub tier: usize,
    pub min_second_difference: f64,
    pub max_second_difference: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityReport {
    pub per_tier: Vec<TierCurvature>,
}

impl ConvexityReport {
    /// Most negative second difference across all tiers; convexity
    /// holds numerically when this stays above `-tol`.
    pub fn min_second_difference(&self) -> f64 {
        self.per_tier
            .iter()
            .map(|t| t.min_second_difference)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Evaluates every tier's unclamped ratio on a dense share grid in
/// `[1e-3, 1]` and reports the extreme discrete second differences —
/// a numerical convexity check of the objective the water-filling
/// argument relies on.
///
/// # Errors
///
/// Propagates tier validation and rate failures.
pub fn verify_convexity(
    tiers: &[TierProfile],
    ctx: &SolveContext,
) -> Result<ConvexityReport, AllocError> {
    ctx.validate()?;
    const GRID: usize = 1000;
    let mut per_tier = Vec::with_capacity(tiers.len());
    for tier in tiers {
        tier.validate()?;
        let terms = TierTerms::new(tier, ctx)?;
        let v = canonical_coefficients(&terms);
        let lo = 1e-3;
        let step = (1.0 - lo) / (GRID - 1) as f64;
        let values: Vec<f64> = (0..GRID)
            .map(|i| canonical_term(v, lo + i as f64 * step))
            .collect();
        let mut min_d2 = f64::INFINITY;
        let mut max_d2 = f64::NEG_INFINITY;
        for w in values.windows(3) {
            let d2 = w[2] - 2.0 * w[1] + w[0];
            min_d2 = min_d2.min(d2);
            max_d2 = max_d2.max(d2);
        }
        per_tier.push(TierCurvature {
            tier: tier.tier,
            min_second_difference: min_d2,
            max_second_difference: max_d2,
        });
    }
    Ok(ConvexityReport { per_tier })
}
