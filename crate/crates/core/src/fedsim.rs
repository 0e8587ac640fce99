//! Time-triggered federated training over the modeled uplink.
//!
//! Devices are profiled once into latency tiers: tier `m` holds the
//! devices whose unpruned round takes between `m-1` and `m` aggregation
//! periods, boundary included. The server aggregates on a fixed clock —
//! every `delta_t` seconds — and tier `m` joins every `m`-th tick,
//! training from the global model that was current when its round
//! started `m` ticks ago. Tiers that sat a tick out (or missed their
//! deadline) keep their staleness-weighted slot in the average, filled
//! with the previous global model, so slow devices inform the model
//! without stalling the clock.
//!
//! Four schemes share this loop and differ only in how each round's
//! bandwidth shares and pruning ratios are chosen. Throughout, a tier
//! is evaluated through its average member: the allocator hands the
//! tier one share, and every member is modeled as transmitting on that
//! share. Uploads of tiers that miss their deadline still happen — the
//! bits are spent — but the server ignores them for that round.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::allocator::{self, AllocError, SolveContext, TierProfile};
use crate::bound::{evaluate_bound, BoundConstants, BoundError, BoundReport, TierSizes};
use crate::data::{DataError, LabeledDataset};
use crate::exec;
use crate::netmodel::{meets_deadline, Device, NetModelError, NetworkConfig};
use crate::nn::{self, ModelSpec, NnError};
use crate::pruning::{self, PruningError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Net(#[from] NetModelError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Prune(#[from] PruningError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error("bad experiment: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Seed-stream tags; see [`derive_seed`].
pub const SEED_TAG_INIT: u64 = 0;
pub const SEED_TAG_FADING: u64 = 1;
pub const SEED_TAG_LOCAL: u64 = 2;
pub const SEED_TAG_GEOMETRY: u64 = 3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from the experiment master seed,
/// a purpose tag, and two coordinates (typically round and device).
/// Every random draw in a run flows through here, so one master seed
/// pins the whole trajectory while streams stay uncorrelated.
pub fn derive_seed(master: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut x = master;
    for v in [tag, a, b] {
        x = splitmix64(x ^ v);
    }
    x
}

/// Resource policy run on top of the shared tiered loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// Joint bandwidth and pruning optimization.
    TtPrune,
    /// Equal bandwidth split across the round's participants; each
    /// tier prunes whatever its deadline then forces.
    EqualResource,
    /// Classic synchronous averaging: one tier, no pruning, no
    /// deadline — the clock waits for the slowest device.
    FedAvg,
    /// Tiered schedule and equal split, but never pruning; tiers that
    /// miss their deadline lose the round.
    NoPruning,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::TtPrune,
        Scheme::EqualResource,
        Scheme::FedAvg,
        Scheme::NoPruning,
    ];

    /// Stable identifier used in metrics output.
    pub fn id(self) -> &'static str {
        match self {
            Scheme::TtPrune => "tt-prune",
            Scheme::EqualResource => "equal-resource",
            Scheme::FedAvg => "fedavg",
            Scheme::NoPruning => "no-pruning",
        }
    }

    /// Identifier safe for file names.
    pub fn file_stem(self) -> &'static str {
        match self {
            Scheme::TtPrune => "tt_prune",
            Scheme::EqualResource => "equal_resource",
            Scheme::FedAvg => "fedavg",
            Scheme::NoPruning => "no_pruning",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Scheme {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        Scheme::ALL
            .into_iter()
            .find(|scheme| scheme.id() == s)
            .ok_or_else(|| {
                SimError::BadConfig(format!(
                    "unknown scheme {s:?}; expected one of tt-prune, equal-resource, fedavg, no-pruning"
                ))
            })
    }
}

/// How the aggregation period is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaTSpec {
    /// Fixed period in seconds.
    Absolute(f64),
    /// Fraction of the slowest device's profiled round time. `1.0`
    /// collapses the schedule to a single tier.
    FractionOfSlowest(f64),
}

/// Convergence-bound pruning sensitivity: fixed, or the `M/2` default
/// resolved once the tier count is known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum XiSpec {
    Auto,
    Fixed(f64),
}

/// How member channel gains collapse into the tier average the
/// allocator sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainAveraging {
    Arithmetic,
    /// Geometric mean: less sensitive to a single deep fade.
    Geometric,
}

/// Perturbation for assignment-sensitivity studies: after profiling,
/// move one device by `offset` tiers (clamped to the valid range).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForcedMove {
    pub device: usize,
    pub offset: i64,
}

/// A complete experiment description. The same experiment can be run
/// under each [`Scheme`]; everything random is pinned by `seed`.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub net: NetworkConfig,
    pub model: ModelSpec,
    pub constants: BoundConstants,
    pub xi: XiSpec,
    pub gain_averaging: GainAveraging,
    pub devices: Vec<Device>,
    pub train: LabeledDataset,
    /// Per-device row indices into `train`.
    pub shards: Vec<Vec<usize>>,
    pub eval: LabeledDataset,
    pub delta_t: DeltaTSpec,
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub forced_move: Option<ForcedMove>,
}

impl Experiment {
    fn validate(&self) -> Result<(), SimError> {
        let fail = |msg: String| Err(SimError::BadConfig(msg));
        if self.devices.is_empty() {
            return fail("no devices".into());
        }
        if self.shards.len() != self.devices.len() {
            return fail(format!(
                "{} devices but {} shards",
                self.devices.len(),
                self.shards.len()
            ));
        }
        self.model.validate()?;
        if self.train.dim() != self.model.input_dim || self.eval.dim() != self.model.input_dim {
            return fail(format!(
                "model expects {}-dimensional inputs, data has {} (train) / {} (eval)",
                self.model.input_dim,
                self.train.dim(),
                self.eval.dim()
            ));
        }
        for (d, (device, shard)) in self.devices.iter().zip(&self.shards).enumerate() {
            if shard.is_empty() {
                return fail(format!("device {d} has an empty shard"));
            }
            if let Some(&bad) = shard.iter().find(|&&row| row >= self.train.len()) {
                return fail(format!(
                    "device {d} references row {bad} outside the training set"
                ));
            }
            if device.data_count != shard.len() {
                return fail(format!(
                    "device {d} declares {} samples but its shard holds {}",
                    device.data_count,
                    shard.len()
                ));
            }
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return fail("local epochs and batch size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("bad learning rate {}", self.learning_rate));
        }
        let period = match self.delta_t {
            DeltaTSpec::Absolute(v) | DeltaTSpec::FractionOfSlowest(v) => v,
        };
        if !(period > 0.0) || !period.is_finite() {
            return fail(format!(
                "aggregation period spec must be positive, got {period}"
            ));
        }
        if let XiSpec::Fixed(xi) = self.xi {
            if !(xi > 0.0) || !xi.is_finite() {
                return fail(format!("pruning sensitivity must be positive, got {xi}"));
            }
        }
        if let Some(mv) = self.forced_move {
            if mv.device >= self.devices.len() {
                return fail(format!("forced move targets unknown device {}", mv.device));
            }
        }
        Ok(())
    }
}

/// Result of the one-off profiling pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TierAssignment {
    /// Deployment tier count `M`.
    pub tier_count: usize,
    /// Resolved aggregation period in seconds.
    pub delta_t_s: f64,
    /// Tier index (1-based) per device.
    pub tier_of_device: Vec<usize>,
    /// Profiled unpruned round latency per device, in seconds.
    pub profile_latency_s: Vec<f64>,
    pub slowest_s: f64,
}

/// Profiles every device and assigns tiers.
///
/// Profiling models the deployment's sizing survey: each device is
/// timed on an unpruned round with an equal `1/U` share of the band and
/// its deterministic path gain — fading is a per-round nuisance the
/// survey deliberately averages out. A device lands in tier `m` when
/// its time is in `((m-1)*delta_t, m*delta_t]`; sitting exactly on a
/// boundary selects the lower tier. Under [`Scheme::FedAvg`] there are
/// no deadlines and the assignment collapses to a single tier.
pub fn profile_and_assign(exp: &Experiment, scheme: Scheme) -> Result<TierAssignment, SimError> {
    exp.validate()?;
    let user_count = exp.devices.len();
    let share = 1.0 / user_count as f64;
    let weight_count = exp.model.layout().total() as f64;
    let mut latencies = Vec::with_capacity(user_count);
    for device in &exp.devices {
        let mut probe = device.clone();
        probe.channel_gain = exp.net.path_gain(device.distance_m);
        let breakdown =
            exp.net
                .round_latency(&probe, weight_count, exp.local_epochs as f64, share)?;
        latencies.push(breakdown.total_s());
    }
    let slowest = latencies.iter().cloned().fold(0.0f64, f64::max);
    let delta_t = match exp.delta_t {
        DeltaTSpec::Absolute(v) => v,
        DeltaTSpec::FractionOfSlowest(f) => f * slowest,
    };
    if !(delta_t > 0.0) || !delta_t.is_finite() {
        return Err(SimError::BadConfig(format!(
            "resolved aggregation period {delta_t} s is not positive"
        )));
    }
    let tier_count = if scheme == Scheme::FedAvg {
        1
    } else {
        ((slowest / delta_t).ceil() as usize).max(1)
    };
    let mut tier_of_device: Vec<usize> = latencies
        .iter()
        .map(|&t| {
            // Shaving a relative epsilon keeps an exact multiple of the
            // period in the lower tier.
            let ratio = t / delta_t * (1.0 - 1e-12);
            (ratio.ceil() as usize).clamp(1, tier_count)
        })
        .collect();
    if scheme != Scheme::FedAvg {
        if let Some(mv) = exp.forced_move {
            let current = tier_of_device[mv.device] as i64;
            tier_of_device[mv.device] = (current + mv.offset).clamp(1, tier_count as i64) as usize;
        }
    }
    Ok(TierAssignment {
        tier_count,
        delta_t_s: delta_t,
        tier_of_device,
        profile_latency_s: latencies,
        slowest_s: slowest,
    })
}

fn make_profile(exp: &Experiment, tier: usize, members: &[usize], gains: &[f64]) -> TierProfile {
    let n = members.len() as f64;
    let gain = match exp.gain_averaging {
        GainAveraging::Arithmetic => members.iter().map(|&d| gains[d]).sum::<f64>() / n,
        GainAveraging::Geometric => (members.iter().map(|&d| gains[d].ln()).sum::<f64>() / n).exp(),
    };
    TierProfile {
        tier,
        users: members.len(),
        data_count: members.iter().map(|&d| exp.shards[d].len()).sum(),
        cycles_per_weight: members
            .iter()
            .map(|&d| exp.devices[d].cycles_per_weight)
            .sum::<f64>()
            / n,
        cpu_hz: members.iter().map(|&d| exp.devices[d].cpu_hz).sum::<f64>() / n,
        channel_gain: gain,
        layout: exp.model.layout(),
    }
}

fn tier_members(assignment: &TierAssignment) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); assignment.tier_count];
    for (d, &tier) in assignment.tier_of_device.iter().enumerate() {
        members[tier - 1].push(d);
    }
    members
}

/// Tier-average profiles at the deterministic path gains, one per
/// non-empty tier — the fading-free allocation view used for one-shot
/// inspection of the solver.
pub fn profiles_at_path_gain(exp: &Experiment, assignment: &TierAssignment) -> Vec<TierProfile> {
    let gains: Vec<f64> = exp
        .devices
        .iter()
        .map(|d| exp.net.path_gain(d.distance_m))
        .collect();
    tier_members(assignment)
        .iter()
        .enumerate()
        .filter(|(_, ms)| !ms.is_empty())
        .map(|(i, ms)| make_profile(exp, i + 1, ms, &gains))
        .collect()
}

/// Whether tier `m` starts a round at global round `k` (both 1-based):
/// tier `m` joins every `m`-th aggregation tick.
pub fn tier_participates(round: usize, tier: usize) -> bool {
    assert!(round >= 1 && tier >= 1, "rounds and tiers are 1-based");
    round.is_multiple_of(tier)
}

/// Staleness weights over all `tier_count` tiers at round `round`.
///
/// Weight `m` is proportional to how many rounds tier `m` could have
/// delivered by now if it were the slowest tier still ahead of it —
/// `floor(round / (M+1-m))` — normalized so the weights sum to 1. The
/// numerators are exact integers whose sum telescopes to the
/// denominator, so the weights sum to 1 up to one final division per
/// entry.
pub fn staleness_weights(round: usize, tier_count: usize) -> Vec<f64> {
    assert!(
        round >= 1 && tier_count >= 1,
        "rounds and tiers are 1-based"
    );
    let denominator: usize = (1..=tier_count).map(|j| round / j).sum();
    (1..=tier_count)
        .map(|m| (round / (tier_count + 1 - m)) as f64 / denominator as f64)
        .collect()
}

/// Data-weighted average of one tier's member models.
pub fn intra_tier_aggregate(
    models: &[Vec<f64>],
    data_counts: &[usize],
) -> Result<Vec<f64>, SimError> {
    if models.is_empty() || models.len() != data_counts.len() {
        return Err(SimError::BadConfig(format!(
            "{} member models against {} data counts",
            models.len(),
            data_counts.len()
        )));
    }
    let total: usize = data_counts.iter().sum();
    if total == 0 {
        return Err(SimError::BadConfig("tier holds no data".into()));
    }
    let width = models[0].len();
    let mut out = vec![0.0; width];
    for (model, &count) in models.iter().zip(data_counts) {
        if model.len() != width {
            return Err(SimError::BadConfig("member models differ in width".into()));
        }
        let weight = count as f64 / total as f64;
        for (acc, &w) in out.iter_mut().zip(model) {
            *acc += weight * w;
        }
    }
    Ok(out)
}

/// Staleness-weighted global update. Tier `m` contributes its fresh
/// model when it delivered one this round, and the previous global
/// model otherwise, so absent tiers pull the average toward where it
/// already was rather than toward zero.
pub fn global_aggregate(
    alphas: &[f64],
    tier_models: &[Option<Vec<f64>>],
    previous: &[f64],
) -> Result<Vec<f64>, SimError> {
    if alphas.len() != tier_models.len() {
        return Err(SimError::BadConfig(format!(
            "{} staleness weights against {} tier slots",
            alphas.len(),
            tier_models.len()
        )));
    }
    let mut out = vec![0.0; previous.len()];
    for (&alpha, model) in alphas.iter().zip(tier_models) {
        let source: &[f64] = match model {
            Some(m) => {
                if m.len() != previous.len() {
                    return Err(SimError::BadConfig(
                        "tier model width differs from the global model".into(),
                    ));
                }
                m
            }
            None => previous,
        };
        for (acc, &w) in out.iter_mut().zip(source) {
            *acc += alpha * w;
        }
    }
    Ok(out)
}

/// One scheduled tier's slice of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct TierRoundRecord {
    pub tier: usize,
    pub users: usize,
    /// Bandwidth share granted to the tier (each member modeled at this
    /// share).
    pub b_star: f64,
    pub rho_star: f64,
    /// Budget multiplier of the round's allocation; 0 whenever the
    /// budget did not bind or the scheme does not optimize.
    pub lambda_star: f64,
    /// Representative (tier-average) round latency; for
    /// [`Scheme::FedAvg`], the slowest member's actual latency.
    pub latency_s: f64,
    /// Whether the tier's upload landed within its deadline and was
    /// merged into the global model.
    pub on_time: bool,
    /// Bits uploaded by the tier this round (spent even when late).
    pub uplink_bits: u64,
}

/// Everything recorded about one global round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    /// Scheduled tiers, ascending; empty when no tier was due.
    pub tiers: Vec<TierRoundRecord>,
    /// Evaluation loss of the post-aggregation global model.
    pub loss: f64,
    pub accuracy: f64,
    /// Wall-clock at the end of the round: `round * delta_t` on the
    /// tiered schedules, accumulated slowest-member time under
    /// [`Scheme::FedAvg`].
    pub cum_time_s: f64,
    pub cum_uplink_bits: u64,
    /// Diagnostic per-device latency at the device's own gain, for
    /// devices whose tier ran this round.
    pub per_device_latency_s: Vec<Option<f64>>,
}

/// A finished run.
#[derive(Debug, Clone)]
pub struct SimReport {
    pub scheme: Scheme,
    pub tier_count: usize,
    pub delta_t_s: f64,
    pub tier_of_device: Vec<usize>,
    pub profile_latency_s: Vec<f64>,
    /// Bound constants actually used (pruning sensitivity resolved).
    pub constants: BoundConstants,
    pub initial_loss: f64,
    pub initial_accuracy: f64,
    pub rounds: Vec<RoundMetrics>,
    /// Convergence-bound decomposition over the run's recorded ratios.
    pub bound: BoundReport,
    pub final_weights: Vec<f64>,
}

impl SimReport {
    /// First round whose evaluation accuracy reaches `target`.
    pub fn first_round_reaching(&self, target: f64) -> Option<&RoundMetrics> {
        self.rounds.iter().find(|r| r.accuracy >= target)
    }

    pub fn final_accuracy(&self) -> f64 {
        self.rounds
            .last()
            .map_or(self.initial_accuracy, |r| r.accuracy)
    }
}

/// Per-round allocation for the scheduled tiers, scheme-dependent.
struct RoundAllocation {
    shares: Vec<f64>,
    ratios: Vec<f64>,
    lambda_star: f64,
}

fn allocate_round(
    scheme: Scheme,
    profiles: &[TierProfile],
    ctx: &SolveContext,
) -> Result<RoundAllocation, SimError> {
    let participants: usize = profiles.iter().map(|p| p.users).sum();
    let equal_share = 1.0 / participants as f64;
    match scheme {
        Scheme::TtPrune => {
            let decision = allocator::solve_lambda(profiles, ctx)?;
            Ok(RoundAllocation {
                shares: decision
                    .per_tier
                    .iter()
                    .map(|t| t.bandwidth_fraction)
                    .collect(),
                ratios: decision.per_tier.iter().map(|t| t.pruning_ratio).collect(),
                lambda_star: decision.lambda_star,
            })
        }
        Scheme::EqualResource => {
            let ratios = profiles
                .iter()
                .map(|p| allocator::min_pruning_ratio(p, ctx, equal_share))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(RoundAllocation {
                shares: vec![equal_share; profiles.len()],
                ratios,
                lambda_star: 0.0,
            })
        }
        Scheme::FedAvg | Scheme::NoPruning => Ok(RoundAllocation {
            shares: vec![equal_share; profiles.len()],
            ratios: vec![0.0; profiles.len()],
            lambda_star: 0.0,
        }),
    }
}

/// Runs `exp` under `scheme` from scratch and reports every round.
pub fn run(exp: &Experiment, scheme: Scheme) -> Result<SimReport, SimError> {
    let assignment = profile_and_assign(exp, scheme)?;
    let tier_count = assignment.tier_count;
    let delta_t = assignment.delta_t_s;
    let layout = exp.model.layout();
    let total_weights = layout.total();
    let user_count = exp.devices.len();
    let quant_bits = u64::from(exp.net.quant_bits);

    let constants = BoundConstants {
        xi: match exp.xi {
            XiSpec::Auto => tier_count as f64 / 2.0,
            XiSpec::Fixed(v) => v,
        },
        ..exp.constants
    };

    let members = tier_members(&assignment);
    let tier_sizes: Vec<TierSizes> = members
        .iter()
        .map(|ms| TierSizes {
            users: ms.len(),
            data: ms.iter().map(|&d| exp.shards[d].len()).sum(),
        })
        .collect();
    let shard_data: Vec<LabeledDataset> = exp.shards.iter().map(|s| exp.train.subset(s)).collect();

    let mut globals: Vec<Vec<f64>> = vec![nn::init_weights(
        &exp.model,
        derive_seed(exp.seed, SEED_TAG_INIT, 0, 0),
    )?];
    let (initial_loss, initial_accuracy) =
        nn::loss_and_accuracy(&exp.model, &globals[0], &exp.eval)?;
    let mut best_loss = initial_loss;

    // Per-device (masked start, result) of the latest local update,
    // from which the next participation's importance scores come.
    let mut update_history: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; user_count];
    let zeros = vec![0.0; total_weights];

    let mut rho_previous = vec![0.0; tier_count];
    let mut rho_history: Vec<Vec<f64>> = Vec::with_capacity(exp.rounds);
    let mut cum_time = 0.0f64;
    let mut cum_bits = 0u64;
    let mut rounds_out: Vec<RoundMetrics> = Vec::with_capacity(exp.rounds);

    for round in 1..=exp.rounds {
        let gains: Vec<f64> = exp
            .devices
            .iter()
            .enumerate()
            .map(|(d, device)| {
                exp.net.channel_gain(
                    device.distance_m,
                    derive_seed(exp.seed, SEED_TAG_FADING, round as u64, d as u64),
                )
            })
            .collect();

        let scheduled: Vec<usize> = (1..=tier_count)
            .filter(|&m| tier_participates(round, m) && !members[m - 1].is_empty())
            .collect();

        let profiles: Vec<TierProfile> = scheduled
            .iter()
            .map(|&m| make_profile(exp, m, &members[m - 1], &gains))
            .collect();

        let ctx = SolveContext {
            net: &exp.net,
            consts: &constants,
            delta_t,
            local_epochs: exp.local_epochs as f64,
            total_tiers: tier_count,
        };
        let allocation = if profiles.is_empty() {
            RoundAllocation {
                shares: Vec::new(),
                ratios: Vec::new(),
                lambda_star: 0.0,
            }
        } else {
            allocate_round(scheme, &profiles, &ctx)?
        };

        // Representative latency decides whether the tier's upload is
        // merged; per-device latencies are diagnostic.
        let mut per_device_latency: Vec<Option<f64>> = vec![None; user_count];
        let mut tier_latency = Vec::with_capacity(profiles.len());
        let mut tier_on_time = Vec::with_capacity(profiles.len());
        for (i, profile) in profiles.iter().enumerate() {
            let surviving = layout.conv_weight_count as f64
                + (1.0 - allocation.ratios[i]) * layout.fc_weight_count as f64;
            let representative = Device {
                id: usize::MAX,
                cycles_per_weight: profile.cycles_per_weight,
                cpu_hz: profile.cpu_hz,
                distance_m: f64::NAN, // gain already resolved
                channel_gain: profile.channel_gain,
                data_count: profile.data_count,
            };
            let breakdown = exp.net.round_latency(
                &representative,
                surviving,
                exp.local_epochs as f64,
                allocation.shares[i],
            )?;
            let mut slowest_member = 0.0f64;
            for &d in &members[profile.tier - 1] {
                let mut device = exp.devices[d].clone();
                device.channel_gain = gains[d];
                let member_lat = exp
                    .net
                    .round_latency(
                        &device,
                        surviving,
                        exp.local_epochs as f64,
                        allocation.shares[i],
                    )?
                    .total_s();
                per_device_latency[d] = Some(member_lat);
                slowest_member = slowest_member.max(member_lat);
            }
            let (latency_s, on_time) = if scheme == Scheme::FedAvg {
                // No deadline: the round simply lasts as long as the
                // slowest device takes.
                (slowest_member, true)
            } else {
                let lat = breakdown.total_s();
                (lat, meets_deadline(&breakdown, profile.tier, delta_t))
            };
            tier_latency.push(latency_s);
            tier_on_time.push(on_time);
        }

        // Local training. Every member of a scheduled tier trains from
        // the global model its tier started from and uploads — the
        // spend happens whether or not the upload lands on time.
        struct TrainTask {
            device: usize,
            tier_pos: usize,
            masked_start: Vec<f64>,
            mask: pruning::PruningMask,
            seed: u64,
        }
        let mut tasks: Vec<TrainTask> = Vec::new();
        let mut tier_bits = vec![0u64; profiles.len()];
        for (i, profile) in profiles.iter().enumerate() {
            let start = &globals[round - profile.tier];
            for &d in &members[profile.tier - 1] {
                let scores = match &update_history[d] {
                    Some((before, after)) => pruning::importance_scores(before, after)?,
                    None => pruning::importance_scores(&zeros, start)?,
                };
                let mask = pruning::build_mask(&scores, &layout, allocation.ratios[i])?;
                tier_bits[i] += quant_bits * mask.kept_count() as u64;
                tasks.push(TrainTask {
                    device: d,
                    tier_pos: i,
                    masked_start: pruning::apply_mask(start, &mask),
                    mask,
                    seed: derive_seed(exp.seed, SEED_TAG_LOCAL, round as u64, d as u64),
                });
            }
        }
        let results: Vec<Result<Vec<f64>, NnError>> = exec::map_slice(&tasks, |task| {
            nn::local_update(
                &exp.model,
                &task.masked_start,
                &task.mask,
                &shard_data[task.device],
                exp.local_epochs,
                exp.learning_rate,
                exp.batch_size,
                task.seed,
            )
        });

        let mut tier_member_models: Vec<(Vec<Vec<f64>>, Vec<usize>)> =
            vec![(Vec::new(), Vec::new()); profiles.len()];
        for (task, result) in tasks.into_iter().zip(results) {
            let updated = result?;
            tier_member_models[task.tier_pos].0.push(updated.clone());
            tier_member_models[task.tier_pos]
                .1
                .push(exp.shards[task.device].len());
            update_history[task.device] = Some((task.masked_start, updated));
        }

        let mut tier_models: Vec<Option<Vec<f64>>> = vec![None; tier_count];
        for (i, profile) in profiles.iter().enumerate() {
            if tier_on_time[i] {
                let (models, counts) = &tier_member_models[i];
                tier_models[profile.tier - 1] = Some(intra_tier_aggregate(models, counts)?);
            }
        }
        let alphas = staleness_weights(round, tier_count);
        let new_global = global_aggregate(&alphas, &tier_models, &globals[round - 1])?;
        let (loss, accuracy) = nn::loss_and_accuracy(&exp.model, &new_global, &exp.eval)?;
        best_loss = best_loss.min(loss);
        globals.push(new_global);

        let mut rho_row = rho_previous.clone();
        for (i, profile) in profiles.iter().enumerate() {
            rho_row[profile.tier - 1] = allocation.ratios[i];
        }
        rho_previous = rho_row.clone();
        rho_history.push(rho_row);

        cum_bits += tier_bits.iter().sum::<u64>();
        match scheme {
            // Multiplying rather than accumulating keeps the clock an
            // exact multiple of the period.
            Scheme::TtPrune | Scheme::EqualResource | Scheme::NoPruning => {
                cum_time = round as f64 * delta_t;
            }
            Scheme::FedAvg => {
                cum_time += tier_latency.first().copied().unwrap_or(0.0);
            }
        }

        let tiers: Vec<TierRoundRecord> = profiles
            .iter()
            .enumerate()
            .map(|(i, profile)| TierRoundRecord {
                tier: profile.tier,
                users: profile.users,
                b_star: allocation.shares[i],
                rho_star: allocation.ratios[i],
                lambda_star: allocation.lambda_star,
                latency_s: tier_latency[i],
                on_time: tier_on_time[i],
                uplink_bits: tier_bits[i],
            })
            .collect();
        rounds_out.push(RoundMetrics {
            round,
            tiers,
            loss,
            accuracy,
            cum_time_s: cum_time,
            cum_uplink_bits: cum_bits,
            per_device_latency_s: per_device_latency,
        });
    }

    let f_init_gap = (initial_loss - best_loss).max(0.0);
    let bound = evaluate_bound(&constants, &tier_sizes, &rho_history, f_init_gap)?;
    let final_weights = globals.pop().expect("at least the initial model");
    Ok(SimReport {
        scheme,
        tier_count,
        delta_t_s: delta_t,
        tier_of_device: assignment.tier_of_device,
        profile_latency_s: assignment.profile_latency_s,
        constants,
        initial_loss,
        initial_accuracy,
        rounds: rounds_out,
        bound,
        final_weights,
    })
}

/// Column layout of the per-round metrics CSV: one row per scheduled
/// tier, round-level values repeated on each of the round's rows.
pub const METRICS_CSV_HEADER: &str =
    "round,tier,scheme,b_star,rho_star,lambda_star,latency_s,loss,accuracy,cum_time_s,cum_uplink_bits";

/// Writes the run's metrics as CSV. Floats print in Rust's shortest
/// round-trip form, so identical runs produce byte-identical files.
pub fn write_metrics_csv<W: Write>(
    mut sink: W,
    scheme: Scheme,
    rounds: &[RoundMetrics],
) -> io::Result<()> {
    writeln!(sink, "{METRICS_CSV_HEADER}")?;
    for round in rounds {
        for tier in &round.tiers {
            writeln!(
                sink,
                "{},{},{},{},{},{},{},{},{},{},{}",
                round.round,
                tier.tier,
                scheme.id(),
                tier.b_star,
                tier.rho_star,
                tier.lambda_star,
                tier.latency_s,
                round.loss,
                round.accuracy,
                round.cum_time_s,
                round.cum_uplink_bits,
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, partition, PartitionSpec, SyntheticSpec};
    use crate::netmodel::{Fading, NoiseModel};

    #[test]
    fn derived_seeds_separate_streams() {
        let a = derive_seed(7, SEED_TAG_FADING, 3, 4);
        assert_eq!(a, derive_seed(7, SEED_TAG_FADING, 3, 4));
        assert_ne!(a, derive_seed(7, SEED_TAG_LOCAL, 3, 4));
        assert_ne!(a, derive_seed(7, SEED_TAG_FADING, 4, 3));
        assert_ne!(a, derive_seed(8, SEED_TAG_FADING, 3, 4));
    }

    #[test]
    fn scheme_ids_round_trip() {
        for scheme in Scheme::ALL {
            assert_eq!(scheme.id().parse::<Scheme>().unwrap(), scheme);
        }
        assert!("federated".parse::<Scheme>().is_err());
    }

    #[test]
    fn participation_follows_the_tick_pattern() {
        for k in 1..=12 {
            assert!(tier_participates(k, 1));
            assert_eq!(tier_participates(k, 2), k % 2 == 0);
            assert_eq!(tier_participates(k, 3), k % 3 == 0);
        }
    }

    #[test]
    fn first_round_puts_all_weight_on_the_fast_tier() {
        assert_eq!(staleness_weights(1, 3), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn second_round_two_tiers_split_one_third_two_thirds() {
        let w = staleness_weights(2, 2);
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn staleness_weights_sum_to_one() {
        for round in 1..=50 {
            for tiers in 1..=5 {
                let sum: f64 = staleness_weights(round, tiers).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "k={round} M={tiers}: {sum}");
            }
        }
    }

    #[test]
    fn intra_tier_aggregation_weights_by_data() {
        let models = vec![vec![1.0, 0.0], vec![4.0, 6.0]];
        let merged = intra_tier_aggregate(&models, &[1, 2]).unwrap();
        assert!((merged[0] - 3.0).abs() < 1e-15);
        assert!((merged[1] - 4.0).abs() < 1e-15);
        assert!(intra_tier_aggregate(&[], &[]).is_err());
    }

    #[test]
    fn absent_tiers_fall_back_to_the_previous_global() {
        let previous = vec![2.0, -1.0];
        let fresh = vec![4.0, 3.0];
        let merged = global_aggregate(&[0.25, 0.75], &[None, Some(fresh)], &previous).unwrap();
        assert!((merged[0] - (0.25 * 2.0 + 0.75 * 4.0)).abs() < 1e-15);
        assert!((merged[1] - (0.75 * 3.0 - 0.25)).abs() < 1e-15);
        let unchanged = global_aggregate(&[0.4, 0.6], &[None, None], &previous).unwrap();
        assert_eq!(unchanged, previous);
    }

    fn tiny_experiment() -> Experiment {
        let spec = SyntheticSpec {
            classes: 3,
            train_per_class: 40,
            test_per_class: 10,
            input_dim: 4,
            mean_separation: 0.75,
            noise_std: 0.1,
        };
        let (train, eval) = generate_synthetic(&spec, 11).unwrap();
        let shards = partition(train.labels(), 4, PartitionSpec::Iid, 13).unwrap();
        let devices = (0..4)
            .map(|d| Device {
                id: d,
                cycles_per_weight: 100.0 + 40.0 * d as f64,
                cpu_hz: 1e8,
                distance_m: 1.0 + 0.4 * d as f64,
                channel_gain: 0.0,
                data_count: shards[d].len(),
            })
            .collect();
        Experiment {
            net: NetworkConfig {
                bandwidth_hz: 1e6,
                tx_power_w: 0.1,
                noise: NoiseModel::Total { watts: 1e-3 },
                quant_bits: 32,
                pathloss_ref_db: 0.0,
                pathloss_exponent: 2.0,
                fading: Fading::Off,
            },
            model: ModelSpec {
                input_dim: 4,
                projection_dim: Some(3),
                hidden_dims: vec![6],
                num_classes: 3,
            },
            constants: BoundConstants::default(),
            xi: XiSpec::Auto,
            gain_averaging: GainAveraging::Arithmetic,
            devices,
            train,
            shards,
            eval,
            delta_t: DeltaTSpec::FractionOfSlowest(0.6),
            rounds: 4,
            local_epochs: 1,
            learning_rate: 0.1,
            batch_size: 10,
            seed: 42,
            forced_move: None,
        }
    }

    #[test]
    fn profiling_is_boundary_inclusive_and_caps_tiers() {
        let mut exp = tiny_experiment();
        exp.delta_t = DeltaTSpec::FractionOfSlowest(1.0);
        let assignment = profile_and_assign(&exp, Scheme::TtPrune).unwrap();
        // The slowest device sits exactly on the period boundary and
        // must land in tier 1, not a phantom tier 2.
        assert_eq!(assignment.tier_count, 1);
        assert!(assignment.tier_of_device.iter().all(|&t| t == 1));
    }

    #[test]
    fn fedavg_collapses_to_one_tier() {
        let exp = tiny_experiment();
        let tiered = profile_and_assign(&exp, Scheme::TtPrune).unwrap();
        assert!(tiered.tier_count >= 2, "fixture should spread the devices");
        let flat = profile_and_assign(&exp, Scheme::FedAvg).unwrap();
        assert_eq!(flat.tier_count, 1);
        assert!(flat.tier_of_device.iter().all(|&t| t == 1));
    }

    #[test]
    fn forced_move_shifts_one_device_by_one_tier() {
        let mut exp = tiny_experiment();
        let baseline = profile_and_assign(&exp, Scheme::TtPrune).unwrap();
        let device = 0;
        let original = baseline.tier_of_device[device];
        exp.forced_move = Some(ForcedMove { device, offset: 1 });
        let moved = profile_and_assign(&exp, Scheme::TtPrune).unwrap();
        let expected = (original as i64 + 1).clamp(1, baseline.tier_count as i64) as usize;
        assert_eq!(moved.tier_of_device[device], expected);
        for d in 0..exp.devices.len() {
            if d != device {
                assert_eq!(moved.tier_of_device[d], baseline.tier_of_device[d]);
            }
        }
    }

    #[test]
    fn every_scheme_completes_and_keeps_its_clock() {
        let exp = tiny_experiment();
        for scheme in Scheme::ALL {
            let report = run(&exp, scheme).expect("tiny run");
            assert_eq!(report.rounds.len(), exp.rounds);
            for metrics in &report.rounds {
                assert!(metrics.loss.is_finite());
                assert!((0.0..=1.0).contains(&metrics.accuracy));
                if scheme != Scheme::FedAvg {
                    assert_eq!(metrics.cum_time_s, metrics.round as f64 * report.delta_t_s);
                }
                for tier in &metrics.tiers {
                    assert!(tier.b_star > 0.0 && tier.b_star <= 1.0);
                    assert!((0.0..=1.0).contains(&tier.rho_star));
                    assert!(tier.uplink_bits > 0);
                }
            }
            let last = report.rounds.last().unwrap();
            assert!(last.cum_uplink_bits > 0);
            assert!(report.bound.rhs_total.is_finite());
        }
    }

    #[test]
    fn identical_runs_serialize_identically() {
        let exp = tiny_experiment();
        let a = run(&exp, Scheme::TtPrune).unwrap();
        let b = run(&exp, Scheme::TtPrune).unwrap();
        let mut csv_a = Vec::new();
        let mut csv_b = Vec::new();
        write_metrics_csv(&mut csv_a, Scheme::TtPrune, &a.rounds).unwrap();
        write_metrics_csv(&mut csv_b, Scheme::TtPrune, &b.rounds).unwrap();
        assert_eq!(csv_a, csv_b);
        assert!(csv_a.starts_with(METRICS_CSV_HEADER.as_bytes()));
        assert_eq!(a.final_weights, b.final_weights);
    }

    #[test]
    fn metrics_rows_match_scheduled_tiers() {
        let exp = tiny_experiment();
        let report = run(&exp, Scheme::EqualResource).unwrap();
        assert!(report.tier_count >= 2);
        for metrics in &report.rounds {
            let expected: Vec<usize> = (1..=report.tier_count)
                .filter(|&m| metrics.round.is_multiple_of(m) && report.tier_of_device.contains(&m))
                .collect();
            let got: Vec<usize> = metrics.tiers.iter().map(|t| t.tier).collect();
            assert_eq!(got, expected, "round {}", metrics.round);
            let budget: f64 = metrics.tiers.iter().map(|t| t.b_star).sum();
            assert!(budget <= 1.0 + 1e-12);
        }
    }
}
