//! Shared fixtures for the integration suites: a seeded generator of
//! allocator instances at deployed-cell scale, reference routines that
//! re-derive each closed form by a route the production code never
//! takes (bisection on the deadline predicate, root search on the
//! stationarity condition, exhaustive search over the budget face), and
//! the ready-made experiments the behavioral suites run.

#![allow(dead_code)]

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use ttprune_core::allocator::{self, AllocError, SolveContext, TierProfile};
use ttprune_core::bound::BoundConstants;
use ttprune_core::data::{generate_synthetic, partition, PartitionSpec, SyntheticSpec};
use ttprune_core::fedsim::{
    derive_seed, DeltaTSpec, Experiment, ForcedMove, GainAveraging, XiSpec, SEED_TAG_GEOMETRY,
};
use ttprune_core::netmodel::{Device, Fading, NetworkConfig, NoiseModel};
use ttprune_core::nn::ModelSpec;
use ttprune_core::pruning::LayerLayout;

/// One solvable allocation problem: the cell, the analysis constants,
/// and the participating tiers, with the aggregation period already
/// sized so the whole thing is feasible.
pub struct Instance {
    pub net: NetworkConfig,
    pub consts: BoundConstants,
    pub tiers: Vec<TierProfile>,
    pub delta_t: f64,
    pub local_epochs: f64,
}

impl Instance {
    pub fn ctx(&self) -> SolveContext<'_> {
        SolveContext {
            net: &self.net,
            consts: &self.consts,
            delta_t: self.delta_t,
            local_epochs: self.local_epochs,
            total_tiers: self.tiers.len(),
        }
    }

    /// Deadline of the tier at position `t`, in seconds.
    pub fn budget_s(&self, t: usize) -> f64 {
        self.tiers[t].tier as f64 * self.delta_t
    }

    /// Rate of tier `t` on the whole band; the share-independent noise
    /// models used here make the rate at share `b` exactly `b` times
    /// this.
    pub fn full_band_rate(&self, t: usize) -> f64 {
        self.net
            .uplink_rate(self.tiers[t].channel_gain, 1.0)
            .expect("full band is a valid share")
    }
}

/// Draws a feasible instance with `tier_count` participating tiers.
///
/// Device constants sit at the scale of the modeled cell: a 20 MHz
/// band, 28 dBm uplinks, devices hundreds of meters out, around a
/// thousand cycles per weight on single-digit-GHz CPUs. The aggregation
/// period starts near the median unpruned tier load (scaled by a random
/// tightness factor, so budgets bind on some instances and stay slack
/// on others) and is stretched until the solver accepts the instance.
pub fn random_instance(rng: &mut ChaCha8Rng, tier_count: usize) -> Instance {
    assert!((1..=3).contains(&tier_count), "generator covers 1-3 tiers");
    let net = NetworkConfig {
        bandwidth_hz: 2e7,
        tx_power_w: 10f64.powf((28.0 - 30.0) / 10.0),
        noise: NoiseModel::DensityFullBand {
            watts_per_hz: 4e-21,
        },
        quant_bits: *[32u32, 64].choose(rng).expect("non-empty"),
        pathloss_ref_db: 30.0,
        pathloss_exponent: 2.8,
        fading: Fading::Off,
    };
    let consts = BoundConstants {
        noise_scale: rng.random_range(0.5..2.0),
        ..BoundConstants::default()
    };
    let local_epochs = f64::from(rng.random_range(1..=2u32));
    // One model shared by every tier. The protected segment occasionally
    // vanishes (purely prunable models exercise the short-circuit
    // paths); the prunable one never does.
    let layout = LayerLayout {
        conv_weight_count: if rng.random_bool(0.15) {
            0
        } else {
            rng.random_range(100..=1500)
        },
        fc_weight_count: rng.random_range(600..=20_000),
    };

    let mut tiers: Vec<TierProfile> = (0..tier_count)
        .map(|_| {
            let users = rng.random_range(2..=12usize);
            TierProfile {
                tier: 0, // assigned after sorting by speed
                users,
                data_count: users * rng.random_range(50..=600usize),
                cycles_per_weight: rng.random_range(800.0..1200.0),
                cpu_hz: rng.random_range(1.5e9..5e9),
                channel_gain: net.path_gain(rng.random_range(60.0..300.0)),
                layout,
            }
        })
        .collect();

    // Per-weight round time at an equal share, the quantity tier
    // membership sorts by in the real pipeline: fast tiers get the
    // short deadlines.
    let unit_time = |t: &TierProfile| {
        let rate = net.uplink_rate(t.channel_gain, 1.0).expect("valid share") / tier_count as f64;
        local_epochs * t.cycles_per_weight / t.cpu_hz + f64::from(net.quant_bits) / rate
    };
    tiers.sort_by(|a, b| unit_time(a).total_cmp(&unit_time(b)));
    for (i, tier) in tiers.iter_mut().enumerate() {
        tier.tier = i + 1;
    }

    // Seed the period at the median per-deadline load and stretch until
    // the solver accepts; the tightness factor decides how often the
    // budget binds.
    let mut loads: Vec<f64> = tiers
        .iter()
        .map(|t| layout.total() as f64 * unit_time(t) / t.tier as f64)
        .collect();
    loads.sort_by(f64::total_cmp);
    let tightness = rng.random_range(0.55..1.3);
    let mut delta_t = loads[loads.len() / 2] * tightness;
    for _ in 0..60 {
        let candidate = Instance {
            net: net.clone(),
            consts: consts.clone(),
            tiers: tiers.clone(),
            delta_t,
            local_epochs,
        };
        match allocator::solve_lambda(&candidate.tiers, &candidate.ctx()) {
            Ok(_) => return candidate,
            Err(AllocError::TierInfeasible { .. } | AllocError::BudgetInfeasible { .. }) => {
                delta_t *= 1.35;
            }
            Err(e) => panic!("generator built an invalid instance: {e}"),
        }
    }
    unreachable!("stretching the period always reaches feasibility");
}

/// A share at which tier `t` is feasible, biased toward the low end
/// where the ratio formula actually bites.
pub fn random_feasible_share(rng: &mut ChaCha8Rng, inst: &Instance, t: usize) -> f64 {
    for _ in 0..60 {
        let share = rng.random_range(0.02..=1.0f64);
        if allocator::min_pruning_ratio(&inst.tiers[t], &inst.ctx(), share).is_ok() {
            return share;
        }
    }
    1.0
}

/// The textbook ratio curve of one tier: per-weight times separated
/// into compute and full-band upload, evaluated directly from the
/// deadline split rather than through the library's inversion.
pub struct RatioCurve {
    pub budget_s: f64,
    pub compute_per_weight_s: f64,
    /// Upload seconds per weight on the whole band.
    pub upload_per_weight_s: f64,
    pub conv: f64,
    pub fc: f64,
}

impl RatioCurve {
    pub fn new(inst: &Instance, t: usize) -> RatioCurve {
        let tier = &inst.tiers[t];
        RatioCurve {
            budget_s: inst.budget_s(t),
            compute_per_weight_s: inst.local_epochs * tier.cycles_per_weight / tier.cpu_hz,
            upload_per_weight_s: f64::from(inst.net.quant_bits) / inst.full_band_rate(t),
            conv: tier.layout.conv_weight_count as f64,
            fc: tier.layout.fc_weight_count as f64,
        }
    }

    /// Per-weight time at share `b`.
    pub fn unit(&self, b: f64) -> f64 {
        self.compute_per_weight_s + self.upload_per_weight_s / b
    }

    /// Minimum ratio at share `b`: the deadline pays for the protected
    /// weights first and whatever remains buys back prunable ones.
    /// `None` when the protected weights alone overrun.
    pub fn min_ratio(&self, b: f64) -> Option<f64> {
        let unit = self.unit(b);
        if self.conv * unit > self.budget_s * (1.0 + 1e-9) {
            return None;
        }
        if self.fc == 0.0 {
            return Some(0.0);
        }
        Some((1.0 - (self.budget_s - self.conv * unit) / (unit * self.fc)).clamp(0.0, 1.0))
    }

    /// The same curve without the clamps — what the optimizer
    /// differentiates.
    pub fn raw_ratio(&self, b: f64) -> f64 {
        let unit = self.unit(b);
        1.0 - (self.budget_s - self.conv * unit) / (unit * self.fc)
    }
}

/// Squared user-to-data ratio of tier `t`, the per-tier penalty weight.
pub fn penalty_weight(inst: &Instance, t: usize) -> f64 {
    let tier = &inst.tiers[t];
    let r = tier.users as f64 / tier.data_count as f64;
    r * r
}

/// Reference minimum ratio by bisection on the deadline predicate:
/// the smallest ratio whose round fits the tier budget, found without
/// ever inverting the latency model. `None` when even a fully pruned
/// model misses.
pub fn bisect_min_ratio(inst: &Instance, t: usize, share: f64) -> Option<f64> {
    let tier = &inst.tiers[t];
    let device = Device {
        id: 0,
        cycles_per_weight: tier.cycles_per_weight,
        cpu_hz: tier.cpu_hz,
        distance_m: 1.0,
        channel_gain: tier.channel_gain,
        data_count: tier.data_count,
    };
    let budget = inst.budget_s(t);
    let fits = |rho: f64| {
        let surviving =
            tier.layout.conv_weight_count as f64 + (1.0 - rho) * tier.layout.fc_weight_count as f64;
        inst.net
            .round_latency(&device, surviving, inst.local_epochs, share)
            .expect("positive share")
            .total_s()
            <= budget
    };
    if fits(0.0) {
        return Some(0.0);
    }
    if !fits(1.0) {
        return None;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if fits(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Reference unprojected share at a fixed multiplier: 1-D root search
/// on the stationarity condition "marginal penalty saving equals the
/// multiplier", with the ratio slope taken by central differences so no
/// closed form is reused. `None` when the bracket holds no crossing.
pub fn root_search_share(inst: &Instance, t: usize, multiplier: f64) -> Option<f64> {
    let curve = RatioCurve::new(inst, t);
    if curve.fc == 0.0 {
        return None;
    }
    let scale = inst.consts.objective_prefactor(inst.tiers.len()) * penalty_weight(inst, t);
    let balance = |b: f64| {
        let h = b * 1e-6;
        let slope = (curve.raw_ratio(b + h) - curve.raw_ratio(b - h)) / (2.0 * h);
        scale * slope + multiplier
    };
    // The saving per share shrinks as the share grows, so the balance
    // crosses zero from below exactly once.
    let (mut lo, mut hi) = (1e-9f64, 1e6f64);
    if balance(lo) >= 0.0 || balance(hi) <= 0.0 {
        return None;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if balance(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some((lo * hi).sqrt())
}

/// Exhaustive minimization of the round penalty over the exact-budget
/// face (shares summing to 1, `steps` divisions per axis), ratios from
/// the textbook curve at each point. The penalty never increases when
/// any share grows, so this face contains an optimum of the whole
/// simplex. `None` when every grid point is infeasible.
pub fn face_grid_min(inst: &Instance, steps: usize) -> Option<f64> {
    let prefactor = inst.consts.objective_prefactor(inst.tiers.len());
    // tables[t][i]: weighted ratio of tier t at share i/steps, infinite
    // where the tier cannot meet its deadline.
    let tables: Vec<Vec<f64>> = (0..inst.tiers.len())
        .map(|t| {
            let curve = RatioCurve::new(inst, t);
            let weight = penalty_weight(inst, t);
            (0..=steps)
                .map(|i| {
                    if i == 0 {
                        f64::INFINITY
                    } else {
                        match curve.min_ratio(i as f64 / steps as f64) {
                            Some(r) => weight * r,
                            None => f64::INFINITY,
                        }
                    }
                })
                .collect()
        })
        .collect();
    let mut best = f64::INFINITY;
    match tables.len() {
        1 => best = tables[0][steps],
        2 => {
            for i in 1..steps {
                best = best.min(tables[0][i] + tables[1][steps - i]);
            }
        }
        3 => {
            for i in 1..=steps - 2 {
                for j in 1..steps - i {
                    let v = tables[0][i] + tables[1][j] + tables[2][steps - i - j];
                    if v < best {
                        best = v;
                    }
                }
            }
        }
        n => panic!("face search covers up to 3 tiers, got {n}"),
    }
    best.is_finite().then_some(prefactor * best)
}

/// Accuracy the benchmark schemes race toward.
pub const BENCH_TARGET_ACCURACY: f64 = 0.78;

/// The desk-scale benchmark: twenty devices in two clusters (sixteen
/// strong ones profiling just inside the first deadline, four weaker
/// stragglers defining the second), a 356-weight classifier on four
/// synthetic classes, Rayleigh fading, and an aggregation period at 0.7
/// of the slowest profiled round so the fleet splits into two tiers.
/// Mirrors the CLI's built-in experiment, constants and draw order
/// alike.
pub fn benchmark_experiment(seed: u64, forced_move: Option<ForcedMove>) -> Experiment {
    let net = NetworkConfig {
        bandwidth_hz: 2e7,
        tx_power_w: 10f64.powf((28.0 - 30.0) / 10.0),
        noise: NoiseModel::DensityFullBand {
            watts_per_hz: 3e-17,
        },
        quant_bits: 64,
        pathloss_ref_db: 30.0,
        pathloss_exponent: 2.8,
        fading: Fading::Rayleigh,
    };
    let model = ModelSpec {
        input_dim: 16,
        projection_dim: Some(4),
        hidden_dims: vec![32],
        num_classes: 4,
    };
    let (train, eval) = generate_synthetic(
        &SyntheticSpec {
            classes: 4,
            train_per_class: 600,
            test_per_class: 400,
            input_dim: 16,
            mean_separation: 1.3,
            noise_std: 0.12,
        },
        derive_seed(seed, SEED_TAG_GEOMETRY, 0, 0),
    )
    .expect("benchmark dataset fits its box");

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_TAG_GEOMETRY, 1, 0));
    let clusters = [
        (16, [850.0, 1000.0], [4.2e9, 5.0e9], [220.0, 227.0]),
        (4, [1000.0, 1200.0], [1.6e9, 2.2e9], [258.0, 266.0]),
    ];
    let mut devices = Vec::new();
    for (count, cycles, cpu, distance) in clusters {
        for _ in 0..count {
            devices.push(Device {
                id: devices.len(),
                cycles_per_weight: rng.random_range(cycles[0]..cycles[1]),
                cpu_hz: rng.random_range(cpu[0]..cpu[1]),
                distance_m: rng.random_range(distance[0]..distance[1]),
                channel_gain: 0.0,
                data_count: 0,
            });
        }
    }
    let shards = partition(
        train.labels(),
        devices.len(),
        PartitionSpec::Iid,
        derive_seed(seed, SEED_TAG_GEOMETRY, 2, 0),
    )
    .expect("IID split always succeeds");
    for (device, shard) in devices.iter_mut().zip(&shards) {
        device.data_count = shard.len();
    }

    Experiment {
        net,
        model,
        constants: BoundConstants::default(),
        xi: XiSpec::Auto,
        gain_averaging: GainAveraging::Arithmetic,
        devices,
        train,
        shards,
        eval,
        delta_t: DeltaTSpec::FractionOfSlowest(0.7),
        rounds: 240,
        local_epochs: 1,
        learning_rate: 0.05,
        batch_size: 32,
        seed,
        forced_move,
    }
}

/// A four-device miniature that runs in milliseconds: two tiers, no
/// fading, a model small enough to train through in every behavioral
/// test.
pub fn small_experiment(seed: u64) -> Experiment {
    let net = NetworkConfig {
        bandwidth_hz: 2e7,
        tx_power_w: 10f64.powf((28.0 - 30.0) / 10.0),
        noise: NoiseModel::DensityFullBand {
            watts_per_hz: 4e-21,
        },
        quant_bits: 64,
        pathloss_ref_db: 30.0,
        pathloss_exponent: 2.8,
        fading: Fading::Off,
    };
    let model = ModelSpec {
        input_dim: 4,
        projection_dim: Some(3),
        hidden_dims: vec![6],
        num_classes: 3,
    };
    let (train, eval) = generate_synthetic(
        &SyntheticSpec {
            classes: 3,
            train_per_class: 60,
            test_per_class: 30,
            input_dim: 4,
            mean_separation: 0.75,
            noise_std: 0.1,
        },
        derive_seed(seed, SEED_TAG_GEOMETRY, 0, 0),
    )
    .expect("miniature dataset fits its box");
    let spec = |id: usize, cycles: f64, cpu: f64, distance: f64| Device {
        id,
        cycles_per_weight: cycles,
        cpu_hz: cpu,
        distance_m: distance,
        channel_gain: 0.0,
        data_count: 0,
    };
    let mut devices = vec![
        spec(0, 900.0, 4.5e9, 80.0),
        spec(1, 950.0, 4.0e9, 95.0),
        spec(2, 1100.0, 1.8e9, 250.0),
        spec(3, 1150.0, 1.7e9, 270.0),
    ];
    let shards = partition(
        train.labels(),
        devices.len(),
        PartitionSpec::Iid,
        derive_seed(seed, SEED_TAG_GEOMETRY, 2, 0),
    )
    .expect("IID split always succeeds");
    for (device, shard) in devices.iter_mut().zip(&shards) {
        device.data_count = shard.len();
    }
    Experiment {
        net,
        model,
        constants: BoundConstants::default(),
        xi: XiSpec::Auto,
        gain_averaging: GainAveraging::Arithmetic,
        devices,
        train,
        shards,
        eval,
        delta_t: DeltaTSpec::FractionOfSlowest(0.6),
        rounds: 6,
        local_epochs: 1,
        learning_rate: 0.1,
        batch_size: 10,
        seed,
        forced_move: None,
    }
}
