//! Randomized invariants over the small deterministic pieces: masks,
//! partitions, staleness weights, snapshots, rates, seeds, and the
//! canonical curvature family.

use proptest::prelude::*;
use std::collections::HashSet;
use ttprune_core::allocator::canonical_term;
use ttprune_core::data::{self, PartitionSpec};
use ttprune_core::fedsim::{
    derive_seed, staleness_weights, SEED_TAG_FADING, SEED_TAG_GEOMETRY, SEED_TAG_INIT,
    SEED_TAG_LOCAL,
};
use ttprune_core::netmodel::{Fading, NetworkConfig, NoiseModel};
use ttprune_core::pruning::{self, LayerLayout};
use ttprune_core::snapshot;

fn noise_models() -> [NoiseModel; 3] {
    [
        NoiseModel::DensityFullBand {
            watts_per_hz: 4e-21,
        },
        NoiseModel::DensityPerAllocation {
            watts_per_hz: 4e-21,
        },
        NoiseModel::Total { watts: 8e-14 },
    ]
}

fn net_with(noise: NoiseModel) -> NetworkConfig {
    NetworkConfig {
        bandwidth_hz: 2e7,
        tx_power_w: 0.63,
        noise,
        quant_bits: 64,
        pathloss_ref_db: 30.0,
        pathloss_exponent: 2.8,
        fading: Fading::Off,
    }
}

proptest! {
    /// Heavier pruning only ever removes more: the pruned set at a
    /// lower ratio is contained in the pruned set at a higher one, and
    /// the counts follow the floor rule exactly.
    #[test]
    fn masks_nest_as_the_ratio_grows(
        scores in prop::collection::vec(-10.0..10.0f64, 1..200),
        split in 0.0..1.0f64,
        r_lo in 0.0..=1.0f64,
        r_hi in 0.0..=1.0f64,
    ) {
        let (r_lo, r_hi) = if r_lo <= r_hi { (r_lo, r_hi) } else { (r_hi, r_lo) };
        let conv = (split * scores.len() as f64) as usize;
        let layout = LayerLayout {
            conv_weight_count: conv,
            fc_weight_count: scores.len() - conv,
        };
        let lo = pruning::build_mask(&scores, &layout, r_lo).unwrap();
        let hi = pruning::build_mask(&scores, &layout, r_hi).unwrap();
        prop_assert_eq!(
            lo.pruned_count(),
            (r_lo * layout.fc_weight_count as f64) as usize
        );
        prop_assert_eq!(lo.kept_count(), pruning::pruned_weight_count(&layout, r_lo));
        for i in 0..scores.len() {
            if i < conv {
                prop_assert!(lo.keep()[i] && hi.keep()[i], "protected weight {i} pruned");
            }
            if !lo.keep()[i] {
                prop_assert!(!hi.keep()[i], "weight {i} pruned at {r_lo} but kept at {r_hi}");
            }
        }
    }

    /// Importance is plain elementwise distance between the two
    /// weight vectors.
    #[test]
    fn importance_is_elementwise_distance(
        pairs in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 0..100),
    ) {
        let before: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let after: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let scores = pruning::importance_scores(&before, &after).unwrap();
        prop_assert_eq!(scores.len(), pairs.len());
        for (score, (b, a)) in scores.iter().zip(&pairs) {
            prop_assert_eq!(score.to_bits(), (a - b).abs().to_bits());
        }
    }

    /// Every row lands on exactly one device, whichever partition is
    /// in force.
    #[test]
    fn partitions_cover_every_row_exactly_once(
        labels in prop::collection::vec(0..6usize, 1..300),
        devices in 1..12usize,
        shards_per_device in 1..4usize,
        skew in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let spec = if skew {
            prop_assume!(labels.len() >= devices * shards_per_device);
            PartitionSpec::LabelSkew { shards_per_device }
        } else {
            prop_assume!(labels.len() >= devices);
            PartitionSpec::Iid
        };
        let shards = data::partition(&labels, devices, spec, seed).unwrap();
        prop_assert_eq!(shards.len(), devices);
        let mut seen = HashSet::new();
        for shard in &shards {
            for &row in shard {
                prop_assert!(row < labels.len(), "row {row} out of range");
                prop_assert!(seen.insert(row), "row {row} dealt twice");
            }
        }
        prop_assert_eq!(seen.len(), labels.len());
    }

    /// The staleness weights match the floor-quotient formula entry by
    /// entry, grow with the tier index (slower tiers report less often,
    /// so each report carries more), and sum to one up to rounding.
    #[test]
    fn staleness_weights_follow_the_floor_quotients(
        round in 1..=1000usize,
        tier_count in 1..=8usize,
    ) {
        let weights = staleness_weights(round, tier_count);
        prop_assert_eq!(weights.len(), tier_count);
        let denominator: usize = (1..=tier_count).map(|j| round / j).sum();
        for (m, &w) in weights.iter().enumerate() {
            let numerator = round / (tier_count - m);
            prop_assert_eq!(w.to_bits(), (numerator as f64 / denominator as f64).to_bits());
            prop_assert!(w >= 0.0);
            if m > 0 {
                prop_assert!(weights[m - 1] <= w, "weights must grow with the tier index");
            }
        }
        let numerators: usize = (1..=tier_count).map(|m| round / (tier_count + 1 - m)).sum();
        prop_assert_eq!(numerators, denominator);
        let sum: f64 = weights.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12, "weights sum to {sum}");
    }

    /// Weight snapshots survive a write/read cycle bit for bit, NaN
    /// payloads included.
    #[test]
    fn weight_snapshots_round_trip_bitwise(
        weights in prop::collection::vec(any::<f64>(), 0..100),
    ) {
        let mut buf = Vec::new();
        snapshot::write_weights(&mut buf, &weights).unwrap();
        let back = snapshot::read_weights(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), weights.len());
        for (a, b) in back.iter().zip(&weights) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    /// Mask snapshots restore both the bits and the recorded ratio.
    #[test]
    fn mask_snapshots_round_trip(
        keep in prop::collection::vec(any::<bool>(), 0..200),
        ratio in 0.0..=1.0f64,
    ) {
        let mask = pruning::PruningMask::from_parts(keep, ratio);
        let mut buf = Vec::new();
        snapshot::write_mask(&mut buf, &mask).unwrap();
        let back = snapshot::read_mask(buf.as_slice()).unwrap();
        prop_assert_eq!(back, mask);
    }

    /// More band or a better channel never slows the uplink, under any
    /// of the noise conventions.
    #[test]
    fn uplink_rate_is_monotone_in_share_and_gain(
        gain_exp in -14.0..-6.0f64,
        f_lo in 0.01..1.0f64,
        f_hi in 0.01..1.0f64,
        gain_factor in 1.0..100.0f64,
    ) {
        let (f_lo, f_hi) = if f_lo <= f_hi { (f_lo, f_hi) } else { (f_hi, f_lo) };
        let gain = 10f64.powf(gain_exp);
        for noise in noise_models() {
            let net = net_with(noise);
            let r_lo = net.uplink_rate(gain, f_lo).unwrap();
            let r_hi = net.uplink_rate(gain, f_hi).unwrap();
            prop_assert!(r_lo <= r_hi * (1.0 + 1e-12), "share {f_lo}->{f_hi} lost rate");
            let r_better = net.uplink_rate(gain * gain_factor, f_lo).unwrap();
            prop_assert!(r_lo <= r_better * (1.0 + 1e-12), "gain x{gain_factor} lost rate");
        }
    }

    /// The canonical fractional family is convex on the share range
    /// the solver sweeps: second differences never dip below noise.
    #[test]
    fn canonical_family_has_nonnegative_curvature(
        v0 in 0.0..10.0f64,
        v1 in 0.0..10.0f64,
        v2 in 0.0..10.0f64,
        v3 in 0.0..10.0f64,
    ) {
        prop_assume!(v2 + v3 >= 0.5);
        let v = [v0, v1, v2, v3];
        const GRID: usize = 101;
        let lo = 1e-2;
        let step = (1.0 - lo) / (GRID - 1) as f64;
        for i in 1..GRID - 1 {
            let x = lo + i as f64 * step;
            let second = canonical_term(v, x - step) - 2.0 * canonical_term(v, x)
                + canonical_term(v, x + step);
            prop_assert!(second >= -1e-9, "dip of {second} at x = {x}");
        }
    }

    /// Seed derivation is a pure function, and the tag keeps the four
    /// stream families apart even on identical counters.
    #[test]
    fn derived_seeds_are_stable_and_tag_separated(
        master in any::<u64>(),
        a in any::<u64>(),
        b in any::<u64>(),
    ) {
        let tags = [SEED_TAG_INIT, SEED_TAG_FADING, SEED_TAG_LOCAL, SEED_TAG_GEOMETRY];
        let mut seen = HashSet::new();
        for tag in tags {
            let seed = derive_seed(master, tag, a, b);
            prop_assert_eq!(seed, derive_seed(master, tag, a, b));
            prop_assert!(seen.insert(seed), "tag collision on {tag}");
        }
    }
}
