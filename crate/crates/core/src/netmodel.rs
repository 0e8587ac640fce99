//! Wireless uplink and device-compute timing model.
//!
//! One training round costs a device two things: local compute, at a
//! per-weight cycle cost over the weights that survived pruning, and the
//! uplink transfer of those weights, quantized to a fixed number of bits
//! each, over a Shannon-capacity channel on the device's share of the
//! band. A device in tier `m` must land both within `m` deadline periods.
//!
//! # Example
//!
//! ```
//! use ttprune_core::netmodel::{Fading, NetworkConfig, NoiseModel};
//!
//! let net = NetworkConfig {
//!     bandwidth_hz: 20e6,
//!     tx_power_w: 1.0,
//!     noise: NoiseModel::Total { watts: 1.0 },
//!     quant_bits: 64,
//!     pathloss_ref_db: 0.0,
//!     pathloss_exponent: 3.76,
//!     fading: Fading::Off,
//! };
//! // Unit SNR on the full band: exactly one bit per second per hertz.
//! let rate = net.uplink_rate(1.0, 1.0).unwrap();
//! assert_eq!(rate, 20e6, "log2(2) = 1, so rate = B");
//! ```

use thiserror::Error;

/// Relative slack used whenever a latency is checked against a deadline,
/// so that decisions sitting exactly on the boundary pass despite
/// floating-point noise.
pub const DEADLINE_REL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetModelError {
    #[error("bandwidth fraction {0} outside [0, 1]")]
    BadBandwidthFraction(f64),
    #[error("zero uplink rate: transmission infeasible on an empty share")]
    ZeroBandwidth,
}

/// How the noise power entering the SNR is derived.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    /// `density * total bandwidth`: a fixed noise floor independent of
    /// the allocated share, which keeps the rate linear in the share.
    /// The closed-form allocator relies on that linearity. The default.
    DensityFullBand { watts_per_hz: f64 },
    /// `density * allocated bandwidth`: noise scales with the share.
    /// For sensitivity studies of the rate model only; the allocator
    /// rejects it.
    DensityPerAllocation { watts_per_hz: f64 },
    /// A fixed total noise power in watts.
    Total { watts: f64 },
}

impl NoiseModel {
    /// Noise power in watts seen by a transmission on `fraction` of a
    /// band of `total_bandwidth_hz`.
    pub fn power(&self, total_bandwidth_hz: f64, fraction: f64) -> f64 {
        match *self {
            NoiseModel::DensityFullBand { watts_per_hz } => watts_per_hz * total_bandwidth_hz,
            NoiseModel::DensityPerAllocation { watts_per_hz } => {
                watts_per_hz * total_bandwidth_hz * fraction
            }
            NoiseModel::Total { watts } => watts,
        }
    }

    /// Noise power when it does not depend on the allocated share, which
    /// is the assumption behind the closed-form allocator. `None` for
    /// the per-allocation mode, which breaks it.
    pub fn share_independent_power(&self, total_bandwidth_hz: f64) -> Option<f64> {
        match *self {
            NoiseModel::DensityFullBand { watts_per_hz } => Some(watts_per_hz * total_bandwidth_hz),
            NoiseModel::DensityPerAllocation { .. } => None,
            NoiseModel::Total { watts } => Some(watts),
        }
    }
}

/// Small-scale fading applied on top of the deterministic path loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fading {
    Off,
    /// Rayleigh block fading: the power gain is multiplied by a
    /// unit-mean exponential draw, redrawn once per global round.
    Rayleigh,
}

/// Uplink cell parameters shared by every device.
#[derive(Debug, Clone)]
pub struct NetworkConfig {
    /// Total uplink bandwidth in Hz.
    pub bandwidth_hz: f64,
    /// Per-device transmit power in watts.
    pub tx_power_w: f64,
    pub noise: NoiseModel,
    /// Bits per uploaded weight after quantization.
    pub quant_bits: u32,
    /// Path attenuation at 1 m, in dB.
    pub pathloss_ref_db: f64,
    pub pathloss_exponent: f64,
    pub fading: Fading,
}

/// One participant of the federation.
#[derive(Debug, Clone)]
pub struct Device {
    pub id: usize,
    /// CPU cycles to process one weight for one local epoch.
    pub cycles_per_weight: f64,
    /// CPU frequency in Hz.
    pub cpu_hz: f64,
    pub distance_m: f64,
    /// Current linear channel power gain; resampled each round when
    /// fading is on.
    pub channel_gain: f64,
    /// Number of local training samples.
    pub data_count: usize,
}

/// Compute and uplink shares of one round's latency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyBreakdown {
    pub compute_s: f64,
    pub uplink_s: f64,
}

impl LatencyBreakdown {
    /// Downlink broadcast time is not modeled, so the round total is the
    /// sum of the two uplink-side terms.
    pub fn total_s(&self) -> f64 {
        self.compute_s + self.uplink_s
    }
}

impl NetworkConfig {
    /// Deterministic path-loss power gain at `distance_m` meters.
    ///
    /// `gain = 10^(-ref/10) * d^(-exponent)`, so a device at 1 m with a
    /// 0 dB reference sees gain 1.
    pub fn path_gain(&self, distance_m: f64) -> f64 {
        10f64.powf(-self.pathloss_ref_db / 10.0) * distance_m.powf(-self.pathloss_exponent)
    }

    /// Channel power gain for one round: path loss, times a seeded
    /// unit-mean exponential draw when Rayleigh fading is on. The same
    /// seed always reproduces the same draw.
    pub fn channel_gain(&self, distance_m: f64, seed: u64) -> f64 {
        use rand::{Rng, SeedableRng};
        let base = self.path_gain(distance_m);
        match self.fading {
            Fading::Off => base,
            Fading::Rayleigh => {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let u: f64 = rng.random();
                // Inverse-CDF exponential with unit mean; u < 1 always.
                base * -(1.0 - u).ln()
            }
        }
    }

    /// Achievable uplink rate in bits/s on `fraction` of the band.
    ///
    /// Returns 0 for an empty share.
    ///
    /// # Errors
    ///
    /// Rejects fractions outside `[0, 1]`.
    pub fn uplink_rate(&self, channel_gain: f64, fraction: f64) -> Result<f64, NetModelError> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(NetModelError::BadBandwidthFraction(fraction));
        }
        if fraction == 0.0 {
            return Ok(0.0);
        }
        let sigma2 = self.noise.power(self.bandwidth_hz, fraction);
        let snr = self.tx_power_w * channel_gain / sigma2;
        Ok(fraction * self.bandwidth_hz * (1.0 + snr).log2())
    }

    /// Latency of one local round for `device`: `epochs * weights *
    /// cycles / f` of compute plus the quantized upload of `weight_count`
    /// weights at the share's uplink rate.
    ///
    /// `weight_count` may be fractional; the allocator works on the
    /// continuous relaxation of the surviving-weight count and the
    /// simulator passes exact integer counts.
    ///
    /// # Errors
    ///
    /// Propagates share validation, and signals an infeasible
    /// transmission when the share (and therefore the rate) is zero.
    pub fn round_latency(
        &self,
        device: &Device,
        weight_count: f64,
        local_epochs: f64,
        fraction: f64,
    ) -> Result<LatencyBreakdown, NetModelError> {
        let rate = self.uplink_rate(device.channel_gain, fraction)?;
        if rate <= 0.0 {
            return Err(NetModelError::ZeroBandwidth);
        }
        let compute_s = local_epochs * weight_count * device.cycles_per_weight / device.cpu_hz;
        let uplink_s = f64::from(self.quant_bits) * weight_count / rate;
        Ok(LatencyBreakdown {
            compute_s,
            uplink_s,
        })
    }
}

/// Whether a round fits tier `tier`'s deadline of `tier * delta_t`
/// seconds, with [`DEADLINE_REL_TOL`] relative slack.
pub fn meets_deadline(latency: &LatencyBreakdown, tier: usize, delta_t: f64) -> bool {
    let budget = tier as f64 * delta_t;
    latency.total_s() <= budget * (1.0 + DEADLINE_REL_TOL)
}
