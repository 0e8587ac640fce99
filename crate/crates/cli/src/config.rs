//! TOML experiment configuration.
//!
//! Every section and field is optional: an empty file (or no file)
//! yields the built-in desk-scale experiment, and a config only needs
//! to name what it changes. Unknown keys are rejected so typos fail
//! loudly instead of silently running the defaults.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use ttprune_core::bound::BoundConstants;
use ttprune_core::data::{generate_synthetic, partition, PartitionSpec, SyntheticSpec};
use ttprune_core::fedsim::{
    derive_seed, DeltaTSpec, Experiment, ForcedMove, GainAveraging, XiSpec, SEED_TAG_GEOMETRY,
};
use ttprune_core::netmodel::{Device, Fading, NetworkConfig, NoiseModel};
use ttprune_core::nn::ModelSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("bad config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    network: NetworkSection,
    devices: DevicesSection,
    model: ModelSection,
    data: DataSection,
    train: TrainSection,
    bound: BoundSection,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<ConfigFile, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(toml::from_str(&text)?)
    }

    /// The config's own seed; the command line may override it.
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn target_accuracy(&self) -> f64 {
        self.train.target_accuracy
    }

    /// Materializes the experiment: generates the dataset, the device
    /// fleet, and the shards, everything pinned by `seed`.
    pub fn build_experiment(
        &self,
        seed: u64,
        forced_move: Option<ForcedMove>,
    ) -> Result<Experiment, ConfigError> {
        let net = self.network.build()?;
        let model = self.model.build()?;
        let (train, eval) = generate_synthetic(
            &self.data.synthetic_spec(&model),
            derive_seed(seed, SEED_TAG_GEOMETRY, 0, 0),
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut devices = self.devices.build(seed)?;
        let shards = partition(
            train.labels(),
            devices.len(),
            self.data.partition_spec()?,
            derive_seed(seed, SEED_TAG_GEOMETRY, 2, 0),
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (device, shard) in devices.iter_mut().zip(&shards) {
            device.data_count = shard.len();
        }
        Ok(Experiment {
            net,
            model,
            constants: self.bound.constants(),
            xi: self.bound.xi_spec()?,
            gain_averaging: self.network.gain_averaging(),
            devices,
            train,
            shards,
            eval,
            delta_t: self.train.delta_t_spec()?,
            rounds: self.train.rounds,
            local_epochs: self.train.local_epochs,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            seed,
            forced_move,
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct NetworkSection {
    bandwidth_hz: f64,
    tx_power_dbm: f64,
    noise: NoiseSection,
    quant_bits: u32,
    pathloss_ref_db: f64,
    pathloss_exponent: f64,
    fading: FadingField,
    gain_averaging: GainField,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            bandwidth_hz: 2e7,
            tx_power_dbm: 28.0,
            noise: NoiseSection::DensityFullBand {
                watts_per_hz: 3e-17,
            },
            quant_bits: 64,
            pathloss_ref_db: 30.0,
            pathloss_exponent: 2.8,
            fading: FadingField::Rayleigh,
            gain_averaging: GainField::Arithmetic,
        }
    }
}

impl NetworkSection {
    fn build(&self) -> Result<NetworkConfig, ConfigError> {
        if !(self.bandwidth_hz > 0.0) {
            return invalid(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth_hz
            ));
        }
        Ok(NetworkConfig {
            bandwidth_hz: self.bandwidth_hz,
            tx_power_w: 10f64.powf((self.tx_power_dbm - 30.0) / 10.0),
            noise: match self.noise {
                NoiseSection::DensityFullBand { watts_per_hz } => {
                    NoiseModel::DensityFullBand { watts_per_hz }
                }
                NoiseSection::DensityPerAllocation { watts_per_hz } => {
                    NoiseModel::DensityPerAllocation { watts_per_hz }
                }
                NoiseSection::Total { watts } => NoiseModel::Total { watts },
            },
            quant_bits: self.quant_bits,
            pathloss_ref_db: self.pathloss_ref_db,
            pathloss_exponent: self.pathloss_exponent,
            fading: match self.fading {
                FadingField::Off => Fading::Off,
                FadingField::Rayleigh => Fading::Rayleigh,
            },
        })
    }

    fn gain_averaging(&self) -> GainAveraging {
        match self.gain_averaging {
            GainField::Arithmetic => GainAveraging::Arithmetic,
            GainField::Geometric => GainAveraging::Geometric,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case", deny_unknown_fields)]
enum NoiseSection {
    DensityFullBand { watts_per_hz: f64 },
    DensityPerAllocation { watts_per_hz: f64 },
    Total { watts: f64 },
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum FadingField {
    Off,
    Rayleigh,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum GainField {
    Arithmetic,
    Geometric,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DevicesSection {
    /// Generated fleet: each cluster draws `count` devices uniformly
    /// from its ranges.
    clusters: Option<Vec<ClusterSection>>,
    /// Explicit fleet, mutually exclusive with `clusters`.
    list: Option<Vec<DeviceSection>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterSection {
    count: usize,
    cycles_per_weight: [f64; 2],
    cpu_hz: [f64; 2],
    distance_m: [f64; 2],
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceSection {
    cycles_per_weight: f64,
    cpu_hz: f64,
    distance_m: f64,
}

/// The built-in fleet: sixteen strong devices whose profiled rounds sit
/// just inside the first deadline and four weaker stragglers defining
/// the second, so profiling yields two tiers that both feel their
/// budgets once fading starts moving the rates around.
fn default_clusters() -> Vec<ClusterSection> {
    vec![
        ClusterSection {
            count: 16,
            cycles_per_weight: [850.0, 1000.0],
            cpu_hz: [4.2e9, 5.0e9],
            distance_m: [220.0, 227.0],
        },
        ClusterSection {
            count: 4,
            cycles_per_weight: [1000.0, 1200.0],
            cpu_hz: [1.6e9, 2.2e9],
            distance_m: [258.0, 266.0],
        },
    ]
}

impl DevicesSection {
    fn build(&self, seed: u64) -> Result<Vec<Device>, ConfigError> {
        let blank = |id: usize| Device {
            id,
            cycles_per_weight: 0.0,
            cpu_hz: 0.0,
            distance_m: 0.0,
            channel_gain: 0.0,
            data_count: 0,
        };
        match (&self.clusters, &self.list) {
            (Some(_), Some(_)) => invalid("give device clusters or an explicit list, not both"),
            (None, Some(list)) => {
                if list.is_empty() {
                    return invalid("explicit device list is empty");
                }
                Ok(list
                    .iter()
                    .enumerate()
                    .map(|(id, d)| Device {
                        cycles_per_weight: d.cycles_per_weight,
                        cpu_hz: d.cpu_hz,
                        distance_m: d.distance_m,
                        ..blank(id)
                    })
                    .collect())
            }
            (clusters, None) => {
                let clusters = clusters.clone().unwrap_or_else(default_clusters);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_TAG_GEOMETRY, 1, 0));
                let mut devices = Vec::new();
                for cluster in &clusters {
                    if cluster.count == 0 {
                        return invalid("cluster with zero devices");
                    }
                    for range in [
                        cluster.cycles_per_weight,
                        cluster.cpu_hz,
                        cluster.distance_m,
                    ] {
                        if !(range[0] > 0.0 && range[1] >= range[0]) {
                            return invalid(format!(
                                "cluster range [{}, {}] must be positive and ordered",
                                range[0], range[1]
                            ));
                        }
                    }
                    for _ in 0..cluster.count {
                        let draw = |rng: &mut ChaCha8Rng, r: [f64; 2]| {
                            if r[0] == r[1] {
                                r[0]
                            } else {
                                rng.random_range(r[0]..r[1])
                            }
                        };
                        let id = devices.len();
                        devices.push(Device {
                            cycles_per_weight: draw(&mut rng, cluster.cycles_per_weight),
                            cpu_hz: draw(&mut rng, cluster.cpu_hz),
                            distance_m: draw(&mut rng, cluster.distance_m),
                            ..blank(id)
                        });
                    }
                }
                if devices.is_empty() {
                    return invalid("no device clusters given");
                }
                Ok(devices)
            }
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelSection {
    input_dim: usize,
    /// Width of the frozen random feature projection; 0 disables it.
    projection_dim: usize,
    hidden_dims: Vec<usize>,
    num_classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            input_dim: 16,
            projection_dim: 4,
            hidden_dims: vec![32],
            num_classes: 4,
        }
    }
}

impl ModelSection {
    fn build(&self) -> Result<ModelSpec, ConfigError> {
        let spec = ModelSpec {
            input_dim: self.input_dim,
            projection_dim: (self.projection_dim != 0).then_some(self.projection_dim),
            hidden_dims: self.hidden_dims.clone(),
            num_classes: self.num_classes,
        };
        spec.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DataSection {
    train_per_class: usize,
    test_per_class: usize,
    mean_separation: f64,
    noise_std: f64,
    partition: PartitionField,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_per_class: 600,
            test_per_class: 400,
            mean_separation: 1.3,
            noise_std: 0.12,
            partition: PartitionField::Named("iid".into()),
        }
    }
}

impl DataSection {
    fn synthetic_spec(&self, model: &ModelSpec) -> SyntheticSpec {
        SyntheticSpec {
            classes: model.num_classes,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            input_dim: model.input_dim,
            mean_separation: self.mean_separation,
            noise_std: self.noise_std,
        }
    }

    fn partition_spec(&self) -> Result<PartitionSpec, ConfigError> {
        match &self.partition {
            PartitionField::Named(name) if name == "iid" => Ok(PartitionSpec::Iid),
            PartitionField::Named(name) => invalid(format!(
                "unknown partition {name:?}; expected \"iid\" or {{ shards_per_device = N }}"
            )),
            PartitionField::Skew { shards_per_device } => Ok(PartitionSpec::LabelSkew {
                shards_per_device: *shards_per_device,
            }),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum PartitionField {
    Named(String),
    Skew { shards_per_device: usize },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    rounds: usize,
    local_epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    /// Seconds, or a string like `"0.7T"` for a fraction of the
    /// slowest device's profiled round time.
    delta_t: DeltaTField,
    seed: u64,
    target_accuracy: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            rounds: 240,
            local_epochs: 1,
            learning_rate: 0.05,
            batch_size: 32,
            delta_t: DeltaTField::Text("0.7T".into()),
            seed: 17,
            target_accuracy: 0.78,
        }
    }
}

impl TrainSection {
    fn delta_t_spec(&self) -> Result<DeltaTSpec, ConfigError> {
        match &self.delta_t {
            DeltaTField::Seconds(s) => Ok(DeltaTSpec::Absolute(*s)),
            DeltaTField::Text(text) => {
                let trimmed = text.trim();
                let Some(prefix) = trimmed.strip_suffix(['T', 't']) else {
                    return invalid(format!(
                        "delta_t {text:?} must be a number of seconds or a fraction like \"0.7T\""
                    ));
                };
                let fraction = if prefix.is_empty() {
                    1.0
                } else {
                    prefix.trim().parse::<f64>().map_err(|_| {
                        ConfigError::Invalid(format!("cannot parse delta_t fraction {text:?}"))
                    })?
                };
                Ok(DeltaTSpec::FractionOfSlowest(fraction))
            }
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum DeltaTField {
    Seconds(f64),
    Text(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct BoundSection {
    lipschitz: f64,
    delta: f64,
    epsilon: f64,
    beta: f64,
    phi: f64,
    noise_scale: f64,
    learning_rate: f64,
    /// `"auto"` resolves to half the tier count after profiling.
    xi: XiField,
}

impl Default for BoundSection {
    fn default() -> Self {
        let d = BoundConstants::default();
        BoundSection {
            lipschitz: d.lipschitz,
            delta: d.delta,
            epsilon: d.epsilon,
            beta: d.beta,
            phi: d.phi,
            noise_scale: d.noise_scale,
            learning_rate: d.learning_rate,
            xi: XiField::Text("auto".into()),
        }
    }
}

impl BoundSection {
    fn constants(&self) -> BoundConstants {
        BoundConstants {
            lipschitz: self.lipschitz,
            delta: self.delta,
            epsilon: self.epsilon,
            beta: self.beta,
            phi: self.phi,
            noise_scale: self.noise_scale,
            learning_rate: self.learning_rate,
            xi: match self.xi {
                XiField::Number(v) => v,
                // Placeholder; the run resolves the real value from the
                // tier count.
                XiField::Text(_) => 1.0,
            },
        }
    }

    fn xi_spec(&self) -> Result<XiSpec, ConfigError> {
        match &self.xi {
            XiField::Number(v) => Ok(XiSpec::Fixed(*v)),
            XiField::Text(text) if text == "auto" => Ok(XiSpec::Auto),
            XiField::Text(text) => {
                invalid(format!("xi must be a number or \"auto\", got {text:?}"))
            }
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum XiField {
    Number(f64),
    Text(String),
}
