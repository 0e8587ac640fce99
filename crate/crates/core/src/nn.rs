//! A small dense classifier over flat weight vectors.
//!
//! The whole model lives in one `Vec<f64>` so masks, aggregation, and
//! uploads can treat it uniformly. An optional frozen random projection
//! stands in for a convolutional front end: it is drawn once from the
//! model seed, counted in the upload payload, protected from pruning,
//! and never trained — freezing is an update-time policy, so gradients
//! reported by [`batch_gradient`] are still the true derivatives for
//! every coordinate and can be checked against finite differences.
//!
//! The trainable part is a bias-carrying multilayer perceptron with
//! rectifier activations and a softmax cross-entropy head.
//!
//! Flat layout: `[projection rows] [W_0][b_0] [W_1][b_1] ...`, matrices
//! row-major.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::LabeledDataset;
use crate::pruning::{apply_mask, LayerLayout, PruningMask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("bad model spec: {0}")]
    BadSpec(String),
    #[error("weight vector length {got} does not match the spec's {expected}")]
    WeightCountMismatch { expected: usize, got: usize },
    #[error("dataset dimension {data} does not match model input {model}")]
    DimensionMismatch { model: usize, data: usize },
    #[error("dataset class count {data} exceeds model output {model}")]
    ClassMismatch { model: usize, data: usize },
    #[error("mask length {got} does not match weight count {expected}")]
    MaskMismatch { expected: usize, got: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("bad hyperparameter: {0}")]
    BadHyper(String),
}

/// Architecture of the classifier; weights live elsewhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Width of the frozen random projection; `None` feeds the input
    /// directly into the perceptron.
    pub projection_dim: Option<usize>,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl ModelSpec {
    /// # Errors
    ///
    /// Every dimension must be at least 1.
    pub fn validate(&self) -> Result<(), NnError> {
        let mut dims = vec![self.input_dim, self.num_classes];
        if let Some(p) = self.projection_dim {
            dims.push(p);
        }
        dims.extend(&self.hidden_dims);
        if let Some(&bad) = dims.iter().find(|&&d| d == 0) {
            return Err(NnError::BadSpec(format!("dimension {bad} must be >= 1")));
        }
        Ok(())
    }

    /// Width of what the perceptron actually sees.
    fn feature_dim(&self) -> usize {
        self.projection_dim.unwrap_or(self.input_dim)
    }

    /// Layer widths of the perceptron: `[feature, hidden..., classes]`.
    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.feature_dim());
        dims.extend(&self.hidden_dims);
        dims.push(self.num_classes);
        dims
    }

    /// Protected/prunable split of the flat vector: the projection is
    /// the protected segment, the perceptron's weights and biases the
    /// prunable one.
    pub fn layout(&self) -> LayerLayout {
        let conv = self.projection_dim.map_or(0, |p| p * self.input_dim);
        let dims = self.layer_dims();
        let fc: usize = dims
            .windows(2)
            .map(|pair| pair[0] * pair[1] + pair[1])
            .sum();
        LayerLayout {
            conv_weight_count: conv,
            fc_weight_count: fc,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.layout().total()
    }

    fn check_weights(&self, weights: &[f64]) -> Result<(), NnError> {
        let expected = self.weight_count();
        if weights.len() != expected {
            return Err(NnError::WeightCountMismatch {
                expected,
                got: weights.len(),
            });
        }
        Ok(())
    }

    fn check_data(&self, data: &LabeledDataset) -> Result<(), NnError> {
        if data.is_empty() {
            return Err(NnError::EmptyDataset);
        }
        if data.dim() != self.input_dim {
            return Err(NnError::DimensionMismatch {
                model: self.input_dim,
                data: data.dim(),
            });
        }
        if data.num_classes() > self.num_classes {
            return Err(NnError::ClassMismatch {
                model: self.num_classes,
                data: data.num_classes(),
            });
        }
        Ok(())
    }
}

/// Draws the initial flat weight vector: every matrix entry is
/// `N(0, 1/fan_in)` (standard deviation `1/sqrt(fan_in)`), biases start
/// at zero. The projection is drawn first and then never changes.
pub fn init_weights(spec: &ModelSpec, seed: u64) -> Result<Vec<f64>, NnError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(spec.weight_count());
    let draw_matrix = |rows: usize, cols: usize, out: &mut Vec<f64>, rng: &mut ChaCha8Rng| {
        let normal = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("finite spread");
        for _ in 0..rows * cols {
            out.push(normal.sample(rng));
        }
    };
    if let Some(p) = spec.projection_dim {
        draw_matrix(p, spec.input_dim, &mut weights, &mut rng);
    }
    let dims = spec.layer_dims();
    for pair in dims.windows(2) {
        draw_matrix(pair[1], pair[0], &mut weights, &mut rng);
        weights.extend(std::iter::repeat_n(0.0, pair[1]));
    }
    debug_assert_eq!(weights.len(), spec.weight_count());
    Ok(weights)
}

/// Forward state kept for backpropagation: pre-activations of every
/// stage plus the post-activation inputs each layer consumed.
struct ForwardTrace {
    /// Pre-activation of the projection stage, when present.
    projection_z: Option<Vec<f64>>,
    /// `inputs[l]` is what layer `l` consumed; `inputs[0]` is the
    /// (possibly projected) feature vector.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations per perceptron layer; the last one is the logits.
    zs: Vec<Vec<f64>>,
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn forward(spec: &ModelSpec, weights: &[f64], x: &[f64]) -> ForwardTrace {
    let mut offset = 0;
    let (projection_z, features) = match spec.projection_dim {
        Some(p) => {
            let mut z = vec![0.0; p];
            for (row, zr) in z.iter_mut().enumerate() {
                let w_row =
                    &weights[offset + row * spec.input_dim..offset + (row + 1) * spec.input_dim];
                *zr = w_row.iter().zip(x).map(|(w, xi)| w * xi).sum();
            }
            offset += p * spec.input_dim;
            let a: Vec<f64> = z.iter().map(|&v| relu(v)).collect();
            (Some(z), a)
        }
        None => (None, x.to_vec()),
    };

    let dims = spec.layer_dims();
    let mut inputs = vec![features];
    let mut zs = Vec::with_capacity(dims.len() - 1);
    for (l, pair) in dims.windows(2).enumerate() {
        let (d_in, d_out) = (pair[0], pair[1]);
        let input = &inputs[l];
        let w_off = offset;
        let b_off = offset + d_in * d_out;
        let mut z = vec![0.0; d_out];
        for (o, zo) in z.iter_mut().enumerate() {
            let w_row = &weights[w_off + o * d_in..w_off + (o + 1) * d_in];
            *zo = weights[b_off + o]
                + w_row
                    .iter()
                    .zip(input.iter())
                    .map(|(w, a)| w * a)
                    .sum::<f64>();
        }
        offset = b_off + d_out;
        let last = l == dims.len() - 2;
        if !last {
            inputs.push(z.iter().map(|&v| relu(v)).collect());
        }
        zs.push(z);
    }
    ForwardTrace {
        projection_z,
        inputs,
        zs,
    }
}

/// Numerically stable `log(sum(exp(z)))`.
fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// First index of the maximum entry; ties go to the lower class so
/// accuracy is deterministic.
fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Class logits for one feature row.
pub fn logits(spec: &ModelSpec, weights: &[f64], x: &[f64]) -> Result<Vec<f64>, NnError> {
    spec.check_weights(weights)?;
    if x.len() != spec.input_dim {
        return Err(NnError::DimensionMismatch {
            model: spec.input_dim,
            data: x.len(),
        });
    }
    let trace = forward(spec, weights, x);
    Ok(trace.zs.last().expect("at least one layer").clone())
}

/// Mean cross-entropy and top-1 accuracy over a dataset.
pub fn loss_and_accuracy(
    spec: &ModelSpec,
    weights: &[f64],
    data: &LabeledDataset,
) -> Result<(f64, f64), NnError> {
    spec.check_weights(weights)?;
    spec.check_data(data)?;
    let mut loss = 0.0;
    let mut hits = 0usize;
    for row in 0..data.len() {
        let trace = forward(spec, weights, data.feature_row(row));
        let z = trace.zs.last().expect("at least one layer");
        loss += log_sum_exp(z) - z[data.label(row)];
        if argmax(z) == data.label(row) {
            hits += 1;
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

/// Mean cross-entropy and its true gradient over the listed rows, for
/// every coordinate including the frozen projection.
pub fn batch_gradient(
    spec: &ModelSpec,
    weights: &[f64],
    data: &LabeledDataset,
    rows: &[usize],
) -> Result<(f64, Vec<f64>), NnError> {
    spec.check_weights(weights)?;
    spec.check_data(data)?;
    if rows.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let dims = spec.layer_dims();
    let mut grad = vec![0.0; weights.len()];
    let mut loss = 0.0;

    let proj_len = spec.projection_dim.map_or(0, |p| p * spec.input_dim);
    // Per-layer (weight, bias) offsets into the flat vector.
    let mut layer_offsets = Vec::with_capacity(dims.len() - 1);
    let mut offset = proj_len;
    for pair in dims.windows(2) {
        layer_offsets.push((offset, offset + pair[0] * pair[1]));
        offset += pair[0] * pair[1] + pair[1];
    }

    for &row in rows {
        let x = data.feature_row(row);
        let label = data.label(row);
        let trace = forward(spec, weights, x);
        let z_out = trace.zs.last().expect("at least one layer");
        loss += log_sum_exp(z_out) - z_out[label];

        // Softmax minus one-hot at the head, then walk the layers back.
        let lse = log_sum_exp(z_out);
        let mut dz: Vec<f64> = z_out.iter().map(|&v| (v - lse).exp()).collect();
        dz[label] -= 1.0;

        for l in (0..dims.len() - 1).rev() {
            let (w_off, b_off) = layer_offsets[l];
            let (d_in, d_out) = (dims[l], dims[l + 1]);
            let input = &trace.inputs[l];
            for o in 0..d_out {
                let g = dz[o];
                let w_row = &mut grad[w_off + o * d_in..w_off + (o + 1) * d_in];
                for (gw, &a) in w_row.iter_mut().zip(input.iter()) {
                    *gw += g * a;
                }
                grad[b_off + o] += g;
            }
            if l > 0 {
                // d(input of layer l) gated by its relu pre-activation.
                let z_prev = &trace.zs[l - 1];
                let mut da = vec![0.0; d_in];
                for o in 0..d_out {
                    let g = dz[o];
                    let w_row = &weights[w_off + o * d_in..w_off + (o + 1) * d_in];
                    for (d, &w) in da.iter_mut().zip(w_row) {
                        *d += g * w;
                    }
                }
                dz = da
                    .into_iter()
                    .zip(z_prev)
                    .map(|(d, &z)| if z > 0.0 { d } else { 0.0 })
                    .collect();
            } else if let (Some(p), Some(z_proj)) = (spec.projection_dim, &trace.projection_z) {
                // Same step once more for the projection stage.
                let mut da = vec![0.0; d_in];
                for o in 0..d_out {
                    let g = dz[o];
                    let w_row = &weights[w_off + o * d_in..w_off + (o + 1) * d_in];
                    for (d, &w) in da.iter_mut().zip(w_row) {
                        *d += g * w;
                    }
                }
                for r in 0..p {
                    if z_proj[r] > 0.0 {
                        let g = da[r];
                        let row_grad = &mut grad[r * spec.input_dim..(r + 1) * spec.input_dim];
                        for (gw, &xi) in row_grad.iter_mut().zip(x) {
                            *gw += g * xi;
                        }
                    }
                }
            }
        }
    }

    let scale = 1.0 / rows.len() as f64;
    loss *= scale;
    for g in grad.iter_mut() {
        *g *= scale;
    }
    Ok((loss, grad))
}

/// Runs masked mini-batch SGD on one device's shard and returns the new
/// weights.
///
/// The mask is applied up front, masked and frozen coordinates receive
/// no updates (so pruned weights stay exactly zero), and the per-epoch
/// batch order comes from the given seed alone. Partial final batches
/// are trained like any other.
#[allow(clippy::too_many_arguments)]
pub fn local_update(
    spec: &ModelSpec,
    weights: &[f64],
    mask: &PruningMask,
    shard: &LabeledDataset,
    local_epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>, NnError> {
    spec.check_weights(weights)?;
    spec.check_data(shard)?;
    if mask.len() != weights.len() {
        return Err(NnError::MaskMismatch {
            expected: weights.len(),
            got: mask.len(),
        });
    }
    if local_epochs == 0 {
        return Err(NnError::BadHyper("local_epochs must be >= 1".into()));
    }
    if batch_size == 0 {
        return Err(NnError::BadHyper("batch_size must be >= 1".into()));
    }
    if !(learning_rate > 0.0) {
        return Err(NnError::BadHyper(format!(
            "learning_rate must be > 0, got {learning_rate}"
        )));
    }

    let layout = spec.layout();
    let mut w = apply_mask(weights, mask);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for _ in 0..local_epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let (_, grad) = batch_gradient(spec, &w, shard, chunk)?;
            for idx in layout.fc_offset()..w.len() {
                if mask.keep()[idx] {
                    w[idx] -= learning_rate * grad[idx];
                }
            }
        }
    }
    Ok(w)
}
