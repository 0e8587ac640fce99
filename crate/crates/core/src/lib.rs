//! Desk-scale simulator for time-triggered federated learning over a
//! modeled wireless uplink, with joint model pruning and bandwidth
//! allocation.
//!
//! Devices are grouped into latency tiers; tier `m` contributes a model
//! update every `m`-th global round and must deliver it within `m`
//! deadline periods. Slack against the deadline is bought by pruning the
//! fully-connected part of the model, and the per-round solver splits the
//! uplink band across tiers so that as little as possible has to be
//! pruned.
//!
//! Module map:
//!
//! * [`netmodel`] — uplink rate, per-round latency, deadline checks
//! * [`pruning`] — importance scores, masks, surviving-weight counts
//! * [`allocator`] — closed-form ratio/share decisions and the multiplier
//!   search that enforces the bandwidth budget
//! * [`nn`] — a small dense classifier on flat weight vectors
//! * [`data`] — synthetic blobs, IDX files, device partitioning
//! * [`fedsim`] — tier assignment, staleness-weighted aggregation, the
//!   round loop for all four schemes
//! * [`bound`] — the additive convergence-bound report
//! * [`exec`] — rayon/sequential dispatch for the data-parallel loops
//! * [`snapshot`] — binary formats for weight vectors and masks

// Validation guards are written `!(x > 0.0)` on purpose: the negation
// sends NaN into the error arm, which `x <= 0.0` would wave through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocator;
pub mod bound;
pub mod data;
pub mod exec;
pub mod fedsim;
pub mod netmodel;
pub mod nn;
pub mod pruning;
pub mod snapshot;
