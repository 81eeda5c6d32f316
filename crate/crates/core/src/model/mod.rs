//! Forward-only reference kernels.
//!
//! Every architecture runs in two modes over the same parameters:
//! [`Mode::Roo`] computes user-side work once per request row and fans the
//! result out to impression rows; [`Mode::Impression`] duplicates user
//! inputs onto every impression row first and computes everything per
//! impression, as impression-level training would. [`Counters`] book FLOPs
//! and embedding rows fetched to the RO or NRO side so the two modes can be
//! compared.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batcher::BatchError;
use crate::schema::{FeatureId, SchemaError};
use crate::tensor::Matrix;

mod arch;
mod embedding;
mod lce;
mod seq;

pub use arch::{
    expanded_forward_oracle, forward, lookup_ro, lsr_forward, seq_encode_ranking, seq_encode_retrieval,
    two_tower_forward, Architecture, Mlp2, Mode, ModelConfig, ModelParams, MultiTaskHead, ITEM_ID_FEATURE,
};
pub use embedding::{lookup_pooled, EmbeddingTable};
pub use lce::{lce_compress, lce_project, user_arch_forward, LceParams, Tensor3};
pub use seq::{attention_weights, pool_user, EncodedPrefix, SeqEncoderParams, UserPooling};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("feature {0} is not available to this kernel")]
    UnknownFeature(FeatureId),
    #[error("row {row}: history id lists are not aligned")]
    Misaligned { row: usize },
    #[error("request row {row} has no targets")]
    EmptyTargets { row: usize },
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

/// Work counters for one or more forward calls. Merging is a field-wise
/// sum, so it is associative and commutative.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    #[serde(default)]
    pub run_id: String,
    pub b_ro: u64,
    pub b_nro: u64,
    pub ro_flops: u64,
    pub nro_flops: u64,
    pub ro_rows_fetched: BTreeMap<FeatureId, u64>,
    pub nro_rows_fetched: BTreeMap<FeatureId, u64>,
    pub ro_bytes_moved: u64,
    pub nro_bytes_moved: u64,
    pub empty_history_rows: u64,
}

impl Counters {
    pub fn with_run_id(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            ..Default::default()
        }
    }

    /// Books `rows` embedding rows of width `dim`; communication is the
    /// f32 bytes of those rows.
    pub fn record_fetch(&mut self, feature: FeatureId, ro_side: bool, rows: u64, dim: u32) {
        let bytes = rows * dim as u64 * 4;
        if ro_side {
            *self.ro_rows_fetched.entry(feature).or_default() += rows;
            self.ro_bytes_moved += bytes;
        } else {
            *self.nro_rows_fetched.entry(feature).or_default() += rows;
            self.nro_bytes_moved += bytes;
        }
    }

    pub fn merge(&mut self, other: &Counters) {
        if self.run_id.is_empty() {
            self.run_id = other.run_id.clone();
        }
        self.b_ro += other.b_ro;
        self.b_nro += other.b_nro;
        self.ro_flops += other.ro_flops;
        self.nro_flops += other.nro_flops;
        for (k, v) in &other.ro_rows_fetched {
            *self.ro_rows_fetched.entry(*k).or_default() += v;
        }
        for (k, v) in &other.nro_rows_fetched {
            *self.nro_rows_fetched.entry(*k).or_default() += v;
        }
        self.ro_bytes_moved += other.ro_bytes_moved;
        self.nro_bytes_moved += other.nro_bytes_moved;
        self.empty_history_rows += other.empty_history_rows;
    }

    pub fn total_flops(&self) -> u64 {
        self.ro_flops + self.nro_flops
    }

    pub fn ro_rows_total(&self) -> u64 {
        self.ro_rows_fetched.values().sum()
    }

    pub fn nro_rows_total(&self) -> u64 {
        self.nro_rows_fetched.values().sum()
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, `fan_in = rows`.
pub(crate) fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let bound = 1.0 / (rows.max(1) as f32).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Matrix::from_vec(rows, cols, data)
}

pub(crate) fn uniform_vec(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}
