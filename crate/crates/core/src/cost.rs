//! Sequence-encoder cost formulas and measured cost reports.
//!
//! The formulas are evaluated literally in 128-bit integers. Measured
//! counters come from [`crate::model::Counters`], which count a
//! multiply-add as two FLOPs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batcher::JaggedBatch;
use crate::model::Counters;
use crate::schema::FeatureId;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("ROO cost is zero for (n={n}, m={m}, d={d}); ratio undefined")]
    ZeroCost { n: u64, m: u64, d: u64 },
    #[error("cost overflows 128 bits")]
    Overflow,
    #[error("run ids differ: {roo:?} vs {impression:?}")]
    RunMismatch { roo: String, impression: String },
    #[error("batch has no request rows")]
    EmptyBatch,
}

fn attention_cost(len: u128, d: u128) -> Option<u128> {
    len.checked_mul(len)?
        .checked_mul(d)?
        .checked_add(len.checked_mul(d)?.checked_mul(d)?)
}

/// `m (n^2 d + n d^2)`: every impression re-encodes the history.
pub fn impression_seq_cost(n: u64, m: u64, d: u64) -> Result<u128, CostError> {
    attention_cost(n as u128, d as u128)
        .and_then(|c| c.checked_mul(m as u128))
        .ok_or(CostError::Overflow)
}

/// `(n+m)^2 d + (n+m) d^2`: history and targets encoded in one pass.
pub fn roo_seq_cost(n: u64, m: u64, d: u64) -> Result<u128, CostError> {
    attention_cost(n as u128 + m as u128, d as u128).ok_or(CostError::Overflow)
}

pub fn seq_savings_ratio(n: u64, m: u64, d: u64) -> Result<f64, CostError> {
    let roo = roo_seq_cost(n, m, d)?;
    if roo == 0 {
        return Err(CostError::ZeroCost { n, m, d });
    }
    Ok(impression_seq_cost(n, m, d)? as f64 / roo as f64)
}

/// `b_nro / b_ro`
pub fn dedup_ratio(batch: &JaggedBatch) -> Result<f64, CostError> {
    if batch.b_ro == 0 {
        return Err(CostError::EmptyBatch);
    }
    Ok(batch.b_nro as f64 / batch.b_ro as f64)
}

/// Formula evaluation as printed by the `cost` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormulaReport {
    pub n: u64,
    pub m: u64,
    pub d: u64,
    pub impression_flops: u128,
    pub roo_flops: u128,
    pub savings_ratio: Option<f64>,
}

pub fn formula_report(n: u64, m: u64, d: u64) -> Result<FormulaReport, CostError> {
    Ok(FormulaReport {
        n,
        m,
        d,
        impression_flops: impression_seq_cost(n, m, d)?,
        roo_flops: roo_seq_cost(n, m, d)?,
        savings_ratio: seq_savings_ratio(n, m, d).ok(),
    })
}

/// Measured ROO run against its impression-level counterpart.
/// Communication is embedding bytes moved (`rows x d x 4`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub run_id: String,
    pub b_ro: u64,
    pub b_nro: u64,
    pub impression_flops: u64,
    pub roo_flops: u64,
    pub savings_ratio: Option<f64>,
    pub rows_fetched_roo: u64,
    pub rows_fetched_impression: u64,
    pub bytes_comm_roo: u64,
    pub bytes_comm_impression: u64,
    pub ro_rows_roo: BTreeMap<FeatureId, u64>,
    pub ro_rows_impression: BTreeMap<FeatureId, u64>,
    pub nro_rows_roo: BTreeMap<FeatureId, u64>,
    pub nro_rows_impression: BTreeMap<FeatureId, u64>,
    pub ro_flops_roo: u64,
    pub ro_flops_impression: u64,
}

impl CostReport {
    /// Impression over ROO rows fetched, per RO feature.
    pub fn ro_row_ratios(&self) -> BTreeMap<FeatureId, f64> {
        self.ro_rows_roo
            .iter()
            .filter(|(_, &r)| r > 0)
            .map(|(f, &r)| {
                (
                    *f,
                    self.ro_rows_impression.get(f).copied().unwrap_or(0) as f64 / r as f64,
                )
            })
            .collect()
    }

    pub fn dedup_ratio(&self) -> Option<f64> {
        (self.b_ro > 0).then(|| self.b_nro as f64 / self.b_ro as f64)
    }
}

/// Combines the counters of both modes. `roo.b_ro` and `roo.b_nro` become
/// the report's batch sizes.
pub fn measure_run(roo: &Counters, impression: &Counters) -> Result<CostReport, CostError> {
    if roo.run_id != impression.run_id {
        return Err(CostError::RunMismatch {
            roo: roo.run_id.clone(),
            impression: impression.run_id.clone(),
        });
    }
    let roo_flops = roo.total_flops();
    let impression_flops = impression.total_flops();
    Ok(CostReport {
        run_id: roo.run_id.clone(),
        b_ro: roo.b_ro,
        b_nro: roo.b_nro,
        impression_flops,
        roo_flops,
        savings_ratio: (roo_flops > 0).then(|| impression_flops as f64 / roo_flops as f64),
        rows_fetched_roo: roo.ro_rows_total() + roo.nro_rows_total(),
        rows_fetched_impression: impression.ro_rows_total() + impression.nro_rows_total(),
        bytes_comm_roo: roo.ro_bytes_moved + roo.nro_bytes_moved,
        bytes_comm_impression: impression.ro_bytes_moved + impression.nro_bytes_moved,
        ro_rows_roo: roo.ro_rows_fetched.clone(),
        ro_rows_impression: impression.ro_rows_fetched.clone(),
        nro_rows_roo: roo.nro_rows_fetched.clone(),
        nro_rows_impression: impression.nro_rows_fetched.clone(),
        ro_flops_roo: roo.ro_flops,
        ro_flops_impression: impression.ro_flops,
    })
}
