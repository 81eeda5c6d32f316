//! Mini-batch construction for request-level samples.
//!
//! A [`JaggedBatch`] keeps two batch sizes: `b_ro` rows for user-side
//! tensors and `b_nro` rows for item-side tensors, linked by
//! `impressions_per_sample`. User features are never copied to impression
//! rows here; [`fanout`] produces the index map the model uses to do that
//! late, after the user-side computation has run once per request.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{
    validate_request_sample, FeatureId, FeatureRegistry, FeatureSide, ImpressionSample, LabelId, NormParams,
    RequestSample, Violation,
};
use crate::tensor::Matrix;

/// Padding id for masked sequence positions. Real ids are >= 1.
pub const PAD_ID: u64 = 0;

#[derive(Debug, Error, PartialEq)]
pub enum BatchError {
    #[error("cannot build a batch from zero samples")]
    Empty,
    #[error("request {request_id}: {detail}")]
    RegistryMismatch { request_id: u64, detail: String },
    #[error("invalid sample: {0:?}")]
    Invalid(Vec<Violation>),
    #[error("unknown feature {0}")]
    UnknownFeature(FeatureId),
    #[error("timestamps for {0} do not align with its ids")]
    TimestampLength(FeatureId),
    #[error("column {column}: std must be > 0, got {std}")]
    NonPositiveStd { column: usize, std: f32 },
    #[error("normalization params cover {params} columns, matrix has {cols}")]
    ParamCount { params: usize, cols: usize },
}

/// Jagged id lists for several features over the same logical rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawKeyedJagged")]
pub struct KeyedJagged {
    pub keys: Vec<FeatureId>,
    pub lengths: Vec<Vec<u32>>,
    pub values: Vec<Vec<u64>>,
    #[serde(skip)]
    offsets: Vec<Vec<usize>>,
}

#[derive(Deserialize)]
struct RawKeyedJagged {
    keys: Vec<FeatureId>,
    lengths: Vec<Vec<u32>>,
    values: Vec<Vec<u64>>,
}

impl From<RawKeyedJagged> for KeyedJagged {
    fn from(raw: RawKeyedJagged) -> Self {
        let mut kj = KeyedJagged::new(raw.keys);
        for (k, (lengths, values)) in raw.lengths.iter().zip(&raw.values).enumerate() {
            let mut off = 0;
            for &n in lengths {
                let end = (off + n as usize).min(values.len());
                kj.push(k, &values[off..end]);
                off = end;
            }
        }
        kj
    }
}

impl KeyedJagged {
    pub fn new(keys: Vec<FeatureId>) -> Self {
        let n = keys.len();
        Self {
            keys,
            lengths: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            offsets: vec![vec![0]; n],
        }
    }

    pub fn push(&mut self, key_index: usize, ids: &[u64]) {
        self.lengths[key_index].push(u32::try_from(ids.len()).expect("id list exceeds u32"));
        self.values[key_index].extend_from_slice(ids);
        self.offsets[key_index].push(self.values[key_index].len());
    }

    pub fn key_index(&self, key: FeatureId) -> Option<usize> {
        self.keys.iter().position(|&k| k == key)
    }

    pub fn num_rows(&self) -> usize {
        self.lengths.first().map_or(0, Vec::len)
    }

    pub fn row(&self, key_index: usize, row: usize) -> &[u64] {
        let off = &self.offsets[key_index];
        &self.values[key_index][off[row]..off[row + 1]]
    }

    /// Duplicates rows according to `index` (one output row per entry).
    pub fn gather_rows(&self, index: &[u32]) -> KeyedJagged {
        let mut out = KeyedJagged::new(self.keys.clone());
        for k in 0..self.keys.len() {
            for &r in index {
                let ids = self.row(k, r as usize).to_vec();
                out.push(k, &ids);
            }
        }
        out
    }

    pub fn total_ids(&self, key_index: usize) -> usize {
        self.values[key_index].len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum TaskLabel {
    /// 1.0 when the label is present, else 0.0.
    Binary { label: LabelId },
    /// Value of the highest bucket present, else 0.0.
    Duration { buckets: Vec<(LabelId, f32)> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub label: TaskLabel,
}

impl TaskSpec {
    fn materialize(&self, labels: &[LabelId]) -> f32 {
        match &self.label {
            TaskLabel::Binary { label } => {
                if labels.contains(label) {
                    1.0
                } else {
                    0.0
                }
            }
            TaskLabel::Duration { buckets } => buckets
                .iter()
                .filter(|(l, _)| labels.contains(l))
                .map(|&(_, v)| v)
                .fold(0.0, f32::max),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupKeep {
    #[default]
    First,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    pub tasks: Vec<TaskSpec>,
    pub dedup_keep: DedupKeep,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            tasks: vec![
                TaskSpec {
                    name: "engagement".into(),
                    label: TaskLabel::Binary { label: LabelId(1) },
                },
                TaskSpec {
                    name: "consumption".into(),
                    label: TaskLabel::Binary { label: LabelId(2) },
                },
            ],
            dedup_keep: DedupKeep::First,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaggedBatch {
    pub b_ro: u32,
    pub b_nro: u32,
    pub impressions_per_sample: Vec<u32>,
    pub request_ids: Vec<u64>,
    pub user_ids: Vec<u64>,
    pub ro_dense_keys: Vec<FeatureId>,
    pub ro_dense: Matrix,
    pub ro_idlist: KeyedJagged,
    pub items: Vec<u64>,
    pub nro_dense_keys: Vec<FeatureId>,
    pub nro_dense: Matrix,
    pub nro_idlist: KeyedJagged,
    /// One column per configured task, `b_nro` entries each.
    pub labels: Vec<Vec<f32>>,
}

impl JaggedBatch {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("batch serialization is infallible")
    }
}

fn check_keys<'a, V>(
    request_id: u64,
    side: FeatureSide,
    have: impl Iterator<Item = (&'a FeatureId, V)>,
    want: &std::collections::BTreeSet<FeatureId>,
) -> Result<(), BatchError> {
    let have: Vec<FeatureId> = have.map(|(k, _)| *k).collect();
    if have.iter().ne(want.iter()) {
        return Err(BatchError::RegistryMismatch {
            request_id,
            detail: format!("{side} features {have:?} differ from registry {want:?}"),
        });
    }
    Ok(())
}

/// Builds a batch with `b_ro = samples.len()`; item rows are laid out
/// sample-major, then in item order.
pub fn build_batch(
    samples: &[RequestSample],
    registry: &FeatureRegistry,
    config: &BatchConfig,
) -> Result<JaggedBatch, BatchError> {
    if samples.is_empty() {
        return Err(BatchError::Empty);
    }
    for s in samples {
        let v = validate_request_sample(s, registry);
        if !v.is_empty() {
            return Err(BatchError::Invalid(v));
        }
        check_keys(
            s.request_id,
            FeatureSide::RoDense,
            s.ro_dense.iter(),
            registry.ro_dense(),
        )?;
        check_keys(
            s.request_id,
            FeatureSide::RoIdList,
            s.ro_idlist.iter(),
            registry.ro_idlist(),
        )?;
        check_keys(
            s.request_id,
            FeatureSide::NroDense,
            s.nro_dense.iter(),
            registry.nro_dense(),
        )?;
        check_keys(
            s.request_id,
            FeatureSide::NroIdList,
            s.nro_idlist.iter(),
            registry.nro_idlist(),
        )?;
    }

    let ro_dense_keys: Vec<FeatureId> = registry.ro_dense().iter().copied().collect();
    let nro_dense_keys: Vec<FeatureId> = registry.nro_dense().iter().copied().collect();
    let b_ro = samples.len();
    let b_nro: usize = samples.iter().map(|s| s.items.len()).sum();

    let mut ro_dense = Matrix::zeros(b_ro, ro_dense_keys.len());
    let mut ro_idlist = KeyedJagged::new(registry.ro_idlist().iter().copied().collect());
    let mut nro_dense = Matrix::zeros(b_nro, nro_dense_keys.len());
    let mut nro_idlist = KeyedJagged::new(registry.nro_idlist().iter().copied().collect());
    let mut labels = vec![Vec::with_capacity(b_nro); config.tasks.len()];
    let mut items = Vec::with_capacity(b_nro);

    let mut j = 0;
    for (i, s) in samples.iter().enumerate() {
        for (c, id) in ro_dense_keys.iter().enumerate() {
            ro_dense.set(i, c, s.ro_dense[id]);
        }
        for (k, id) in ro_idlist.keys.clone().iter().enumerate() {
            ro_idlist.push(k, &s.ro_idlist[id]);
        }
        for (pos, &item) in s.items.iter().enumerate() {
            items.push(item);
            for (c, id) in nro_dense_keys.iter().enumerate() {
                nro_dense.set(j, c, s.nro_dense[id][pos]);
            }
            for (k, id) in nro_idlist.keys.clone().iter().enumerate() {
                nro_idlist.push(k, &s.nro_idlist[id][pos]);
            }
            for (t, task) in config.tasks.iter().enumerate() {
                labels[t].push(task.materialize(&s.conversions[pos]));
            }
            j += 1;
        }
    }

    Ok(JaggedBatch {
        b_ro: b_ro as u32,
        b_nro: b_nro as u32,
        impressions_per_sample: samples.iter().map(|s| s.items.len() as u32).collect(),
        request_ids: samples.iter().map(|s| s.request_id).collect(),
        user_ids: samples.iter().map(|s| s.user_id).collect(),
        ro_dense_keys,
        ro_dense,
        ro_idlist,
        items,
        nro_dense_keys,
        nro_dense,
        nro_idlist,
        labels,
    })
}

/// Impression-level batch: every row is its own "request" (`b_ro = b_nro`,
/// all fanout counts 1) and user features are stored once per row.
pub fn build_impression_batch(
    rows: &[ImpressionSample],
    registry: &FeatureRegistry,
    config: &BatchConfig,
) -> Result<JaggedBatch, BatchError> {
    if rows.is_empty() {
        return Err(BatchError::Empty);
    }
    let as_request: Vec<RequestSample> = rows
        .iter()
        .map(|r| {
            let mut s = RequestSample {
                request_id: r.request_id,
                user_id: r.user_id,
                items: vec![r.item_id],
                conversions: vec![r.conversions.clone()],
                ..Default::default()
            };
            for (&id, &v) in &r.dense_features {
                match registry.side(id) {
                    Some(FeatureSide::RoDense) => {
                        s.ro_dense.insert(id, v);
                    }
                    _ => {
                        s.nro_dense.insert(id, vec![v]);
                    }
                }
            }
            for (&id, v) in &r.idlist_features {
                match registry.side(id) {
                    Some(FeatureSide::RoIdList) => {
                        s.ro_idlist.insert(id, v.clone());
                    }
                    _ => {
                        s.nro_idlist.insert(id, vec![v.clone()]);
                    }
                }
            }
            s
        })
        .collect();
    build_batch(&as_request, registry, config)
}

/// Maps every item row to the request row that owns it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FanoutIndex {
    pub row_map: Vec<u32>,
}

impl FanoutIndex {
    pub fn from_counts(impressions_per_sample: &[u32]) -> Self {
        let mut row_map = Vec::with_capacity(impressions_per_sample.iter().sum::<u32>() as usize);
        for (i, &k) in impressions_per_sample.iter().enumerate() {
            row_map.extend(std::iter::repeat_n(i as u32, k as usize));
        }
        Self { row_map }
    }

    pub fn gather(&self, m: &Matrix) -> Matrix {
        m.gather_rows(&self.row_map)
    }
}

pub fn fanout(batch: &JaggedBatch) -> FanoutIndex {
    FanoutIndex::from_counts(&batch.impressions_per_sample)
}

/// Impression-level view of a request batch: user rows are copied onto
/// every impression row and every fanout count becomes 1.
pub fn expand_batch(batch: &JaggedBatch) -> JaggedBatch {
    let idx = fanout(batch);
    let gather_u64 = |v: &[u64]| idx.row_map.iter().map(|&r| v[r as usize]).collect::<Vec<_>>();
    JaggedBatch {
        b_ro: batch.b_nro,
        b_nro: batch.b_nro,
        impressions_per_sample: vec![1; batch.b_nro as usize],
        request_ids: gather_u64(&batch.request_ids),
        user_ids: gather_u64(&batch.user_ids),
        ro_dense_keys: batch.ro_dense_keys.clone(),
        ro_dense: idx.gather(&batch.ro_dense),
        ro_idlist: batch.ro_idlist.gather_rows(&idx.row_map),
        items: batch.items.clone(),
        nro_dense_keys: batch.nro_dense_keys.clone(),
        nro_dense: batch.nro_dense.clone(),
        nro_idlist: batch.nro_idlist.clone(),
        labels: batch.labels.clone(),
    }
}

/// Concatenates the listed id-list features of one user row, in the given
/// feature order or, with timestamps, by ascending time (stable: ties keep
/// feature order then position).
pub fn merge_sequences(
    row: &BTreeMap<FeatureId, Vec<u64>>,
    order: &[FeatureId],
    timestamps: Option<&BTreeMap<FeatureId, Vec<i64>>>,
) -> Result<Vec<u64>, BatchError> {
    let mut lists = Vec::with_capacity(order.len());
    for id in order {
        lists.push((*id, row.get(id).ok_or(BatchError::UnknownFeature(*id))?));
    }
    let Some(ts) = timestamps else {
        return Ok(lists.into_iter().flat_map(|(_, v)| v.iter().copied()).collect());
    };
    let mut keyed = Vec::new();
    for (id, ids) in lists {
        let times = ts.get(&id).ok_or(BatchError::UnknownFeature(id))?;
        if times.len() != ids.len() {
            return Err(BatchError::TimestampLength(id));
        }
        keyed.extend(times.iter().copied().zip(ids.iter().copied()));
    }
    keyed.sort_by_key(|&(t, _)| t);
    Ok(keyed.into_iter().map(|(_, id)| id).collect())
}

/// Removes repeated ids, keeping the earliest occurrence.
pub fn dedup_ids(seq: &[u64]) -> Vec<u64> {
    dedup_ids_with(seq, DedupKeep::First)
}

pub fn dedup_ids_with(seq: &[u64], keep: DedupKeep) -> Vec<u64> {
    let mut seen = std::collections::HashSet::with_capacity(seq.len());
    match keep {
        DedupKeep::First => seq.iter().copied().filter(|id| seen.insert(*id)).collect(),
        DedupKeep::Last => {
            let mut out: Vec<u64> = seq.iter().rev().copied().filter(|id| seen.insert(*id)).collect();
            out.reverse();
            out
        }
    }
}

/// `(clamp(x, lo, hi) - mean) / std`, per column.
pub fn normalize_dense(m: &Matrix, params: &[NormParams]) -> Result<Matrix, BatchError> {
    if params.len() != m.cols() {
        return Err(BatchError::ParamCount {
            params: params.len(),
            cols: m.cols(),
        });
    }
    for (column, p) in params.iter().enumerate() {
        if p.std.is_nan() || p.std <= 0.0 {
            return Err(BatchError::NonPositiveStd { column, std: p.std });
        }
    }
    let mut out = m.clone();
    for r in 0..m.rows() {
        for (x, p) in out.row_mut(r).iter_mut().zip(params) {
            *x = (x.clamp(p.lo, p.hi) - p.mean) / p.std;
        }
    }
    Ok(out)
}

/// Keeps the most recent `n_max` ids and left-pads with [`PAD_ID`]; the
/// mask is true on real positions.
pub fn truncate_and_mask(seq: &[u64], n_max: usize) -> (Vec<u64>, Vec<bool>) {
    let keep = seq.len().min(n_max);
    let pad = n_max - keep;
    let mut ids = vec![PAD_ID; pad];
    ids.extend_from_slice(&seq[seq.len() - keep..]);
    let mut mask = vec![false; pad];
    mask.extend(std::iter::repeat_n(true, keep));
    (ids, mask)
}
