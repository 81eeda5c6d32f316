//! Feature-flattened columnar block files.
//!
//! Two layouts share one set of primitive encodings (little-endian u32
//! lengths, u32 labels, f32 dense values, u64 ids):
//!
//! ```text
//! ROO block                         impression block
//! "ROO1"                            "IMP1"
//! u64 file_len                      u64 file_len
//! u32 sample_count                  u32 row_count
//! u32 total_items                   u32 0
//! 4 x (u32 n, n x u64 feature id)   3 x (u32 n, n x u64 feature id)
//!   ro_dense ro_idlist                dense idlist idscorelist
//!   nro_dense nro_idlist
//! columns                           columns
//! u32 column_count                  u32 column_count
//! column_count x u64 offset         column_count x u64 offset
//! u64 footer_offset                 u64 footer_offset
//! u32 crc32(all preceding bytes)    u32 crc32(all preceding bytes)
//! ```
//!
//! ROO columns, in order: request ids (u64 per sample), user ids,
//! impressions per sample (u32), item ids (u64 per item), conversions
//! (u32 length per item then labels), one f32 column per RO dense feature,
//! one (u32 lengths per sample, u64 values) pair per RO id-list feature,
//! one f32 per-item column per NRO dense feature, and one (u32 inner lengths
//! per item, u64 values) pair per NRO id-list feature. The outer lengths of
//! NRO id-list features are the impressions-per-sample column itself.
//!
//! Impression columns: request ids, user ids, item ids, conversions, then
//! per dense feature f32, per id-list feature (lengths, values), per
//! id-score-list feature (lengths, u64 ids, f32 scores).

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{
    expand_request_sample, expand_unchecked, FeatureId, ImpressionSample, LabelId, RequestSample, SchemaError,
};

pub const ROO_MAGIC: &[u8; 4] = b"ROO1";
pub const IMPRESSION_MAGIC: &[u8; 4] = b"IMP1";

/// magic + file_len + two u32 counts.
const PREAMBLE: usize = 4 + 8 + 4 + 4;
/// footer_offset + crc.
const TRAILER: usize = 8 + 4;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated block: header declares {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("corrupt block: {0}")]
    Corrupt(String),
    #[error("request {request_id} does not share the block's feature set")]
    MixedSchema { request_id: u64 },
    #[error(transparent)]
    Invalid(#[from] SchemaError),
    #[error("footprint of an empty corpus is undefined")]
    Empty,
}

/// Columnar, feature-flattened view of a list of request samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColumnarBlock {
    pub sample_count: usize,
    pub request_ids: Vec<u64>,
    pub user_ids: Vec<u64>,
    pub impressions_per_sample: Vec<u32>,
    pub items: Vec<u64>,
    pub conversion_lengths: Vec<u32>,
    pub conversion_values: Vec<u32>,
    pub ro_dense: BTreeMap<FeatureId, Vec<f32>>,
    pub ro_idlist: BTreeMap<FeatureId, (Vec<u32>, Vec<u64>)>,
    pub nro_dense: BTreeMap<FeatureId, Vec<f32>>,
    pub nro_idlist: BTreeMap<FeatureId, (Vec<u32>, Vec<u64>)>,
}

fn len_u32(n: usize) -> u32 {
    u32::try_from(n).expect("column length exceeds u32")
}

impl ColumnarBlock {
    pub fn from_samples(samples: &[RequestSample]) -> Result<Self, StoreError> {
        let mut block = ColumnarBlock::default();
        let Some(first) = samples.first() else {
            return Ok(block);
        };
        for id in first.ro_dense.keys() {
            block.ro_dense.insert(*id, Vec::new());
        }
        for id in first.ro_idlist.keys() {
            block.ro_idlist.insert(*id, Default::default());
        }
        for id in first.nro_dense.keys() {
            block.nro_dense.insert(*id, Vec::new());
        }
        for id in first.nro_idlist.keys() {
            block.nro_idlist.insert(*id, Default::default());
        }
        for s in samples {
            if !(s.ro_dense.keys().eq(block.ro_dense.keys())
                && s.ro_idlist.keys().eq(block.ro_idlist.keys())
                && s.nro_dense.keys().eq(block.nro_dense.keys())
                && s.nro_idlist.keys().eq(block.nro_idlist.keys()))
            {
                return Err(StoreError::MixedSchema {
                    request_id: s.request_id,
                });
            }
            // structural validity: aligned per-item columns
            expand_request_sample_check(s)?;

            block.request_ids.push(s.request_id);
            block.user_ids.push(s.user_id);
            block.impressions_per_sample.push(len_u32(s.items.len()));
            block.items.extend_from_slice(&s.items);
            for labels in &s.conversions {
                block.conversion_lengths.push(len_u32(labels.len()));
                block.conversion_values.extend(labels.iter().map(|l| l.0));
            }
            for (id, col) in block.ro_dense.iter_mut() {
                col.push(s.ro_dense[id]);
            }
            for (id, (lengths, values)) in block.ro_idlist.iter_mut() {
                let ids = &s.ro_idlist[id];
                lengths.push(len_u32(ids.len()));
                values.extend_from_slice(ids);
            }
            for (id, col) in block.nro_dense.iter_mut() {
                col.extend_from_slice(&s.nro_dense[id]);
            }
            for (id, (lengths, values)) in block.nro_idlist.iter_mut() {
                for ids in &s.nro_idlist[id] {
                    lengths.push(len_u32(ids.len()));
                    values.extend_from_slice(ids);
                }
            }
        }
        block.sample_count = samples.len();
        Ok(block)
    }

    pub fn to_samples(&self) -> Result<Vec<RequestSample>, StoreError> {
        let corrupt = |what: &str| StoreError::Corrupt(what.to_string());
        let total: usize = self.impressions_per_sample.iter().map(|&k| k as usize).sum();
        if self.items.len() != total || self.conversion_lengths.len() != total {
            return Err(corrupt("item columns disagree with impressions_per_sample"));
        }
        if self.nro_dense.values().any(|c| c.len() != total) {
            return Err(corrupt("nro dense column length"));
        }

        let mut conv_off = 0usize;
        let mut ro_off: BTreeMap<FeatureId, usize> = BTreeMap::new();
        let mut nro_off: BTreeMap<FeatureId, usize> = BTreeMap::new();
        let mut item_off = 0usize;
        let mut out = Vec::with_capacity(self.sample_count);
        for i in 0..self.sample_count {
            let k = self.impressions_per_sample[i] as usize;
            let items = self.items[item_off..item_off + k].to_vec();
            let mut conversions = Vec::with_capacity(k);
            for j in item_off..item_off + k {
                let n = self.conversion_lengths[j] as usize;
                let labels = self
                    .conversion_values
                    .get(conv_off..conv_off + n)
                    .ok_or_else(|| corrupt("conversion values"))?;
                conversions.push(labels.iter().map(|&l| LabelId(l)).collect());
                conv_off += n;
            }
            let ro_dense = self.ro_dense.iter().map(|(&id, c)| (id, c[i])).collect();
            let mut ro_idlist = BTreeMap::new();
            for (&id, (lengths, values)) in &self.ro_idlist {
                let off = ro_off.entry(id).or_default();
                let n = lengths[i] as usize;
                let ids = values.get(*off..*off + n).ok_or_else(|| corrupt("ro idlist values"))?;
                ro_idlist.insert(id, ids.to_vec());
                *off += n;
            }
            let nro_dense = self
                .nro_dense
                .iter()
                .map(|(&id, c)| (id, c[item_off..item_off + k].to_vec()))
                .collect();
            let mut nro_idlist = BTreeMap::new();
            for (&id, (lengths, values)) in &self.nro_idlist {
                let off = nro_off.entry(id).or_default();
                let mut lists = Vec::with_capacity(k);
                for &n in &lengths[item_off..item_off + k] {
                    let n = n as usize;
                    let ids = values.get(*off..*off + n).ok_or_else(|| corrupt("nro idlist values"))?;
                    lists.push(ids.to_vec());
                    *off += n;
                }
                nro_idlist.insert(id, lists);
            }
            out.push(RequestSample {
                request_id: self.request_ids[i],
                user_id: self.user_ids[i],
                items,
                conversions,
                ro_dense,
                ro_idlist,
                nro_dense,
                nro_idlist,
            });
            item_off += k;
        }
        Ok(out)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = BlockWriter::new(ROO_MAGIC, self.sample_count, self.items.len());
        w.ids(self.ro_dense.keys());
        w.ids(self.ro_idlist.keys());
        w.ids(self.nro_dense.keys());
        w.ids(self.nro_idlist.keys());
        w.column();
        w.u64s(&self.request_ids);
        w.column();
        w.u64s(&self.user_ids);
        w.column();
        w.u32s(&self.impressions_per_sample);
        w.column();
        w.u64s(&self.items);
        w.column();
        w.u32s(&self.conversion_lengths);
        w.u32s(&self.conversion_values);
        for col in self.ro_dense.values() {
            w.column();
            w.f32s(col);
        }
        for (lengths, values) in self.ro_idlist.values() {
            w.column();
            w.u32s(lengths);
            w.u64s(values);
        }
        for col in self.nro_dense.values() {
            w.column();
            w.f32s(col);
        }
        for (lengths, values) in self.nro_idlist.values() {
            w.column();
            w.u32s(lengths);
            w.u64s(values);
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut r = BlockReader::open(bytes, ROO_MAGIC)?;
        let sample_count = r.count_a;
        let total = r.count_b;
        let ro_dense_ids = r.ids()?;
        let ro_idlist_ids = r.ids()?;
        let nro_dense_ids = r.ids()?;
        let nro_idlist_ids = r.ids()?;

        let mut b = ColumnarBlock {
            sample_count,
            ..Default::default()
        };
        r.column()?;
        b.request_ids = r.u64s(sample_count)?;
        r.column()?;
        b.user_ids = r.u64s(sample_count)?;
        r.column()?;
        b.impressions_per_sample = r.u32s(sample_count)?;
        let sum: usize = b.impressions_per_sample.iter().map(|&k| k as usize).sum();
        if sum != total {
            return Err(StoreError::Corrupt(format!(
                "impressions_per_sample sums to {sum}, header says {total}"
            )));
        }
        r.column()?;
        b.items = r.u64s(total)?;
        r.column()?;
        b.conversion_lengths = r.u32s(total)?;
        let n = sum_lengths(&b.conversion_lengths);
        b.conversion_values = r.u32s(n)?;
        for id in ro_dense_ids {
            r.column()?;
            b.ro_dense.insert(id, r.f32s(sample_count)?);
        }
        for id in ro_idlist_ids {
            r.column()?;
            let lengths = r.u32s(sample_count)?;
            let values = r.u64s(sum_lengths(&lengths))?;
            b.ro_idlist.insert(id, (lengths, values));
        }
        for id in nro_dense_ids {
            r.column()?;
            b.nro_dense.insert(id, r.f32s(total)?);
        }
        for id in nro_idlist_ids {
            r.column()?;
            let lengths = r.u32s(total)?;
            let values = r.u64s(sum_lengths(&lengths))?;
            b.nro_idlist.insert(id, (lengths, values));
        }
        r.finish()?;
        Ok(b)
    }
}

fn expand_request_sample_check(s: &RequestSample) -> Result<(), StoreError> {
    // expansion runs the registry-free structural checks
    let n = s.items.len();
    let aligned = n > 0
        && s.conversions.len() == n
        && s.nro_dense.values().all(|c| c.len() == n)
        && s.nro_idlist.values().all(|c| c.len() == n);
    if aligned {
        Ok(())
    } else {
        expand_request_sample(s).map(|_| ()).map_err(StoreError::from)
    }
}

fn sum_lengths(lengths: &[u32]) -> usize {
    lengths.iter().map(|&n| n as usize).sum()
}

struct BlockWriter {
    buf: Vec<u8>,
    offsets: Vec<u64>,
}

impl BlockWriter {
    fn new(magic: &[u8; 4], count_a: usize, count_b: usize) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&0u64.to_le_bytes());
        buf.extend_from_slice(&len_u32(count_a).to_le_bytes());
        buf.extend_from_slice(&len_u32(count_b).to_le_bytes());
        Self {
            buf,
            offsets: Vec::new(),
        }
    }

    fn ids<'a>(&mut self, ids: impl ExactSizeIterator<Item = &'a FeatureId>) {
        self.buf.extend_from_slice(&len_u32(ids.len()).to_le_bytes());
        for id in ids {
            self.buf.extend_from_slice(&id.0.to_le_bytes());
        }
    }

    fn column(&mut self) {
        self.offsets.push(self.buf.len() as u64);
    }

    fn u32s(&mut self, v: &[u32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn u64s(&mut self, v: &[u64]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let footer_offset = self.buf.len() as u64;
        self.buf.extend_from_slice(&len_u32(self.offsets.len()).to_le_bytes());
        for off in &self.offsets {
            self.buf.extend_from_slice(&off.to_le_bytes());
        }
        self.buf.extend_from_slice(&footer_offset.to_le_bytes());
        let file_len = (self.buf.len() + 4) as u64;
        self.buf[4..12].copy_from_slice(&file_len.to_le_bytes());
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

struct BlockReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    body_end: usize,
    offsets: Vec<u64>,
    next_column: usize,
    count_a: usize,
    count_b: usize,
}

impl<'a> BlockReader<'a> {
    /// Checks magic, declared length and checksum, and loads the footer.
    fn open(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self, StoreError> {
        if bytes.len() < 4 {
            return Err(StoreError::Truncated {
                expected: (PREAMBLE + TRAILER) as u64,
                actual: bytes.len() as u64,
            });
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &found != magic {
            return Err(StoreError::BadMagic(found));
        }
        if bytes.len() < PREAMBLE + TRAILER {
            return Err(StoreError::Truncated {
                expected: (PREAMBLE + TRAILER) as u64,
                actual: bytes.len() as u64,
            });
        }
        let declared = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
        let actual = bytes.len() as u64;
        if actual < declared {
            return Err(StoreError::Truncated {
                expected: declared,
                actual,
            });
        }
        if actual > declared {
            return Err(StoreError::Corrupt(format!(
                "{} trailing bytes after declared end",
                actual - declared
            )));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(StoreError::ChecksumMismatch { stored, computed });
        }

        let footer_offset = u64::from_le_bytes(body[body.len() - 8..].try_into().expect("8 bytes")) as usize;
        let footer_end = body.len() - 8;
        if footer_offset < PREAMBLE || footer_offset + 4 > footer_end {
            return Err(StoreError::Corrupt("footer offset out of range".into()));
        }
        let n_cols = u32::from_le_bytes(body[footer_offset..footer_offset + 4].try_into().expect("4")) as usize;
        if footer_offset + 4 + 8 * n_cols != footer_end {
            return Err(StoreError::Corrupt("footer size disagrees with column count".into()));
        }
        let offsets = body[footer_offset + 4..footer_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let count_a = u32::from_le_bytes(bytes[12..16].try_into().expect("4")) as usize;
        let count_b = u32::from_le_bytes(bytes[16..20].try_into().expect("4")) as usize;
        Ok(Self {
            bytes,
            pos: PREAMBLE,
            body_end: footer_offset,
            offsets,
            next_column: 0,
            count_a,
            count_b,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.body_end)
            .ok_or_else(|| StoreError::Corrupt(format!("column overruns body at {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn ids(&mut self) -> Result<Vec<FeatureId>, StoreError> {
        let n = self.u32()? as usize;
        Ok(self.u64s(n)?.into_iter().map(FeatureId).collect())
    }

    fn column(&mut self) -> Result<(), StoreError> {
        let expected = self.offsets.get(self.next_column).copied();
        if expected != Some(self.pos as u64) {
            return Err(StoreError::Corrupt(format!(
                "column {} starts at {}, footer says {:?}",
                self.next_column, self.pos, expected
            )));
        }
        self.next_column += 1;
        Ok(())
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>, StoreError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(overflow)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4")))
            .collect())
    }

    fn u64s(&mut self, n: usize) -> Result<Vec<u64>, StoreError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(overflow)?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8")))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, StoreError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(overflow)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
            .collect())
    }

    fn finish(self) -> Result<(), StoreError> {
        if self.pos != self.body_end || self.next_column != self.offsets.len() {
            return Err(StoreError::Corrupt("unread bytes or columns".into()));
        }
        Ok(())
    }
}

fn overflow() -> StoreError {
    StoreError::Corrupt("length overflow".into())
}

pub fn encode_block(samples: &[RequestSample]) -> Result<Vec<u8>, StoreError> {
    Ok(ColumnarBlock::from_samples(samples)?.encode())
}

pub fn decode_block(bytes: &[u8]) -> Result<Vec<RequestSample>, StoreError> {
    ColumnarBlock::decode(bytes)?.to_samples()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteSummary {
    pub bytes_written: u64,
    pub sample_count: usize,
}

pub fn write_block(samples: &[RequestSample], path: &Path) -> Result<WriteSummary, StoreError> {
    let bytes = encode_block(samples)?;
    fs::write(path, &bytes)?;
    Ok(WriteSummary {
        bytes_written: bytes.len() as u64,
        sample_count: samples.len(),
    })
}

pub fn read_block(path: &Path) -> Result<Vec<RequestSample>, StoreError> {
    decode_block(&fs::read(path)?)
}

/// Encodes impression rows with the same primitives as the ROO block.
pub fn encode_impressions(rows: &[ImpressionSample]) -> Result<Vec<u8>, StoreError> {
    let mut w = BlockWriter::new(IMPRESSION_MAGIC, rows.len(), 0);
    let Some(first) = rows.first() else {
        let none: [FeatureId; 0] = [];
        for _ in 0..3 {
            w.ids(none.iter());
        }
        return Ok(w.finish());
    };
    for r in rows {
        if !(r.dense_features.keys().eq(first.dense_features.keys())
            && r.idlist_features.keys().eq(first.idlist_features.keys())
            && r.idscorelist_features.keys().eq(first.idscorelist_features.keys()))
        {
            return Err(StoreError::MixedSchema {
                request_id: r.request_id,
            });
        }
    }
    w.ids(first.dense_features.keys());
    w.ids(first.idlist_features.keys());
    w.ids(first.idscorelist_features.keys());
    w.column();
    w.u64s(&rows.iter().map(|r| r.request_id).collect::<Vec<_>>());
    w.column();
    w.u64s(&rows.iter().map(|r| r.user_id).collect::<Vec<_>>());
    w.column();
    w.u64s(&rows.iter().map(|r| r.item_id).collect::<Vec<_>>());
    w.column();
    w.u32s(&rows.iter().map(|r| len_u32(r.conversions.len())).collect::<Vec<_>>());
    w.u32s(
        &rows
            .iter()
            .flat_map(|r| r.conversions.iter().map(|l| l.0))
            .collect::<Vec<_>>(),
    );
    for id in first.dense_features.keys() {
        w.column();
        w.f32s(&rows.iter().map(|r| r.dense_features[id]).collect::<Vec<_>>());
    }
    for id in first.idlist_features.keys() {
        w.column();
        w.u32s(
            &rows
                .iter()
                .map(|r| len_u32(r.idlist_features[id].len()))
                .collect::<Vec<_>>(),
        );
        w.u64s(
            &rows
                .iter()
                .flat_map(|r| r.idlist_features[id].iter().copied())
                .collect::<Vec<_>>(),
        );
    }
    for id in first.idscorelist_features.keys() {
        w.column();
        w.u32s(
            &rows
                .iter()
                .map(|r| len_u32(r.idscorelist_features[id].len()))
                .collect::<Vec<_>>(),
        );
        w.u64s(
            &rows
                .iter()
                .flat_map(|r| r.idscorelist_features[id].keys().copied())
                .collect::<Vec<_>>(),
        );
        w.f32s(
            &rows
                .iter()
                .flat_map(|r| r.idscorelist_features[id].values().copied())
                .collect::<Vec<_>>(),
        );
    }
    Ok(w.finish())
}

pub fn decode_impressions(bytes: &[u8]) -> Result<Vec<ImpressionSample>, StoreError> {
    let mut r = BlockReader::open(bytes, IMPRESSION_MAGIC)?;
    let n = r.count_a;
    let dense_ids = r.ids()?;
    let idlist_ids = r.ids()?;
    let score_ids = r.ids()?;
    let mut rows: Vec<ImpressionSample> = (0..n).map(|_| ImpressionSample::default()).collect();
    if n == 0 && dense_ids.is_empty() && idlist_ids.is_empty() && score_ids.is_empty() {
        r.finish()?;
        return Ok(rows);
    }
    r.column()?;
    for (row, v) in rows.iter_mut().zip(r.u64s(n)?) {
        row.request_id = v;
    }
    r.column()?;
    for (row, v) in rows.iter_mut().zip(r.u64s(n)?) {
        row.user_id = v;
    }
    r.column()?;
    for (row, v) in rows.iter_mut().zip(r.u64s(n)?) {
        row.item_id = v;
    }
    r.column()?;
    let lengths = r.u32s(n)?;
    let values = r.u32s(sum_lengths(&lengths))?;
    let mut off = 0;
    for (row, &len) in rows.iter_mut().zip(&lengths) {
        let len = len as usize;
        row.conversions = values[off..off + len].iter().map(|&l| LabelId(l)).collect();
        off += len;
    }
    for id in dense_ids {
        r.column()?;
        for (row, v) in rows.iter_mut().zip(r.f32s(n)?) {
            row.dense_features.insert(id, v);
        }
    }
    for id in idlist_ids {
        r.column()?;
        let lengths = r.u32s(n)?;
        let values = r.u64s(sum_lengths(&lengths))?;
        let mut off = 0;
        for (row, &len) in rows.iter_mut().zip(&lengths) {
            let len = len as usize;
            row.idlist_features.insert(id, values[off..off + len].to_vec());
            off += len;
        }
    }
    for id in score_ids {
        r.column()?;
        let lengths = r.u32s(n)?;
        let total = sum_lengths(&lengths);
        let keys = r.u64s(total)?;
        let scores = r.f32s(total)?;
        let mut off = 0;
        for (row, &len) in rows.iter_mut().zip(&lengths) {
            let len = len as usize;
            let m = keys[off..off + len]
                .iter()
                .copied()
                .zip(scores[off..off + len].iter().copied())
                .collect();
            row.idscorelist_features.insert(id, m);
            off += len;
        }
    }
    r.finish()?;
    Ok(rows)
}

pub fn write_impressions(rows: &[ImpressionSample], path: &Path) -> Result<WriteSummary, StoreError> {
    let bytes = encode_impressions(rows)?;
    fs::write(path, &bytes)?;
    Ok(WriteSummary {
        bytes_written: bytes.len() as u64,
        sample_count: rows.len(),
    })
}

pub fn read_impressions(path: &Path) -> Result<Vec<ImpressionSample>, StoreError> {
    decode_impressions(&fs::read(path)?)
}

/// Per-sample byte attribution under the shared encodings: `user` is what
/// an impression row repeats for every item (request id, user id, RO
/// features); `items` is the summed per-item payload (item id, labels,
/// NRO features).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleBytes {
    pub user: u64,
    pub items: u64,
}

pub fn sample_bytes(s: &RequestSample) -> SampleBytes {
    let ro = 16 + 4 * s.ro_dense.len() as u64 + s.ro_idlist.values().map(|v| 4 + 8 * v.len() as u64).sum::<u64>();
    let k = s.items.len() as u64;
    let labels: u64 = s.conversions.iter().map(|c| 4 + 4 * c.len() as u64).sum();
    let nro = 8 * k
        + labels
        + 4 * k * s.nro_dense.len() as u64
        + s.nro_idlist
            .values()
            .flat_map(|lists| lists.iter())
            .map(|v| 4 + 8 * v.len() as u64)
            .sum::<u64>();
    SampleBytes { user: ro, items: nro }
}

fn header_bytes(n_feature_groups: usize, n_features: usize, n_columns: usize) -> u64 {
    (PREAMBLE + 4 * n_feature_groups + 8 * n_features + 4 + 8 * n_columns + TRAILER) as u64
}

/// Size the impression-level block of `samples` would occupy, computed from
/// the byte attribution without materializing the rows.
pub fn impression_encoded_len(samples: &[RequestSample]) -> u64 {
    let Some(first) = samples.first() else {
        return header_bytes(3, 0, 0);
    };
    let dense = first.ro_dense.len() + first.nro_dense.len();
    let idlist = first.ro_idlist.len() + first.nro_idlist.len();
    let body: u64 = samples
        .iter()
        .map(|s| {
            let b = sample_bytes(s);
            s.items.len() as u64 * b.user + b.items
        })
        .sum();
    header_bytes(3, dense + idlist, 4 + dense + idlist) + body
}

/// Byte comparison of the ROO block against the impression-level block
/// holding the same data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub sample_count: usize,
    pub impression_count: usize,
    pub roo_bytes: u64,
    pub impression_bytes: u64,
    pub ro_byte_share: f64,
    pub mean_impressions_per_request: f64,
    pub implied_volume_increase: f64,
}

pub fn measure_footprint(samples: &[RequestSample]) -> Result<FootprintReport, StoreError> {
    if samples.is_empty() {
        return Err(StoreError::Empty);
    }
    let roo_bytes = encode_block(samples)?.len() as u64;
    let impressions: Vec<ImpressionSample> = samples.iter().flat_map(expand_unchecked).collect();
    let impression_bytes = encode_impressions(&impressions)?.len() as u64;

    let (mut user, mut per_item) = (0f64, 0f64);
    for s in samples {
        let b = sample_bytes(s);
        user += b.user as f64;
        per_item += b.items as f64 / s.items.len() as f64;
    }
    Ok(FootprintReport {
        sample_count: samples.len(),
        impression_count: impressions.len(),
        roo_bytes,
        impression_bytes,
        ro_byte_share: user / (user + per_item),
        mean_impressions_per_request: impressions.len() as f64 / samples.len() as f64,
        implied_volume_increase: impression_bytes as f64 / roo_bytes as f64 - 1.0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoReport {
    pub roo_io_bytes: u64,
    pub impression_io_bytes: u64,
}

/// Expansion adapter over a stored block: yields impression rows lazily,
/// one request at a time.
#[derive(Debug)]
pub struct ExpandedBlock {
    samples: std::vec::IntoIter<RequestSample>,
    pending: VecDeque<ImpressionSample>,
}

impl Iterator for ExpandedBlock {
    type Item = ImpressionSample;

    fn next(&mut self) -> Option<ImpressionSample> {
        loop {
            if let Some(row) = self.pending.pop_front() {
                return Some(row);
            }
            let s = self.samples.next()?;
            self.pending.extend(expand_unchecked(&s));
        }
    }
}

pub fn expand_block(path: &Path) -> Result<(ExpandedBlock, IoReport), StoreError> {
    let bytes = fs::read(path)?;
    let samples = decode_block(&bytes)?;
    let report = IoReport {
        roo_io_bytes: bytes.len() as u64,
        impression_io_bytes: impression_encoded_len(&samples),
    };
    Ok((
        ExpandedBlock {
            samples: samples.into_iter(),
            pending: VecDeque::new(),
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(rid: u64, k: usize) -> RequestSample {
        RequestSample {
            request_id: rid,
            user_id: rid * 3,
            items: (0..k as u64).map(|i| 100 + i).collect(),
            conversions: (0..k)
                .map(|i| if i % 2 == 0 { vec![LabelId(1)] } else { vec![] })
                .collect(),
            ro_dense: [(FeatureId(1), 0.25)].into(),
            ro_idlist: [(FeatureId(2), vec![5, 6, 7])].into(),
            nro_dense: [(FeatureId(3), (0..k).map(|i| i as f32).collect())].into(),
            nro_idlist: [(FeatureId(4), (0..k).map(|i| vec![i as u64; i]).collect())].into(),
        }
    }

    #[test]
    fn empty_block_is_header_only() {
        let bytes = encode_block(&[]).unwrap();
        assert_eq!(bytes.len() as u64, header_bytes(4, 0, 5));
        assert!(decode_block(&bytes).unwrap().is_empty());
    }

    #[test]
    fn single_item_block_has_one_impression() {
        let block = ColumnarBlock::from_samples(&[sample(1, 1)]).unwrap();
        assert_eq!(block.impressions_per_sample, vec![1]);
        let back = decode_block(&block.encode()).unwrap();
        assert_eq!(back, vec![sample(1, 1)]);
    }

    #[test]
    fn round_trip_and_determinism() {
        let samples: Vec<_> = (1..20).map(|i| sample(i, (i % 5 + 1) as usize)).collect();
        let a = encode_block(&samples).unwrap();
        let b = encode_block(&samples).unwrap();
        assert_eq!(a, b);
        assert_eq!(decode_block(&a).unwrap(), samples);
    }

    #[test]
    fn mixed_feature_sets_are_rejected() {
        let mut other = sample(2, 2);
        other.ro_dense.insert(FeatureId(9), 1.0);
        assert!(matches!(
            encode_block(&[sample(1, 2), other]),
            Err(StoreError::MixedSchema { request_id: 2 })
        ));
    }

    #[test]
    fn bad_magic_truncation_and_checksum_are_distinct() {
        let bytes = encode_block(&[sample(1, 3)]).unwrap();

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_block(&magic), Err(StoreError::BadMagic(_))));

        let truncated = &bytes[..bytes.len() - 10];
        assert!(matches!(decode_block(truncated), Err(StoreError::Truncated { .. })));

        let mut flipped = bytes.clone();
        flipped[30] ^= 0x40;
        assert!(matches!(
            decode_block(&flipped),
            Err(StoreError::ChecksumMismatch { .. })
        ));

        assert!(matches!(decode_block(&bytes[..2]), Err(StoreError::Truncated { .. })));
        assert!(matches!(
            decode_impressions(&bytes),
            Err(StoreError::BadMagic(m)) if &m == ROO_MAGIC
        ));
    }

    #[test]
    fn impression_block_round_trips_with_score_lists() {
        let mut rows = expand_request_sample(&sample(4, 3)).unwrap();
        for (i, r) in rows.iter_mut().enumerate() {
            r.idscorelist_features
                .insert(FeatureId(8), [(i as u64, 0.5), (9, 1.5)].into());
        }
        let bytes = encode_impressions(&rows).unwrap();
        assert_eq!(decode_impressions(&bytes).unwrap(), rows);
        assert!(decode_impressions(&encode_impressions(&[]).unwrap())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn analytic_impression_length_matches_encoder() {
        let samples: Vec<_> = (1..30).map(|i| sample(i, (i % 7 + 1) as usize)).collect();
        let rows: Vec<_> = samples.iter().flat_map(expand_unchecked).collect();
        assert_eq!(
            impression_encoded_len(&samples),
            encode_impressions(&rows).unwrap().len() as u64
        );
        assert_eq!(
            impression_encoded_len(&[]),
            encode_impressions(&[]).unwrap().len() as u64
        );
    }

    #[test]
    fn roo_length_follows_byte_model() {
        let samples: Vec<_> = (1..30).map(|i| sample(i, (i % 7 + 1) as usize)).collect();
        let body: u64 = samples
            .iter()
            .map(|s| {
                let b = sample_bytes(s);
                b.user + 4 + b.items
            })
            .sum();
        // 4 groups, 4 features, 5 fixed columns + 4 feature columns
        assert_eq!(
            encode_block(&samples).unwrap().len() as u64,
            header_bytes(4, 4, 9) + body
        );
    }

    #[test]
    fn footprint_needs_samples() {
        assert!(matches!(measure_footprint(&[]), Err(StoreError::Empty)));
    }

    #[test]
    fn footprint_grows_with_impressions() {
        let one = measure_footprint(&[sample(1, 1)]).unwrap();
        let many = measure_footprint(&[sample(1, 6)]).unwrap();
        assert!(many.implied_volume_increase > one.implied_volume_increase);
        assert_eq!(many.mean_impressions_per_request, 6.0);
    }
}
