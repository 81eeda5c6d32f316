//! Impression-level and request-level sample formats.
//!
//! A [`RequestSample`] carries one copy of the request-only (RO, user side)
//! features and per-item arrays of the non-request-only (NRO, item side)
//! features and labels. An [`ImpressionSample`] is the traditional flat row:
//! one item, with user features repeated on every row.
//!
//! Maps are `BTreeMap`s keyed by [`FeatureId`], so the serde encoding of a
//! value is already canonical: two samples are equal iff their canonical
//! JSON strings are equal.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureId(pub u64);

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{}", self.0)
    }
}

/// Label identifier (conversion, engagement, duration bucket, ...).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelId(pub u32);

/// Which of the four feature groups a feature belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSide {
    RoDense,
    RoIdList,
    NroDense,
    NroIdList,
}

impl FeatureSide {
    pub fn is_ro(self) -> bool {
        matches!(self, FeatureSide::RoDense | FeatureSide::RoIdList)
    }
}

impl fmt::Display for FeatureSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureSide::RoDense => "ro_dense",
            FeatureSide::RoIdList => "ro_idlist",
            FeatureSide::NroDense => "nro_dense",
            FeatureSide::NroIdList => "nro_idlist",
        };
        f.write_str(s)
    }
}

/// Clamp-then-standardize parameters for one dense column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub mean: f32,
    pub std: f32,
    pub lo: f32,
    pub hi: f32,
}

impl NormParams {
    pub const IDENTITY: NormParams = NormParams {
        mean: 0.0,
        std: 1.0,
        lo: f32::NEG_INFINITY,
        hi: f32::INFINITY,
    };
}

impl Default for NormParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub embedding_dim: u32,
    pub norm: NormParams,
    pub max_seq_len: u32,
}

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("feature {0} registered in more than one group")]
    OverlappingFeature(FeatureId),
    #[error("invalid sample: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("impressions of request {request_id} disagree on {what}")]
    Inconsistent { request_id: u64, what: String },
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// The RO/NRO split of every feature known to a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureRegistry {
    ro_dense: BTreeSet<FeatureId>,
    ro_idlist: BTreeSet<FeatureId>,
    nro_dense: BTreeSet<FeatureId>,
    nro_idlist: BTreeSet<FeatureId>,
    meta: BTreeMap<FeatureId, FeatureMeta>,
}

impl FeatureRegistry {
    pub fn new(
        ro_dense: impl IntoIterator<Item = FeatureId>,
        ro_idlist: impl IntoIterator<Item = FeatureId>,
        nro_dense: impl IntoIterator<Item = FeatureId>,
        nro_idlist: impl IntoIterator<Item = FeatureId>,
    ) -> Result<Self, SchemaError> {
        let mut seen = HashSet::new();
        let mut collect = |it: &mut dyn Iterator<Item = FeatureId>| {
            let mut set = BTreeSet::new();
            for id in it {
                if !seen.insert(id) {
                    return Err(SchemaError::OverlappingFeature(id));
                }
                set.insert(id);
            }
            Ok(set)
        };
        Ok(Self {
            ro_dense: collect(&mut ro_dense.into_iter())?,
            ro_idlist: collect(&mut ro_idlist.into_iter())?,
            nro_dense: collect(&mut nro_dense.into_iter())?,
            nro_idlist: collect(&mut nro_idlist.into_iter())?,
            meta: BTreeMap::new(),
        })
    }

    pub fn with_meta(mut self, id: FeatureId, meta: FeatureMeta) -> Self {
        self.meta.insert(id, meta);
        self
    }

    pub fn meta(&self, id: FeatureId) -> Option<&FeatureMeta> {
        self.meta.get(&id)
    }

    pub fn side(&self, id: FeatureId) -> Option<FeatureSide> {
        if self.ro_dense.contains(&id) {
            Some(FeatureSide::RoDense)
        } else if self.ro_idlist.contains(&id) {
            Some(FeatureSide::RoIdList)
        } else if self.nro_dense.contains(&id) {
            Some(FeatureSide::NroDense)
        } else if self.nro_idlist.contains(&id) {
            Some(FeatureSide::NroIdList)
        } else {
            None
        }
    }

    pub fn ro_dense(&self) -> &BTreeSet<FeatureId> {
        &self.ro_dense
    }

    pub fn ro_idlist(&self) -> &BTreeSet<FeatureId> {
        &self.ro_idlist
    }

    pub fn nro_dense(&self) -> &BTreeSet<FeatureId> {
        &self.nro_dense
    }

    pub fn nro_idlist(&self) -> &BTreeSet<FeatureId> {
        &self.nro_idlist
    }
}

/// Table-1 style row: one item, user features repeated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImpressionSample {
    pub request_id: u64,
    pub user_id: u64,
    pub item_id: u64,
    pub conversions: Vec<LabelId>,
    pub dense_features: BTreeMap<FeatureId, f32>,
    pub idlist_features: BTreeMap<FeatureId, Vec<u64>>,
    #[serde(default)]
    pub idscorelist_features: BTreeMap<FeatureId, BTreeMap<u64, f32>>,
}

/// Table-2 style row: one request, RO features stored once.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RequestSample {
    pub request_id: u64,
    pub user_id: u64,
    pub items: Vec<u64>,
    pub conversions: Vec<Vec<LabelId>>,
    pub ro_dense: BTreeMap<FeatureId, f32>,
    pub ro_idlist: BTreeMap<FeatureId, Vec<u64>>,
    pub nro_dense: BTreeMap<FeatureId, Vec<f32>>,
    pub nro_idlist: BTreeMap<FeatureId, Vec<Vec<u64>>>,
}

impl RequestSample {
    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("sample serialization is infallible")
    }
}

impl ImpressionSample {
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("sample serialization is infallible")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ViolationKind {
    EmptyItems,
    DuplicateItem {
        item_id: u64,
    },
    LengthMismatch {
        expected: usize,
        actual: usize,
    },
    UnsortedLabels {
        index: usize,
    },
    UnregisteredFeature {
        feature: FeatureId,
    },
    WrongGroup {
        feature: FeatureId,
        registered_as: FeatureSide,
    },
}

/// One broken invariant, naming the offending field and request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub request_id: u64,
    pub field: String,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "request {} field {}: ", self.request_id, self.field)?;
        match &self.kind {
            ViolationKind::EmptyItems => write!(f, "no items"),
            ViolationKind::DuplicateItem { item_id } => write!(f, "duplicate item {item_id}"),
            ViolationKind::LengthMismatch { expected, actual } => {
                write!(f, "length {actual}, expected {expected}")
            }
            ViolationKind::UnsortedLabels { index } => {
                write!(f, "labels at index {index} not strictly ascending")
            }
            ViolationKind::UnregisteredFeature { feature } => {
                write!(f, "feature {feature} is not registered")
            }
            ViolationKind::WrongGroup { feature, registered_as } => {
                write!(f, "feature {feature} is registered as {registered_as}")
            }
        }
    }
}

fn strictly_ascending(labels: &[LabelId]) -> bool {
    labels.windows(2).all(|w| w[0] < w[1])
}

/// Registry-independent invariants: non-empty unique items, aligned lengths,
/// sorted label lists.
fn structural_violations(sample: &RequestSample, out: &mut Vec<Violation>) {
    let rid = sample.request_id;
    let n = sample.items.len();
    if n == 0 {
        out.push(Violation {
            request_id: rid,
            field: "items".into(),
            kind: ViolationKind::EmptyItems,
        });
    }
    let mut seen = HashSet::with_capacity(n);
    for &item in &sample.items {
        if !seen.insert(item) {
            out.push(Violation {
                request_id: rid,
                field: "items".into(),
                kind: ViolationKind::DuplicateItem { item_id: item },
            });
        }
    }
    if sample.conversions.len() != n {
        out.push(Violation {
            request_id: rid,
            field: "conversions".into(),
            kind: ViolationKind::LengthMismatch {
                expected: n,
                actual: sample.conversions.len(),
            },
        });
    }
    for (i, labels) in sample.conversions.iter().enumerate() {
        if !strictly_ascending(labels) {
            out.push(Violation {
                request_id: rid,
                field: "conversions".into(),
                kind: ViolationKind::UnsortedLabels { index: i },
            });
        }
    }
    for (id, values) in &sample.nro_dense {
        if values.len() != n {
            out.push(Violation {
                request_id: rid,
                field: format!("nro_dense[{id}]"),
                kind: ViolationKind::LengthMismatch {
                    expected: n,
                    actual: values.len(),
                },
            });
        }
    }
    for (id, lists) in &sample.nro_idlist {
        if lists.len() != n {
            out.push(Violation {
                request_id: rid,
                field: format!("nro_idlist[{id}]"),
                kind: ViolationKind::LengthMismatch {
                    expected: n,
                    actual: lists.len(),
                },
            });
        }
    }
}

fn check_group<'a>(
    rid: u64,
    field: &str,
    ids: impl Iterator<Item = &'a FeatureId>,
    expected: FeatureSide,
    registry: &FeatureRegistry,
    out: &mut Vec<Violation>,
) {
    for &id in ids {
        match registry.side(id) {
            Some(side) if side == expected => {}
            Some(side) => out.push(Violation {
                request_id: rid,
                field: format!("{field}[{id}]"),
                kind: ViolationKind::WrongGroup {
                    feature: id,
                    registered_as: side,
                },
            }),
            None => out.push(Violation {
                request_id: rid,
                field: format!("{field}[{id}]"),
                kind: ViolationKind::UnregisteredFeature { feature: id },
            }),
        }
    }
}

/// Every invariant of a request-level sample, as data. Empty iff valid.
pub fn validate_request_sample(sample: &RequestSample, registry: &FeatureRegistry) -> Vec<Violation> {
    let mut out = Vec::new();
    structural_violations(sample, &mut out);
    let rid = sample.request_id;
    check_group(
        rid,
        "ro_dense",
        sample.ro_dense.keys(),
        FeatureSide::RoDense,
        registry,
        &mut out,
    );
    check_group(
        rid,
        "ro_idlist",
        sample.ro_idlist.keys(),
        FeatureSide::RoIdList,
        registry,
        &mut out,
    );
    check_group(
        rid,
        "nro_dense",
        sample.nro_dense.keys(),
        FeatureSide::NroDense,
        registry,
        &mut out,
    );
    check_group(
        rid,
        "nro_idlist",
        sample.nro_idlist.keys(),
        FeatureSide::NroIdList,
        registry,
        &mut out,
    );
    out
}

pub fn validate_impression_sample(sample: &ImpressionSample, registry: &FeatureRegistry) -> Vec<Violation> {
    let mut out = Vec::new();
    let rid = sample.request_id;
    if !strictly_ascending(&sample.conversions) {
        out.push(Violation {
            request_id: rid,
            field: "conversions".into(),
            kind: ViolationKind::UnsortedLabels { index: 0 },
        });
    }
    let registered = |id: &FeatureId| registry.side(*id).is_some();
    for id in sample
        .dense_features
        .keys()
        .chain(sample.idlist_features.keys())
        .chain(sample.idscorelist_features.keys())
    {
        if !registered(id) {
            out.push(Violation {
                request_id: rid,
                field: format!("features[{id}]"),
                kind: ViolationKind::UnregisteredFeature { feature: *id },
            });
        }
    }
    out
}

/// Splits a request sample into one impression sample per item, in item
/// order. RO features are copied into every row; NRO features and labels
/// are sliced at the item index.
pub fn expand_request_sample(sample: &RequestSample) -> Result<Vec<ImpressionSample>, SchemaError> {
    let mut violations = Vec::new();
    structural_violations(sample, &mut violations);
    if !violations.is_empty() {
        return Err(SchemaError::Invalid(violations));
    }
    Ok(expand_unchecked(sample))
}

pub(crate) fn expand_unchecked(sample: &RequestSample) -> Vec<ImpressionSample> {
    sample
        .items
        .iter()
        .enumerate()
        .map(|(i, &item_id)| {
            let mut dense_features = sample.ro_dense.clone();
            dense_features.extend(sample.nro_dense.iter().map(|(&id, v)| (id, v[i])));
            let mut idlist_features = sample.ro_idlist.clone();
            idlist_features.extend(sample.nro_idlist.iter().map(|(&id, v)| (id, v[i].clone())));
            ImpressionSample {
                request_id: sample.request_id,
                user_id: sample.user_id,
                item_id,
                conversions: sample.conversions[i].clone(),
                dense_features,
                idlist_features,
                idscorelist_features: BTreeMap::new(),
            }
        })
        .collect()
}

/// Inverse of [`expand_request_sample`]: groups impression rows by
/// request id (first-seen order for both requests and items) and splits
/// features by the registry. Id-score-list features have no request-level
/// column and are rejected.
pub fn group_impressions(
    impressions: &[ImpressionSample],
    registry: &FeatureRegistry,
) -> Result<Vec<RequestSample>, SchemaError> {
    let mut order: Vec<u64> = Vec::new();
    let mut groups: HashMap<u64, Vec<&ImpressionSample>> = HashMap::new();
    for imp in impressions {
        groups
            .entry(imp.request_id)
            .or_insert_with(|| {
                order.push(imp.request_id);
                Vec::new()
            })
            .push(imp);
    }

    let mut out = Vec::with_capacity(order.len());
    for rid in order {
        let rows = &groups[&rid];
        let inconsistent = |what: &str| SchemaError::Inconsistent {
            request_id: rid,
            what: what.to_string(),
        };
        let first = rows[0];
        let mut sample = RequestSample {
            request_id: rid,
            user_id: first.user_id,
            ..Default::default()
        };
        let mut violations = Vec::new();
        for (&id, &v) in &first.dense_features {
            match registry.side(id) {
                Some(FeatureSide::RoDense) => {
                    sample.ro_dense.insert(id, v);
                }
                Some(FeatureSide::NroDense) => {
                    sample.nro_dense.insert(id, Vec::with_capacity(rows.len()));
                }
                side => violations.push(group_violation(rid, "dense_features", id, side)),
            }
        }
        for (&id, v) in &first.idlist_features {
            match registry.side(id) {
                Some(FeatureSide::RoIdList) => {
                    sample.ro_idlist.insert(id, v.clone());
                }
                Some(FeatureSide::NroIdList) => {
                    sample.nro_idlist.insert(id, Vec::with_capacity(rows.len()));
                }
                side => violations.push(group_violation(rid, "idlist_features", id, side)),
            }
        }
        for &id in first.idscorelist_features.keys() {
            violations.push(Violation {
                request_id: rid,
                field: format!("idscorelist_features[{id}]"),
                kind: ViolationKind::UnregisteredFeature { feature: id },
            });
        }
        if !violations.is_empty() {
            return Err(SchemaError::Invalid(violations));
        }

        for row in rows {
            if row.user_id != sample.user_id {
                return Err(inconsistent("user_id"));
            }
            if row.dense_features.len() != first.dense_features.len()
                || row.idlist_features.len() != first.idlist_features.len()
                || !row.idscorelist_features.is_empty()
            {
                return Err(inconsistent("feature set"));
            }
            for (id, &v) in &sample.ro_dense {
                if row.dense_features.get(id).map(|x| x.to_bits()) != Some(v.to_bits()) {
                    return Err(inconsistent(&format!("ro_dense[{id}]")));
                }
            }
            for (id, v) in &sample.ro_idlist {
                if row.idlist_features.get(id) != Some(v) {
                    return Err(inconsistent(&format!("ro_idlist[{id}]")));
                }
            }
            for (id, col) in sample.nro_dense.iter_mut() {
                let v = row
                    .dense_features
                    .get(id)
                    .ok_or_else(|| inconsistent(&format!("nro_dense[{id}]")))?;
                col.push(*v);
            }
            for (id, col) in sample.nro_idlist.iter_mut() {
                let v = row
                    .idlist_features
                    .get(id)
                    .ok_or_else(|| inconsistent(&format!("nro_idlist[{id}]")))?;
                col.push(v.clone());
            }
            sample.items.push(row.item_id);
            sample.conversions.push(row.conversions.clone());
        }
        let violations = validate_request_sample(&sample, registry);
        if !violations.is_empty() {
            return Err(SchemaError::Invalid(violations));
        }
        out.push(sample);
    }
    Ok(out)
}

fn group_violation(rid: u64, field: &str, id: FeatureId, side: Option<FeatureSide>) -> Violation {
    Violation {
        request_id: rid,
        field: format!("{field}[{id}]"),
        kind: match side {
            Some(registered_as) => ViolationKind::WrongGroup {
                feature: id,
                registered_as,
            },
            None => ViolationKind::UnregisteredFeature { feature: id },
        },
    }
}
