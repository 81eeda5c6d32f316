//! Label and coverage parity between the request-level join and the
//! impression-level reference join of the same stream.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::Mode;
use crate::schema::{FeatureId, ImpressionSample, LabelId, RequestSample};

use super::pipeline::{load_manifest, read_impression_run, read_roo_run};
use super::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMismatch {
    pub label: LabelId,
    pub roo_only: u64,
    pub impression_only: u64,
    pub union: u64,
    /// Fraction of (request, item, label) triples present on one side only.
    pub mismatch_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub stream_hash: String,
    pub labels: Vec<LabelMismatch>,
    /// Shared (request, item) keys over all keys.
    pub sample_coverage: f64,
    /// Shared feature ids over all feature ids.
    pub feature_coverage: f64,
    pub roo_impressions: u64,
    pub impression_rows: u64,
}

fn parity<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

pub fn audit(roo: &[RequestSample], impression: &[ImpressionSample], stream_hash: &str) -> AuditReport {
    let mut roo_triples = BTreeSet::new();
    let mut roo_keys = BTreeSet::new();
    let mut roo_features = BTreeSet::<FeatureId>::new();
    for s in roo {
        for (pos, &item) in s.items.iter().enumerate() {
            roo_keys.insert((s.request_id, item));
            for &l in &s.conversions[pos] {
                roo_triples.insert((l, s.request_id, item));
            }
        }
        roo_features.extend(s.ro_dense.keys());
        roo_features.extend(s.ro_idlist.keys());
        roo_features.extend(s.nro_dense.keys());
        roo_features.extend(s.nro_idlist.keys());
    }
    let mut imp_triples = BTreeSet::new();
    let mut imp_keys = BTreeSet::new();
    let mut imp_features = BTreeSet::<FeatureId>::new();
    for r in impression {
        imp_keys.insert((r.request_id, r.item_id));
        for &l in &r.conversions {
            imp_triples.insert((l, r.request_id, r.item_id));
        }
        imp_features.extend(r.dense_features.keys());
        imp_features.extend(r.idlist_features.keys());
        imp_features.extend(r.idscorelist_features.keys());
    }

    let labels: BTreeSet<LabelId> = roo_triples.iter().chain(&imp_triples).map(|t| t.0).collect();
    let labels = labels
        .into_iter()
        .map(|label| {
            let count = |a: &BTreeSet<(LabelId, u64, u64)>, b: &BTreeSet<(LabelId, u64, u64)>| {
                a.iter().filter(|t| t.0 == label && !b.contains(t)).count() as u64
            };
            let roo_only = count(&roo_triples, &imp_triples);
            let impression_only = count(&imp_triples, &roo_triples);
            let both = roo_triples
                .iter()
                .filter(|t| t.0 == label && imp_triples.contains(t))
                .count() as u64;
            let union = roo_only + impression_only + both;
            LabelMismatch {
                label,
                roo_only,
                impression_only,
                union,
                mismatch_rate: (roo_only + impression_only) as f64 / union as f64,
            }
        })
        .collect();

    AuditReport {
        stream_hash: stream_hash.to_string(),
        labels,
        sample_coverage: parity(&roo_keys, &imp_keys),
        feature_coverage: parity(&roo_features, &imp_features),
        roo_impressions: roo.iter().map(|s| s.items.len() as u64).sum(),
        impression_rows: impression.len() as u64,
    }
}

/// Audits two run directories; they must be one ROO and one impression
/// run over the same stream.
pub fn audit_runs(roo_dir: &Path, impression_dir: &Path) -> Result<AuditReport, HarnessError> {
    let a = load_manifest(roo_dir)?;
    let b = load_manifest(impression_dir)?;
    if a.stream_hash != b.stream_hash {
        return Err(HarnessError::StreamMismatch(a.stream_hash, b.stream_hash));
    }
    if a.mode != Mode::Roo || b.mode != Mode::Impression {
        return Err(HarnessError::Config(
            "audit needs a roo run and an impression run".into(),
        ));
    }
    let roo = read_roo_run(roo_dir, &a)?;
    let imp = read_impression_run(impression_dir, &b)?;
    Ok(audit(&roo, &imp, &a.stream_hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::expand_request_sample;

    fn sample(rid: u64) -> RequestSample {
        RequestSample {
            request_id: rid,
            user_id: 1,
            items: vec![1, 2],
            conversions: vec![vec![LabelId(1)], vec![LabelId(1), LabelId(2)]],
            ro_dense: [(FeatureId(1), 0.0)].into(),
            ..Default::default()
        }
    }

    #[test]
    fn identical_sides_have_zero_mismatch() {
        let roo = vec![sample(1), sample(2)];
        let imp: Vec<_> = roo.iter().flat_map(|s| expand_request_sample(s).unwrap()).collect();
        let r = audit(&roo, &imp, "h");
        assert!(r.labels.iter().all(|l| l.mismatch_rate == 0.0));
        assert_eq!(r.labels.len(), 2);
        assert_eq!((r.sample_coverage, r.feature_coverage), (1.0, 1.0));
    }

    #[test]
    fn one_lost_label_counts_once() {
        let roo = vec![sample(1)];
        let mut imp: Vec<_> = expand_request_sample(&roo[0]).unwrap();
        imp[1].conversions = vec![LabelId(1)];
        let r = audit(&roo, &imp, "h");
        assert_eq!(r.labels[0].mismatch_rate, 0.0);
        assert_eq!(r.labels[1].roo_only, 1);
        assert_eq!(r.labels[1].mismatch_rate, 1.0);
    }

    #[test]
    fn empty_sides_are_at_parity() {
        let r = audit(&[], &[], "h");
        assert!(r.labels.is_empty());
        assert_eq!(r.sample_coverage, 1.0);
    }
}
