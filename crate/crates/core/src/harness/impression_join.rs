//! Reference impression-level joiner: one buffer per (user, request,
//! item), opened by the impression and closed `window_ms` later.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::joiner::{Event, EventKind, JoinerConfig};
use crate::schema::{ImpressionSample, LabelId};

type Key = (u64, u64, u64);

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpressionJoinMetrics {
    pub samples_published: u64,
    pub late_events_dropped: u64,
    pub orphan_events_dropped: u64,
    pub duplicate_impressions: u64,
    pub malformed: u64,
}

#[derive(Clone, Debug, Default)]
pub struct ImpressionJoinOutput {
    pub rows: Vec<ImpressionSample>,
    pub metrics: ImpressionJoinMetrics,
}

struct Pending {
    row: ImpressionSample,
    labels: BTreeSet<LabelId>,
}

fn close(p: Pending) -> ImpressionSample {
    let mut row = p.row;
    row.conversions = p.labels.into_iter().collect();
    row
}

struct Buffers {
    open: BTreeMap<Key, Pending>,
    deadlines: BTreeSet<(i64, Key)>,
    closed: BTreeSet<Key>,
}

impl Buffers {
    /// Publishes every buffer whose deadline is at or before `now`; all
    /// of them when `now` is `None`.
    fn expire(&mut self, now: Option<i64>, out: &mut ImpressionJoinOutput) {
        while let Some(&(t, key)) = self.deadlines.first() {
            if now.is_some_and(|now| t > now) {
                break;
            }
            self.deadlines.pop_first();
            let p = self.open.remove(&key).expect("deadline of an open key");
            self.closed.insert(key);
            out.rows.push(close(p));
            out.metrics.samples_published += 1;
        }
    }
}

/// Rows come out in close order: by deadline, then (user, request, item).
pub fn join_impressions(events: &[Event], config: &JoinerConfig) -> ImpressionJoinOutput {
    let window = config.window_ms;
    let mut b = Buffers {
        open: BTreeMap::new(),
        deadlines: BTreeSet::new(),
        closed: BTreeSet::new(),
    };
    let mut out = ImpressionJoinOutput::default();

    for e in events {
        b.expire(Some(e.event_time), &mut out);
        if e.check().is_err() {
            out.metrics.malformed += 1;
            continue;
        }
        let key = (e.user_id, e.request_id, e.item_id);
        if b.closed.contains(&key) {
            out.metrics.late_events_dropped += 1;
            continue;
        }
        match (e.kind, b.open.get_mut(&key)) {
            (EventKind::Impression, Some(_)) => out.metrics.duplicate_impressions += 1,
            (EventKind::Impression, None) => {
                let ro = e.ro_payload.clone().unwrap_or_default();
                let nro = e.nro_payload.clone().unwrap_or_default();
                let mut row = ImpressionSample {
                    request_id: e.request_id,
                    user_id: e.user_id,
                    item_id: e.item_id,
                    dense_features: ro.dense,
                    idlist_features: ro.idlist,
                    ..Default::default()
                };
                row.dense_features.extend(nro.dense);
                row.idlist_features.extend(nro.idlist);
                b.open.insert(
                    key,
                    Pending {
                        row,
                        labels: BTreeSet::new(),
                    },
                );
                b.deadlines.insert((e.event_time + window, key));
            }
            (EventKind::Conversion, Some(p)) => p.labels.extend(e.item_labels.iter().copied()),
            (EventKind::Conversion, None) => out.metrics.orphan_events_dropped += 1,
        }
    }
    b.expire(None, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::joiner::FeaturePayload;
    use crate::schema::FeatureId;

    fn imp(t: i64, req: u64, item: u64) -> Event {
        Event {
            event_time: t,
            user_id: 1,
            request_id: req,
            item_id: item,
            kind: EventKind::Impression,
            item_labels: vec![],
            ro_payload: Some(FeaturePayload {
                dense: [(FeatureId(1), 0.5)].into(),
                idlist: Default::default(),
            }),
            nro_payload: Some(FeaturePayload {
                dense: [(FeatureId(2), item as f32)].into(),
                idlist: Default::default(),
            }),
            expected_events: None,
        }
    }

    fn conv(t: i64, req: u64, item: u64, label: u32) -> Event {
        Event {
            kind: EventKind::Conversion,
            item_labels: vec![LabelId(label)],
            ro_payload: None,
            nro_payload: None,
            ..imp(t, req, item)
        }
    }

    #[test]
    fn joins_per_item_and_drops_late_and_orphans() {
        let cfg = JoinerConfig {
            window_ms: 100,
            ..Default::default()
        };
        let events = [
            imp(0, 1, 10),
            imp(5, 1, 11),
            conv(20, 1, 10, 2),
            conv(21, 1, 10, 1),
            conv(30, 1, 99, 1),
            conv(104, 1, 11, 1),
            conv(120, 1, 10, 1),
        ];
        let out = join_impressions(&events, &cfg);
        assert_eq!(out.rows.len(), 2);
        assert_eq!(out.rows[0].item_id, 10);
        assert_eq!(out.rows[0].conversions, vec![LabelId(1), LabelId(2)]);
        assert_eq!(out.rows[1].conversions, vec![LabelId(1)]);
        assert_eq!(out.rows[0].dense_features.len(), 2);
        assert_eq!(out.metrics.orphan_events_dropped, 1);
        assert_eq!(out.metrics.late_events_dropped, 1);
    }
}
