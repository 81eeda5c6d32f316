//! Streaming request-level join.
//!
//! Events are buffered per user in a single open [`RequestJoinRecord`]. A
//! window closes and publishes a [`RequestSample`] when
//!
//! * an event for a different request of the same user arrives,
//! * the record reaches the engagement threshold (distinct impressions),
//! * the dynamic trigger fires (all events the generator declared for the
//!   request have arrived), or
//! * the fixed window `open_time + window_ms` elapses ([`JoinerState::tick`]).
//!
//! Events for a request whose window already closed are dropped and counted.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{FeatureId, LabelId, RequestSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Impression,
    Conversion,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeaturePayload {
    #[serde(default)]
    pub dense: BTreeMap<FeatureId, f32>,
    #[serde(default)]
    pub idlist: BTreeMap<FeatureId, Vec<u64>>,
}

impl FeaturePayload {
    pub fn byte_size(&self) -> usize {
        self.dense.len() * 4 + self.idlist.values().map(|v| 4 + 8 * v.len()).sum::<usize>()
    }
}

/// One logged user-item interaction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub event_time: i64,
    pub user_id: u64,
    pub request_id: u64,
    pub item_id: u64,
    pub kind: EventKind,
    #[serde(default)]
    pub item_labels: Vec<LabelId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ro_payload: Option<FeaturePayload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nro_payload: Option<FeaturePayload>,
    /// Total events the producer will emit for this request; drives the
    /// dynamic close trigger.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_events: Option<u32>,
}

impl Event {
    pub fn check(&self) -> Result<(), JoinError> {
        let malformed = |reason: &str| JoinError::Malformed {
            user_id: self.user_id,
            request_id: self.request_id,
            item_id: self.item_id,
            reason: reason.to_string(),
        };
        match self.kind {
            EventKind::Impression => {
                if !self.item_labels.is_empty() {
                    return Err(malformed("impression carries labels"));
                }
                if self.ro_payload.is_none() || self.nro_payload.is_none() {
                    return Err(malformed("impression without feature payloads"));
                }
            }
            EventKind::Conversion => {
                if self.item_labels.is_empty() {
                    return Err(malformed("conversion without labels"));
                }
                if self.ro_payload.is_some() || self.nro_payload.is_some() {
                    return Err(malformed("conversion carries feature payloads"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum JoinError {
    #[error("malformed event (user {user_id}, request {request_id}, item {item_id}): {reason}")]
    Malformed {
        user_id: u64,
        request_id: u64,
        item_id: u64,
        reason: String,
    },
    #[error("invalid joiner config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LateEventPolicy {
    #[default]
    Drop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JoinerConfig {
    pub window_ms: i64,
    pub engagement_threshold: u32,
    pub dynamic_trigger: bool,
    pub late_event_policy: LateEventPolicy,
}

impl Default for JoinerConfig {
    fn default() -> Self {
        Self {
            window_ms: 30 * 60 * 1000,
            engagement_threshold: 64,
            dynamic_trigger: false,
            late_event_policy: LateEventPolicy::Drop,
        }
    }
}

impl JoinerConfig {
    pub fn validate(&self) -> Result<(), JoinError> {
        if self.window_ms <= 0 {
            return Err(JoinError::Config("window_ms must be > 0".into()));
        }
        if self.engagement_threshold < 1 {
            return Err(JoinError::Config("engagement_threshold must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloseReason {
    NewRequest,
    EngagementThreshold,
    DynamicTrigger,
    WindowTimeUp,
    Drain,
}

/// Join buffer for one (user, request). Holds a single copy of the RO
/// features however many impressions accumulate.
#[derive(Clone, Debug)]
pub struct RequestJoinRecord {
    pub user_id: u64,
    pub request_id: u64,
    pub impressions: Vec<u64>,
    pub conversions: BTreeMap<u64, BTreeSet<LabelId>>,
    pub ro_float: BTreeMap<FeatureId, f32>,
    pub ro_idlist: BTreeMap<FeatureId, Vec<u64>>,
    pub nro_float: BTreeMap<u64, BTreeMap<FeatureId, f32>>,
    pub nro_idlist: BTreeMap<u64, BTreeMap<FeatureId, Vec<u64>>>,
    pub open_time: i64,
    pub first_event_time: i64,
    pub last_event_time: i64,
    pub last_impression_time: i64,
    events_seen: u32,
    expected_events: Option<u32>,
}

impl RequestJoinRecord {
    fn open(e: &Event) -> Self {
        let ro = e.ro_payload.clone().unwrap_or_default();
        let mut rec = Self {
            user_id: e.user_id,
            request_id: e.request_id,
            impressions: Vec::new(),
            conversions: BTreeMap::new(),
            ro_float: ro.dense,
            ro_idlist: ro.idlist,
            nro_float: BTreeMap::new(),
            nro_idlist: BTreeMap::new(),
            open_time: e.event_time,
            first_event_time: e.event_time,
            last_event_time: e.event_time,
            last_impression_time: e.event_time,
            events_seen: 0,
            expected_events: e.expected_events,
        };
        rec.add_impression(e);
        rec
    }

    fn contains(&self, item: u64) -> bool {
        self.nro_float.contains_key(&item)
    }

    fn add_impression(&mut self, e: &Event) {
        let nro = e.nro_payload.clone().unwrap_or_default();
        self.impressions.push(e.item_id);
        self.nro_float.insert(e.item_id, nro.dense);
        self.nro_idlist.insert(e.item_id, nro.idlist);
        self.last_impression_time = self.last_impression_time.max(e.event_time);
    }

    fn touch(&mut self, e: &Event) {
        self.events_seen += 1;
        self.first_event_time = self.first_event_time.min(e.event_time);
        self.last_event_time = self.last_event_time.max(e.event_time);
        if self.expected_events.is_none() {
            self.expected_events = e.expected_events;
        }
    }

    /// Bytes of RO payload held by this record.
    pub fn ro_bytes(&self) -> usize {
        self.ro_float.len() * 4 + self.ro_idlist.values().map(|v| 4 + 8 * v.len()).sum::<usize>()
    }

    fn into_sample(self) -> RequestSample {
        let mut dense_ids = BTreeSet::new();
        let mut idlist_ids = BTreeSet::new();
        for m in self.nro_float.values() {
            dense_ids.extend(m.keys().copied());
        }
        for m in self.nro_idlist.values() {
            idlist_ids.extend(m.keys().copied());
        }
        // An item missing an NRO feature gets 0.0 / an empty list so the
        // per-item columns stay aligned.
        let nro_dense = dense_ids
            .into_iter()
            .map(|id| {
                let col = self
                    .impressions
                    .iter()
                    .map(|item| self.nro_float[item].get(&id).copied().unwrap_or(0.0))
                    .collect();
                (id, col)
            })
            .collect();
        let nro_idlist = idlist_ids
            .into_iter()
            .map(|id| {
                let col = self
                    .impressions
                    .iter()
                    .map(|item| self.nro_idlist[item].get(&id).cloned().unwrap_or_default())
                    .collect();
                (id, col)
            })
            .collect();
        let conversions = self
            .impressions
            .iter()
            .map(|item| {
                self.conversions
                    .get(item)
                    .map(|s| s.iter().copied().collect())
                    .unwrap_or_default()
            })
            .collect();
        RequestSample {
            request_id: self.request_id,
            user_id: self.user_id,
            items: self.impressions,
            conversions,
            ro_dense: self.ro_float,
            ro_idlist: self.ro_idlist,
            nro_dense,
            nro_idlist,
        }
    }
}

/// Counter snapshot. Means are over published samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JoinerMetrics {
    pub samples_published: u64,
    pub late_events_dropped: u64,
    pub orphan_events_dropped: u64,
    pub mean_close_latency_ms: f64,
    pub mean_intra_request_gap_ms: f64,
    pub mean_landing_latency_ms: f64,
    pub closes_by_reason: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, Default)]
struct MetricSums {
    samples_published: u64,
    late_events_dropped: u64,
    orphan_events_dropped: u64,
    close_latency: i128,
    intra_gap: i128,
    landing_latency: i128,
    closes_by_reason: BTreeMap<String, u64>,
}

impl MetricSums {
    fn merge(&mut self, other: &MetricSums) {
        self.samples_published += other.samples_published;
        self.late_events_dropped += other.late_events_dropped;
        self.orphan_events_dropped += other.orphan_events_dropped;
        self.close_latency += other.close_latency;
        self.intra_gap += other.intra_gap;
        self.landing_latency += other.landing_latency;
        for (k, v) in &other.closes_by_reason {
            *self.closes_by_reason.entry(k.clone()).or_default() += v;
        }
    }

    fn snapshot(&self) -> JoinerMetrics {
        let mean = |sum: i128| {
            if self.samples_published == 0 {
                0.0
            } else {
                sum as f64 / self.samples_published as f64
            }
        };
        JoinerMetrics {
            samples_published: self.samples_published,
            late_events_dropped: self.late_events_dropped,
            orphan_events_dropped: self.orphan_events_dropped,
            mean_close_latency_ms: mean(self.close_latency),
            mean_intra_request_gap_ms: mean(self.intra_gap),
            mean_landing_latency_ms: mean(self.landing_latency),
            closes_by_reason: self.closes_by_reason.clone(),
        }
    }
}

/// A published sample with the bookkeeping of its window.
#[derive(Clone, Debug, PartialEq)]
pub struct Published {
    pub sample: RequestSample,
    pub reason: CloseReason,
    pub open_time: i64,
    pub close_time: i64,
}

/// Single-writer joiner state for one shard of users.
#[derive(Debug)]
pub struct JoinerState {
    config: JoinerConfig,
    open: HashMap<u64, RequestJoinRecord>,
    closed: HashSet<(u64, u64)>,
    sums: MetricSums,
}

impl JoinerState {
    pub fn new(config: JoinerConfig) -> Result<Self, JoinError> {
        config.validate()?;
        Ok(Self {
            config,
            open: HashMap::new(),
            closed: HashSet::new(),
            sums: MetricSums::default(),
        })
    }

    pub fn config(&self) -> &JoinerConfig {
        &self.config
    }

    pub fn open_windows(&self) -> usize {
        self.open.len()
    }

    pub fn open_record(&self, user_id: u64) -> Option<&RequestJoinRecord> {
        self.open.get(&user_id)
    }

    /// Feeds one event. Returns the samples this event caused to publish:
    /// at most the previous request of the user plus, when a trigger fires
    /// on the event's own record, that record.
    pub fn ingest_event(&mut self, e: &Event) -> Result<Vec<Published>, JoinError> {
        e.check()?;
        let mut out = Vec::new();
        let key = (e.user_id, e.request_id);
        if self.closed.contains(&key) {
            self.sums.late_events_dropped += 1;
            return Ok(out);
        }

        if let Some(rec) = self.open.get(&e.user_id) {
            if rec.request_id != e.request_id {
                out.push(self.close(e.user_id, CloseReason::NewRequest, e.event_time));
            } else if e.event_time >= rec.open_time + self.config.window_ms {
                let deadline = rec.open_time + self.config.window_ms;
                out.push(self.close(e.user_id, CloseReason::WindowTimeUp, deadline));
                self.sums.late_events_dropped += 1;
                return Ok(out);
            }
        }

        match (self.open.get_mut(&e.user_id), e.kind) {
            (None, EventKind::Impression) => {
                let mut rec = RequestJoinRecord::open(e);
                rec.touch(e);
                self.open.insert(e.user_id, rec);
            }
            (None, EventKind::Conversion) => {
                self.sums.orphan_events_dropped += 1;
                return Ok(out);
            }
            (Some(rec), EventKind::Impression) => {
                if !rec.contains(e.item_id) {
                    rec.add_impression(e);
                }
                rec.touch(e);
            }
            (Some(rec), EventKind::Conversion) => {
                if !rec.contains(e.item_id) {
                    self.sums.orphan_events_dropped += 1;
                    return Ok(out);
                }
                rec.conversions
                    .entry(e.item_id)
                    .or_default()
                    .extend(e.item_labels.iter().copied());
                rec.touch(e);
            }
        }

        let rec = &self.open[&e.user_id];
        let reason = if rec.impressions.len() >= self.config.engagement_threshold as usize {
            Some(CloseReason::EngagementThreshold)
        } else if self.config.dynamic_trigger && rec.expected_events.is_some_and(|n| rec.events_seen >= n) {
            Some(CloseReason::DynamicTrigger)
        } else {
            None
        };
        if let Some(reason) = reason {
            out.push(self.close(e.user_id, reason, e.event_time));
        }
        Ok(out)
    }

    /// Closes every window whose fixed deadline is at or before `now_ms`,
    /// ordered by (open_time, user_id, request_id).
    pub fn tick(&mut self, now_ms: i64) -> Vec<Published> {
        let window = self.config.window_ms;
        let expired = self.ordered_users(|rec| rec.open_time + window <= now_ms);
        expired
            .into_iter()
            .map(|(open_time, user)| self.close(user, CloseReason::WindowTimeUp, open_time + window))
            .collect()
    }

    /// End-of-stream flush. Each window is stamped as closing at its
    /// deadline, the time it would have expired had the stream continued.
    pub fn drain(&mut self) -> Vec<Published> {
        let window = self.config.window_ms;
        let all = self.ordered_users(|_| true);
        all.into_iter()
            .map(|(open_time, user)| self.close(user, CloseReason::Drain, open_time + window))
            .collect()
    }

    pub fn metrics(&self) -> JoinerMetrics {
        self.sums.snapshot()
    }

    /// RO payload bytes buffered across all open windows.
    pub fn buffered_ro_bytes(&self) -> usize {
        self.open.values().map(RequestJoinRecord::ro_bytes).sum()
    }

    fn ordered_users(&self, pred: impl Fn(&RequestJoinRecord) -> bool) -> Vec<(i64, u64)> {
        let mut keys: Vec<(i64, u64, u64)> = self
            .open
            .values()
            .filter(|r| pred(r))
            .map(|r| (r.open_time, r.user_id, r.request_id))
            .collect();
        keys.sort_unstable();
        keys.into_iter().map(|(t, u, _)| (t, u)).collect()
    }

    fn close(&mut self, user_id: u64, reason: CloseReason, close_time: i64) -> Published {
        let rec = self.open.remove(&user_id).expect("close called on an open window");
        self.closed.insert((rec.user_id, rec.request_id));
        let s = &mut self.sums;
        s.samples_published += 1;
        s.close_latency += (close_time - rec.first_event_time) as i128;
        s.intra_gap += (rec.last_impression_time - rec.first_event_time) as i128;
        s.landing_latency += (close_time - rec.open_time) as i128;
        let name = serde_json::to_value(reason)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        *s.closes_by_reason.entry(name).or_default() += 1;
        let open_time = rec.open_time;
        Published {
            sample: rec.into_sample(),
            reason,
            open_time,
            close_time,
        }
    }
}

/// Output of joining a whole stream.
#[derive(Clone, Debug, Default)]
pub struct JoinOutput {
    pub published: Vec<Published>,
    pub metrics: JoinerMetrics,
    pub malformed: u64,
}

impl JoinOutput {
    pub fn samples(&self) -> impl Iterator<Item = &RequestSample> {
        self.published.iter().map(|p| &p.sample)
    }

    pub fn into_samples(self) -> Vec<RequestSample> {
        self.published.into_iter().map(|p| p.sample).collect()
    }
}

/// Replays a stream through one joiner: expired windows are ticked out at
/// each event's time before the event is ingested, and the rest drained at
/// the end. Malformed events are skipped and counted.
pub fn join_stream(events: &[Event], config: &JoinerConfig) -> Result<JoinOutput, JoinError> {
    let mut state = JoinerState::new(config.clone())?;
    let mut out = JoinOutput::default();
    for e in events {
        out.published.extend(state.tick(e.event_time));
        match state.ingest_event(e) {
            Ok(p) => out.published.extend(p),
            Err(JoinError::Malformed { .. }) => out.malformed += 1,
            Err(err) => return Err(err),
        }
    }
    out.published.extend(state.drain());
    out.metrics = state.metrics();
    Ok(out)
}

pub fn shard_of(user_id: u64, shards: usize) -> usize {
    (user_id % shards as u64) as usize
}

/// Runs `shards` independent joiners concurrently, partitioning by user.
/// Published samples are returned ordered by (close_time, open_time,
/// user_id, request_id), which is independent of the shard count.
pub fn join_stream_sharded(events: &[Event], config: &JoinerConfig, shards: usize) -> Result<JoinOutput, JoinError> {
    config.validate()?;
    let shards = shards.max(1);
    let mut parts: Vec<Vec<Event>> = vec![Vec::new(); shards];
    for e in events {
        parts[shard_of(e.user_id, shards)].push(e.clone());
    }
    let results: Vec<Result<(JoinOutput, MetricSums), JoinError>> = thread::scope(|scope| {
        let handles: Vec<_> = parts
            .iter()
            .map(|part| {
                scope.spawn(move || {
                    let mut state = JoinerState::new(config.clone())?;
                    let mut out = JoinOutput::default();
                    for e in part {
                        out.published.extend(state.tick(e.event_time));
                        match state.ingest_event(e) {
                            Ok(p) => out.published.extend(p),
                            Err(JoinError::Malformed { .. }) => out.malformed += 1,
                            Err(err) => return Err(err),
                        }
                    }
                    out.published.extend(state.drain());
                    Ok((out, state.sums))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("joiner shard panicked"))
            .collect()
    });

    let mut merged = JoinOutput::default();
    let mut sums = MetricSums::default();
    for r in results {
        let (out, s) = r?;
        merged.published.extend(out.published);
        merged.malformed += out.malformed;
        sums.merge(&s);
    }
    merged
        .published
        .sort_by_key(|p| (p.close_time, p.open_time, p.sample.user_id, p.sample.request_id));
    merged.metrics = sums.snapshot();
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn imp(t: i64, user: u64, req: u64, item: u64) -> Event {
        Event {
            event_time: t,
            user_id: user,
            request_id: req,
            item_id: item,
            kind: EventKind::Impression,
            item_labels: vec![],
            ro_payload: Some(FeaturePayload {
                dense: [(FeatureId(1), user as f32)].into(),
                idlist: [(FeatureId(2), vec![user, req])].into(),
            }),
            nro_payload: Some(FeaturePayload {
                dense: [(FeatureId(3), item as f32)].into(),
                idlist: [(FeatureId(4), vec![item])].into(),
            }),
            expected_events: None,
        }
    }

    fn conv(t: i64, user: u64, req: u64, item: u64, label: u32) -> Event {
        Event {
            event_time: t,
            user_id: user,
            request_id: req,
            item_id: item,
            kind: EventKind::Conversion,
            item_labels: vec![LabelId(label)],
            ro_payload: None,
            nro_payload: None,
            expected_events: None,
        }
    }

    fn config(window_ms: i64, threshold: u32) -> JoinerConfig {
        JoinerConfig {
            window_ms,
            engagement_threshold: threshold,
            ..Default::default()
        }
    }

    #[test]
    fn first_impression_opens_a_window() {
        let mut s = JoinerState::new(config(100, 10)).unwrap();
        assert!(s.ingest_event(&imp(0, 1, 10, 5)).unwrap().is_empty());
        let rec = s.open_record(1).unwrap();
        assert_eq!(rec.request_id, 10);
        assert_eq!(rec.impressions, vec![5]);
    }

    #[test]
    fn new_request_publishes_previous() {
        let mut s = JoinerState::new(config(100, 10)).unwrap();
        s.ingest_event(&imp(0, 1, 10, 5)).unwrap();
        s.ingest_event(&imp(1, 1, 10, 6)).unwrap();
        let out = s.ingest_event(&imp(2, 1, 11, 7)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].reason, CloseReason::NewRequest);
        assert_eq!(out[0].sample.request_id, 10);
        assert_eq!(out[0].sample.items, vec![5, 6]);
        assert_eq!(s.open_record(1).unwrap().request_id, 11);
    }

    #[test]
    fn engagement_threshold_closes_on_third_item() {
        let mut s = JoinerState::new(config(100, 3)).unwrap();
        assert!(s.ingest_event(&imp(0, 1, 10, 5)).unwrap().is_empty());
        assert!(s.ingest_event(&conv(1, 1, 10, 5, 0)).unwrap().is_empty());
        assert!(s.ingest_event(&imp(2, 1, 10, 6)).unwrap().is_empty());
        let out = s.ingest_event(&imp(3, 1, 10, 7)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].reason, CloseReason::EngagementThreshold);
        let sample = &out[0].sample;
        assert_eq!(sample.items, vec![5, 6, 7]);
        assert_eq!(sample.conversions, vec![vec![LabelId(0)], vec![], vec![]]);
        assert_eq!(sample.nro_dense[&FeatureId(3)], vec![5.0, 6.0, 7.0]);
        assert_eq!(s.open_windows(), 0);
    }

    #[test]
    fn tick_closes_only_expired_windows() {
        let mut s = JoinerState::new(config(10, 10)).unwrap();
        assert!(s.tick(0).is_empty());
        s.ingest_event(&imp(0, 1, 10, 5)).unwrap();
        s.ingest_event(&imp(5, 2, 20, 5)).unwrap();
        let out = s.tick(12);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].sample.request_id, 10);
        assert_eq!(out[0].close_time, 10);
        let rest = s.tick(1_000_000_000);
        assert_eq!(rest.len(), 1);
        assert_eq!(s.open_windows(), 0);
    }

    #[test]
    fn simultaneous_closes_are_ordered() {
        let mut s = JoinerState::new(config(10, 10)).unwrap();
        s.ingest_event(&imp(3, 9, 1, 5)).unwrap();
        s.ingest_event(&imp(3, 2, 7, 5)).unwrap();
        s.ingest_event(&imp(1, 5, 4, 5)).unwrap();
        let users: Vec<u64> = s.drain().iter().map(|p| p.sample.user_id).collect();
        assert_eq!(users, vec![5, 2, 9]);
        assert!(s.drain().is_empty());
    }

    #[test]
    fn late_and_orphan_conversions_are_counted() {
        let mut s = JoinerState::new(config(10, 10)).unwrap();
        s.ingest_event(&imp(0, 1, 10, 5)).unwrap();
        s.ingest_event(&conv(1, 1, 10, 99, 0)).unwrap();
        s.tick(10);
        s.ingest_event(&conv(11, 1, 10, 5, 0)).unwrap();
        s.ingest_event(&conv(12, 3, 30, 5, 0)).unwrap();
        let m = s.metrics();
        assert_eq!(m.samples_published, 1);
        assert_eq!(m.late_events_dropped, 1);
        assert_eq!(m.orphan_events_dropped, 2);
    }

    #[test]
    fn event_past_deadline_closes_window_and_is_dropped() {
        let mut s = JoinerState::new(config(10, 10)).unwrap();
        s.ingest_event(&imp(0, 1, 10, 5)).unwrap();
        let out = s.ingest_event(&imp(10, 1, 10, 6)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].sample.items, vec![5]);
        assert_eq!(out[0].close_time, 10);
        assert_eq!(s.metrics().late_events_dropped, 1);
    }

    #[test]
    fn malformed_events_are_rejected() {
        let mut s = JoinerState::new(config(10, 10)).unwrap();
        let mut bad = conv(0, 1, 1, 1, 0);
        bad.item_labels.clear();
        assert!(matches!(
            s.ingest_event(&bad),
            Err(JoinError::Malformed { reason, .. }) if reason.contains("without labels")
        ));
        let mut bad = imp(0, 1, 1, 1);
        bad.ro_payload = None;
        assert!(s.ingest_event(&bad).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(JoinerState::new(config(0, 1)).is_err());
        assert!(JoinerState::new(config(1, 0)).is_err());
    }

    #[test]
    fn fresh_metrics_are_zero() {
        let s = JoinerState::new(config(10, 10)).unwrap();
        assert_eq!(s.metrics(), JoinerMetrics::default());
    }

    #[test]
    fn ro_bytes_do_not_grow_with_impressions() {
        let mut s = JoinerState::new(config(1000, 100)).unwrap();
        s.ingest_event(&imp(0, 1, 10, 1)).unwrap();
        let one = s.buffered_ro_bytes();
        for item in 2..20 {
            s.ingest_event(&imp(item as i64, 1, 10, item)).unwrap();
        }
        assert_eq!(s.buffered_ro_bytes(), one);
        assert_eq!(s.open_record(1).unwrap().impressions.len(), 19);
    }

    #[test]
    fn dynamic_trigger_closes_when_all_events_arrived() {
        let mut cfg = config(1000, 100);
        cfg.dynamic_trigger = true;
        let mut s = JoinerState::new(cfg).unwrap();
        let mut a = imp(0, 1, 10, 1);
        a.expected_events = Some(3);
        let mut b = imp(100, 1, 10, 2);
        b.expected_events = Some(3);
        let mut c = conv(250, 1, 10, 2, 1);
        c.expected_events = Some(3);
        assert!(s.ingest_event(&a).unwrap().is_empty());
        assert!(s.ingest_event(&b).unwrap().is_empty());
        let out = s.ingest_event(&c).unwrap();
        assert_eq!(out[0].reason, CloseReason::DynamicTrigger);
        assert_eq!(out[0].close_time, 250);
        let m = s.metrics();
        assert_eq!(m.mean_landing_latency_ms, 250.0);
        assert_eq!(m.mean_intra_request_gap_ms, 100.0);
    }

    #[test]
    fn event_json_uses_string_kind() {
        let line = serde_json::to_string(&conv(5, 1, 2, 3, 4)).unwrap();
        assert!(line.contains(r#""kind":"conversion""#));
        let back: Event = serde_json::from_str(&line).unwrap();
        assert_eq!(back, conv(5, 1, 2, 3, 4));
    }
}
