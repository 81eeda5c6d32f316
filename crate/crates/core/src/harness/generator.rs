//! Seeded synthetic event streams.
//!
//! Each user issues `requests_per_user` requests spaced more than one
//! window apart. A request's first impression lands at the request time;
//! its other impressions and its conversions land uniformly inside an
//! activity span drawn from `[0, span_fraction * window_ms)`, each
//! conversion after its impression. Every event therefore arrives before
//! the request's window closes.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::joiner::{Event, EventKind, FeaturePayload};
use crate::schema::{FeatureId, FeatureRegistry, LabelId};

use super::HarnessError;

pub const HISTORY_ITEMS: FeatureId = FeatureId(300);
pub const HISTORY_ACTIONS: FeatureId = FeatureId(301);
pub const HISTORY_CONTEXTS: FeatureId = FeatureId(302);

const NUM_ACTIONS: u64 = 16;
const NUM_CONTEXTS: u64 = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ImpressionDist {
    Fixed {
        k: u32,
    },
    /// Inclusive bounds.
    Uniform {
        min: u32,
        max: u32,
    },
    /// `weights[i]` is the weight of `i + 1` impressions.
    Categorical {
        weights: Vec<f64>,
    },
}

impl Default for ImpressionDist {
    /// Mode at 4 to 7 impressions per request.
    fn default() -> Self {
        ImpressionDist::Categorical {
            weights: vec![0.02, 0.04, 0.08, 0.18, 0.20, 0.18, 0.14, 0.08, 0.05, 0.03],
        }
    }
}

impl ImpressionDist {
    fn validate(&self) -> Result<(), HarnessError> {
        let ok = match self {
            ImpressionDist::Fixed { k } => *k >= 1,
            ImpressionDist::Uniform { min, max } => *min >= 1 && min <= max,
            ImpressionDist::Categorical { weights } => {
                !weights.is_empty()
                    && weights.iter().all(|w| w.is_finite() && *w >= 0.0)
                    && weights.iter().sum::<f64>() > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(HarnessError::Config(format!(
                "invalid impressions distribution {self:?}"
            )))
        }
    }

    pub fn max(&self) -> u32 {
        match self {
            ImpressionDist::Fixed { k } => *k,
            ImpressionDist::Uniform { max, .. } => *max,
            ImpressionDist::Categorical { weights } => weights.len() as u32,
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            ImpressionDist::Fixed { k } => *k as f64,
            ImpressionDist::Uniform { min, max } => (*min + *max) as f64 / 2.0,
            ImpressionDist::Categorical { weights } => {
                let total: f64 = weights.iter().sum();
                weights.iter().enumerate().map(|(i, w)| (i + 1) as f64 * w).sum::<f64>() / total
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub num_users: u32,
    pub requests_per_user: u32,
    pub impressions: ImpressionDist,
    /// Per-item probability of label `i + 1`.
    pub conversion_rates: Vec<f64>,
    pub window_ms: i64,
    pub span_fraction: f64,
    pub n_ro_dense: u32,
    pub n_ro_idlist: u32,
    pub ro_idlist_len: u32,
    pub history_len_min: u32,
    pub history_len_max: u32,
    pub n_nro_dense: u32,
    pub n_nro_idlist: u32,
    pub nro_idlist_len: u32,
    pub item_universe: u64,
    /// Probability that the request-level path loses a conversion event.
    pub loss_rate: f64,
    /// Stamp each event with the request's total event count.
    pub emit_expected_events: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_users: 100,
            requests_per_user: 10,
            impressions: ImpressionDist::default(),
            conversion_rates: vec![0.2, 0.1],
            window_ms: 30 * 60 * 1000,
            span_fraction: 1.0,
            n_ro_dense: 4,
            n_ro_idlist: 2,
            ro_idlist_len: 8,
            history_len_min: 0,
            history_len_max: 32,
            n_nro_dense: 2,
            n_nro_idlist: 1,
            nro_idlist_len: 3,
            item_universe: 1_000_000,
            loss_rate: 0.0,
            emit_expected_events: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: &str| Err(HarnessError::Config(msg.into()));
        self.impressions.validate()?;
        if !self.conversion_rates.iter().all(|p| (0.0..=1.0).contains(p)) {
            return bad("conversion rates must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return bad("loss_rate must lie in [0, 1]");
        }
        if !(self.span_fraction > 0.0 && self.span_fraction <= 1.0) {
            return bad("span_fraction must lie in (0, 1]");
        }
        if self.window_ms <= 0 {
            return bad("window_ms must be > 0");
        }
        if self.history_len_min > self.history_len_max {
            return bad("history_len_min exceeds history_len_max");
        }
        if self.item_universe < 2 * self.impressions.max() as u64 {
            return bad("item_universe too small for distinct items per request");
        }
        Ok(())
    }

    pub fn ro_dense_ids(&self) -> Vec<FeatureId> {
        (0..self.n_ro_dense as u64).map(|i| FeatureId(100 + i)).collect()
    }

    pub fn ro_idlist_ids(&self) -> Vec<FeatureId> {
        (0..self.n_ro_idlist as u64).map(|i| FeatureId(200 + i)).collect()
    }

    pub fn nro_dense_ids(&self) -> Vec<FeatureId> {
        (0..self.n_nro_dense as u64).map(|i| FeatureId(400 + i)).collect()
    }

    pub fn nro_idlist_ids(&self) -> Vec<FeatureId> {
        (0..self.n_nro_idlist as u64).map(|i| FeatureId(500 + i)).collect()
    }

    pub fn has_history(&self) -> bool {
        self.history_len_max > 0
    }

    pub fn registry(&self) -> FeatureRegistry {
        let mut ro_idlist = self.ro_idlist_ids();
        if self.has_history() {
            ro_idlist.extend([HISTORY_ITEMS, HISTORY_ACTIONS, HISTORY_CONTEXTS]);
        }
        FeatureRegistry::new(
            self.ro_dense_ids(),
            ro_idlist,
            self.nro_dense_ids(),
            self.nro_idlist_ids(),
        )
        .expect("generator feature ids are disjoint")
    }

    fn sample_k(&self, rng: &mut ChaCha8Rng) -> u32 {
        match &self.impressions {
            ImpressionDist::Fixed { k } => *k,
            ImpressionDist::Uniform { min, max } => rng.gen_range(*min..=*max),
            ImpressionDist::Categorical { weights } => {
                let dist = WeightedIndex::new(weights).expect("validated weights");
                dist.sample(rng) as u32 + 1
            }
        }
    }
}

fn ids(rng: &mut ChaCha8Rng, n: u32, universe: u64) -> Vec<u64> {
    (0..n).map(|_| rng.gen_range(1..=universe)).collect()
}

fn ro_payload(c: &GeneratorConfig, rng: &mut ChaCha8Rng) -> FeaturePayload {
    let mut p = FeaturePayload::default();
    for f in c.ro_dense_ids() {
        p.dense.insert(f, rng.gen_range(-1.0f32..1.0));
    }
    for f in c.ro_idlist_ids() {
        let n = rng.gen_range(0..=c.ro_idlist_len);
        p.idlist.insert(f, ids(rng, n, c.item_universe));
    }
    if c.has_history() {
        let n = rng.gen_range(c.history_len_min..=c.history_len_max);
        p.idlist.insert(HISTORY_ITEMS, ids(rng, n, c.item_universe));
        p.idlist.insert(HISTORY_ACTIONS, ids(rng, n, NUM_ACTIONS));
        p.idlist.insert(HISTORY_CONTEXTS, ids(rng, n, NUM_CONTEXTS));
    }
    p
}

fn nro_payload(c: &GeneratorConfig, rng: &mut ChaCha8Rng) -> FeaturePayload {
    let mut p = FeaturePayload::default();
    for f in c.nro_dense_ids() {
        p.dense.insert(f, rng.gen_range(-1.0f32..1.0));
    }
    for f in c.nro_idlist_ids() {
        let n = rng.gen_range(0..=c.nro_idlist_len);
        p.idlist.insert(f, ids(rng, n, c.item_universe));
    }
    p
}

/// Events of one request, in emission order.
fn request_events(c: &GeneratorConfig, rng: &mut ChaCha8Rng, user_id: u64, request_id: u64, t0: i64) -> Vec<Event> {
    let k = c.sample_k(rng);
    let span = ((c.window_ms as f64 * c.span_fraction) as i64).max(1);
    let span = rng.gen_range(0..span);
    let end = t0 + span;
    let ro = ro_payload(c, rng);

    let mut items = Vec::with_capacity(k as usize);
    while items.len() < k as usize {
        let item = rng.gen_range(1..=c.item_universe);
        if !items.contains(&item) {
            items.push(item);
        }
    }

    let mut events = Vec::new();
    let mut conversions = Vec::new();
    for (pos, &item_id) in items.iter().enumerate() {
        let t = if pos == 0 { t0 } else { rng.gen_range(t0..=end) };
        events.push(Event {
            event_time: t,
            user_id,
            request_id,
            item_id,
            kind: EventKind::Impression,
            item_labels: vec![],
            ro_payload: Some(ro.clone()),
            nro_payload: Some(nro_payload(c, rng)),
            expected_events: None,
        });
        for (l, &p) in c.conversion_rates.iter().enumerate() {
            if rng.gen_bool(p) {
                conversions.push(Event {
                    event_time: rng.gen_range(t..=end),
                    user_id,
                    request_id,
                    item_id,
                    kind: EventKind::Conversion,
                    item_labels: vec![LabelId(l as u32 + 1)],
                    ro_payload: None,
                    nro_payload: None,
                    expected_events: None,
                });
            }
        }
    }
    events.extend(conversions);
    if c.emit_expected_events {
        let n = events.len() as u32;
        for e in &mut events {
            e.expected_events = Some(n);
        }
    }
    events
}

/// Deterministic logged stream, ordered by event time (ties keep emission
/// order, so an impression precedes its conversions).
pub fn generate_events(config: &GeneratorConfig) -> Result<Vec<Event>, HarnessError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let t = config.window_ms;
    let mut events = Vec::new();
    let mut request_id = 0u64;
    for user in 1..=config.num_users as u64 {
        let mut time = rng.gen_range(0..t);
        for r in 0..config.requests_per_user {
            if r > 0 {
                time += t + rng.gen_range(0..t);
            }
            request_id += 1;
            events.extend(request_events(config, &mut rng, user, request_id, time));
        }
    }
    events.sort_by_key(|e| e.event_time);
    Ok(events)
}

/// Drops each conversion event independently with probability
/// `loss_rate`. One draw per event keeps the pattern independent of which
/// events happen to be conversions.
pub fn apply_loss(events: &[Event], loss_rate: f64, seed: u64) -> Vec<Event> {
    if loss_rate <= 0.0 {
        return events.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c6f_7373);
    events
        .iter()
        .filter(|e| {
            let u: f64 = rng.gen();
            !(e.kind == EventKind::Conversion && u < loss_rate)
        })
        .cloned()
        .collect()
}

fn event_line(e: &Event) -> String {
    serde_json::to_string(e).expect("event serialization is infallible")
}

/// SHA-256 of the JSON-lines encoding, hex.
pub fn stream_hash(events: &[Event]) -> String {
    let mut h = Sha256::new();
    for e in events {
        h.update(event_line(e).as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn write_events(events: &[Event], path: &Path) -> Result<(), HarnessError> {
    let file = fs::File::create(path).map_err(HarnessError::io(path))?;
    let mut w = BufWriter::new(file);
    for e in events {
        writeln!(w, "{}", event_line(e)).map_err(HarnessError::io(path))?;
    }
    w.flush().map_err(HarnessError::io(path))
}

pub fn read_events(path: &Path) -> Result<Vec<Event>, HarnessError> {
    let file = fs::File::open(path).map_err(HarnessError::io(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(HarnessError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(HarnessError::json(path))?);
    }
    Ok(out)
}
