//! Request-level join over a hand-written stream, one event at a time,
//! showing why each window closed.

use roo::joiner::{Event, EventKind, FeaturePayload, JoinerConfig, JoinerState};
use roo::schema::{FeatureId, LabelId};

fn impression(t: i64, user: u64, request: u64, item: u64) -> Event {
    Event {
        event_time: t,
        user_id: user,
        request_id: request,
        item_id: item,
        kind: EventKind::Impression,
        item_labels: vec![],
        ro_payload: Some(FeaturePayload {
            dense: [(FeatureId(100), 0.5)].into(),
            ..Default::default()
        }),
        nro_payload: Some(FeaturePayload {
            dense: [(FeatureId(400), item as f32)].into(),
            ..Default::default()
        }),
        expected_events: None,
    }
}

fn conversion(t: i64, user: u64, request: u64, item: u64) -> Event {
    Event {
        kind: EventKind::Conversion,
        item_labels: vec![LabelId(1)],
        ro_payload: None,
        nro_payload: None,
        ..impression(t, user, request, item)
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let stream = [
        impression(0, 1, 10, 100),
        impression(5, 1, 10, 101),
        impression(6, 2, 20, 200),
        conversion(40, 1, 10, 101),
        impression(50, 1, 11, 102),
        conversion(70, 2, 20, 200),
    ];
    let mut joiner = JoinerState::new(JoinerConfig {
        window_ms: 100,
        ..Default::default()
    })?;
    let mut published = Vec::new();
    for e in &stream {
        published.extend(joiner.ingest_event(e)?);
    }
    published.extend(joiner.tick(160));
    published.extend(joiner.drain());
    for p in &published {
        println!(
            "request {} closed by {:?} at {}: items {:?} conversions {:?}",
            p.sample.request_id, p.reason, p.close_time, p.sample.items, p.sample.conversions
        );
    }
    println!("{}", serde_json::to_string_pretty(&joiner.metrics())?);
    Ok(())
}
