//! Synthetic event stream: same seed, same bytes.
//!
//! cargo run --example generate_stream -- [seed]

use roo::harness::{generate_events, stream_hash, GeneratorConfig, ImpressionDist};
use roo::joiner::EventKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(7);
    let config = GeneratorConfig {
        seed,
        num_users: 20,
        requests_per_user: 5,
        impressions: ImpressionDist::Uniform { min: 2, max: 6 },
        ..Default::default()
    };
    let events = generate_events(&config)?;
    let conversions = events.iter().filter(|e| e.kind == EventKind::Conversion).count();
    println!(
        "{} events ({} impressions, {conversions} conversions)",
        events.len(),
        events.len() - conversions
    );
    println!("stream hash {}", stream_hash(&events));
    assert_eq!(stream_hash(&events), stream_hash(&generate_events(&config)?));
    println!("first event: {}", serde_json::to_string(&events[0])?);
    Ok(())
}
