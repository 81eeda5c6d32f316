//! Request samples expand into impression rows and group back losslessly.

use roo::harness::{generate_events, GeneratorConfig, ImpressionDist};
use roo::joiner::{join_stream, JoinerConfig};
use roo::schema::{expand_request_sample, group_impressions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = GeneratorConfig {
        num_users: 3,
        requests_per_user: 1,
        impressions: ImpressionDist::Fixed { k: 3 },
        history_len_max: 3,
        ..Default::default()
    };
    let samples = join_stream(&generate_events(&config)?, &JoinerConfig::default())?.into_samples();
    let mut rows = Vec::new();
    for s in &samples {
        rows.extend(expand_request_sample(s)?);
    }
    println!("{} request samples -> {} impression rows", samples.len(), rows.len());
    println!("first row: {}", serde_json::to_string(&rows[0])?);
    assert_eq!(group_impressions(&rows, &config.registry())?, samples);
    println!("group(expand(x)) == x");
    Ok(())
}
