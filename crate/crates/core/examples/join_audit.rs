//! Label parity between the request-level join (with conversion loss) and
//! the impression-level reference join of the same stream.

use roo::harness::{apply_loss, audit, generate_events, join_impressions, stream_hash, GeneratorConfig};
use roo::joiner::{join_stream, JoinerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = GeneratorConfig {
        num_users: 500,
        conversion_rates: vec![0.5, 0.5],
        ..Default::default()
    };
    let events = generate_events(&config)?;
    let joiner = JoinerConfig::default();
    let reference = join_impressions(&events, &joiner).rows;
    for rate in [0.0, 0.01, 0.05] {
        let roo = join_stream(&apply_loss(&events, rate, config.seed), &joiner)?.into_samples();
        let report = audit(&roo, &reference, &stream_hash(&events));
        for l in &report.labels {
            println!(
                "loss {rate:<5} label {} mismatch {:.4} ({} of {})",
                l.label.0,
                l.mismatch_rate,
                l.roo_only + l.impression_only,
                l.union
            );
        }
    }
    Ok(())
}
