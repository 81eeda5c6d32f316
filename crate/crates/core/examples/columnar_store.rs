//! Write a ROO block, read it back, and compare its size with the same
//! data stored one row per impression.

use roo::harness::{generate_events, GeneratorConfig};
use roo::joiner::{join_stream, JoinerConfig};
use roo::store::{measure_footprint, read_block, write_block};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let events = generate_events(&GeneratorConfig {
        num_users: 50,
        ..Default::default()
    })?;
    let samples = join_stream(&events, &JoinerConfig::default())?.into_samples();
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("block.roo");
    let summary = write_block(&samples, &path)?;
    assert_eq!(read_block(&path)?, samples);
    println!("{} samples in {} bytes", summary.sample_count, summary.bytes_written);
    println!("{}", serde_json::to_string_pretty(&measure_footprint(&samples)?)?);
    Ok(())
}
