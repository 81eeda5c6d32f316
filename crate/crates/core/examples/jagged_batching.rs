//! One batch built from request samples carries b_ro user rows and b_nro
//! item rows; the fanout index maps each item row to its request.

use roo::batcher::{build_batch, fanout, BatchConfig};
use roo::harness::{generate_events, GeneratorConfig, ImpressionDist};
use roo::joiner::{join_stream, JoinerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = GeneratorConfig {
        num_users: 4,
        requests_per_user: 1,
        impressions: ImpressionDist::Uniform { min: 1, max: 5 },
        ..Default::default()
    };
    let samples = join_stream(&generate_events(&config)?, &JoinerConfig::default())?.into_samples();
    let batch = build_batch(&samples, &config.registry(), &BatchConfig::default())?;
    println!("b_ro {} b_nro {}", batch.b_ro, batch.b_nro);
    println!("impressions per sample {:?}", batch.impressions_per_sample);
    println!("row map {:?}", fanout(&batch).row_map);
    for (i, key) in batch.ro_idlist.keys.iter().enumerate() {
        println!(
            "RO id-list {key}: {} ids over {} rows",
            batch.ro_idlist.total_ids(i),
            batch.ro_idlist.num_rows()
        );
    }
    Ok(())
}
