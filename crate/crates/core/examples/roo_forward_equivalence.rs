//! Every architecture computed once per request matches the same model run
//! on expanded impression rows, bit for bit, at a fraction of the RO cost.

use roo::batcher::{build_batch, BatchConfig};
use roo::harness::{generate_events, Config, GeneratorConfig};
use roo::joiner::{join_stream, JoinerConfig};
use roo::model::{expanded_forward_oracle, forward, Architecture, Counters, Mode, ModelParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = Config {
        generator: GeneratorConfig {
            num_users: 8,
            requests_per_user: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let registry = config.generator.registry();
    let samples = join_stream(&generate_events(&config.generator)?, &JoinerConfig::default())?.into_samples();
    let params = ModelParams::init(&config.resolved_model(), &registry)?;
    let batch_cfg = BatchConfig::default();
    let batch = build_batch(&samples, &registry, &batch_cfg)?;
    for arch in Architecture::ALL {
        let mut roo_c = Counters::default();
        let mut imp_c = Counters::default();
        let roo = forward(&batch, &params, arch, Mode::Roo, &mut roo_c)?;
        forward(&batch, &params, arch, Mode::Impression, &mut imp_c)?;
        let (oracle, _) = expanded_forward_oracle(&samples, &registry, &batch_cfg, &params, arch)?;
        println!(
            "{:<10} outputs {:?} identical {} RO flops {} vs {} ({:.2}x)",
            arch.name(),
            roo.shape(),
            roo.data() == oracle.data(),
            roo_c.ro_flops,
            imp_c.ro_flops,
            imp_c.ro_flops as f64 / roo_c.ro_flops.max(1) as f64
        );
    }
    Ok(())
}
