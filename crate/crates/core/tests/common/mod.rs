#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use roo::harness::{
    generate_events, Config, GeneratorConfig, ImpressionDist, HISTORY_ACTIONS, HISTORY_CONTEXTS, HISTORY_ITEMS,
};
use roo::joiner::{join_stream, JoinerConfig};
use roo::model::{ModelConfig, UserPooling};
use roo::schema::{FeatureRegistry, RequestSample};

/// Random request corpus together with a model config sized for it.
pub struct Case {
    pub samples: Vec<RequestSample>,
    pub registry: FeatureRegistry,
    pub model: ModelConfig,
}

pub fn joined(gen: &GeneratorConfig) -> Vec<RequestSample> {
    let events = generate_events(gen).expect("valid generator config");
    join_stream(&events, &JoinerConfig::default())
        .expect("valid joiner config")
        .into_samples()
}

/// Up to 8 requests of 1 to 7 impressions, histories up to 64, d up to 32.
pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_ro_dense = rng.gen_range(0..=3);
    let gen = GeneratorConfig {
        seed,
        num_users: rng.gen_range(1..=8),
        requests_per_user: 1,
        impressions: ImpressionDist::Uniform { min: 1, max: 7 },
        conversion_rates: vec![0.3, 0.3],
        n_ro_dense,
        n_ro_idlist: rng.gen_range(u32::from(n_ro_dense == 0)..=3),
        ro_idlist_len: rng.gen_range(0..=6),
        history_len_min: 0,
        history_len_max: rng.gen_range(1..=64),
        n_nro_dense: rng.gen_range(0..=3),
        n_nro_idlist: rng.gen_range(0..=2),
        nro_idlist_len: rng.gen_range(0..=4),
        item_universe: 10_000,
        ..Default::default()
    };
    let model = ModelConfig {
        seed,
        dim: rng.gen_range(1..=32),
        table_rows: 257,
        lce_n_out: rng.gen_range(1..=4),
        lce_d_out: rng.gen_range(1..=8),
        n_max: 64,
        hidden: rng.gen_range(1..=16),
        num_tasks: 2,
        history_items: Some(HISTORY_ITEMS),
        history_actions: Some(HISTORY_ACTIONS),
        history_contexts: Some(HISTORY_CONTEXTS),
        user_pooling: if rng.gen_bool(0.5) {
            UserPooling::LastValid
        } else {
            UserPooling::Mean
        },
    };
    Case {
        samples: joined(&gen),
        registry: gen.registry(),
        model,
    }
}

pub fn corpus_config(seed: u64, users: u32, impressions: ImpressionDist) -> Config {
    Config {
        generator: GeneratorConfig {
            seed,
            num_users: users,
            requests_per_user: 4,
            impressions,
            history_len_max: 12,
            ..Default::default()
        },
        ..Default::default()
    }
    .with_seed(seed)
}

/// `max |a - b| / max(|a|, |b|)` over paired entries, 0 where both are 0.
pub fn max_rel_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            let scale = x.abs().max(y.abs());
            if scale == 0.0 {
                0.0
            } else {
                (x - y).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}
