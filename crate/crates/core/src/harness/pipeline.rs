use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batcher::{build_batch, build_impression_batch, fanout, JaggedBatch};
use crate::joiner::{join_stream, Event};
use crate::model::{forward, Architecture, Counters, Mode, ModelParams};
use crate::schema::{ImpressionSample, RequestSample};
use crate::store::{measure_footprint, read_block, read_impressions, write_block, write_impressions, FootprintReport};

use super::generator::{apply_loss, stream_hash};
use super::impression_join::join_impressions;
use super::{Config, HarnessError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    /// Relative to the run directory.
    pub file: String,
    pub bytes: u64,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: Mode,
    pub stream_hash: String,
    pub event_count: usize,
    pub sample_count: usize,
    pub impression_count: usize,
    pub blocks: Vec<BlockEntry>,
    pub architectures: Vec<Architecture>,
    pub config: Config,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub manifest: Manifest,
    pub footprint: Option<FootprintReport>,
    pub counters: BTreeMap<String, Counters>,
}

#[derive(Serialize)]
struct OutputLine<'a> {
    arch: &'a str,
    request_id: u64,
    item_id: u64,
    values: &'a [f32],
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).map_err(HarnessError::json(path))?;
    fs::write(path, text + "\n").map_err(HarnessError::io(path))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path).map_err(HarnessError::io(path))?;
    serde_json::from_str(&text).map_err(HarnessError::json(path))
}

pub fn load_manifest(run_dir: &Path) -> Result<Manifest, HarnessError> {
    let path = run_dir.join("manifest.json");
    if !path.exists() {
        return Err(HarnessError::Missing(format!(
            "{} has no manifest.json",
            run_dir.display()
        )));
    }
    read_json(&path)
}

fn empty_footprint() -> FootprintReport {
    FootprintReport {
        sample_count: 0,
        impression_count: 0,
        roo_bytes: 0,
        impression_bytes: 0,
        ro_byte_share: 0.0,
        mean_impressions_per_request: 0.0,
        implied_volume_increase: 0.0,
    }
}

enum Joined {
    Roo(Vec<RequestSample>),
    Impression(Vec<ImpressionSample>),
}

/// Joins, stores, batches and scores `events` in one mode and persists
/// everything under `out_dir`.
///
/// ROO mode feeds the request-level joiner the stream after
/// `generator.loss_rate` conversion loss; impression mode feeds the
/// reference impression joiner the logged stream as is.
pub fn run_pipeline(events: &[Event], mode: Mode, config: &Config, out_dir: &Path) -> Result<RunSummary, HarnessError> {
    config.validate()?;
    let blocks_dir = out_dir.join("blocks");
    fs::create_dir_all(&blocks_dir).map_err(HarnessError::io(&blocks_dir))?;
    let hash = stream_hash(events);
    let block_size = config.pipeline.block_size;

    let mut blocks = Vec::new();
    let joined = match mode {
        Mode::Roo => {
            let lossy = apply_loss(events, config.generator.loss_rate, config.generator.seed);
            let join = join_stream(&lossy, &config.joiner)?;
            write_json(&out_dir.join("join_metrics.json"), &join.metrics)?;
            let samples = join.into_samples();
            for (i, chunk) in samples.chunks(block_size).enumerate() {
                let file = format!("blocks/block_{i:05}.roo");
                let w = write_block(chunk, &out_dir.join(&file))?;
                blocks.push(BlockEntry {
                    file,
                    bytes: w.bytes_written,
                    rows: w.sample_count,
                });
            }
            Joined::Roo(samples)
        }
        Mode::Impression => {
            let join = join_impressions(events, &config.joiner);
            write_json(&out_dir.join("join_metrics.json"), &join.metrics)?;
            for (i, chunk) in join.rows.chunks(block_size).enumerate() {
                let file = format!("blocks/block_{i:05}.imp");
                let w = write_impressions(chunk, &out_dir.join(&file))?;
                blocks.push(BlockEntry {
                    file,
                    bytes: w.bytes_written,
                    rows: w.sample_count,
                });
            }
            Joined::Impression(join.rows)
        }
    };

    // Score what was stored, not what was joined.
    let stored = read_run_blocks(out_dir, mode, &blocks)?;
    let (sample_count, impression_count, footprint) = match (&joined, &stored) {
        (Joined::Roo(s), Joined::Roo(_)) => {
            let fp = if s.is_empty() {
                empty_footprint()
            } else {
                measure_footprint(s)?
            };
            write_json(&out_dir.join("footprint.json"), &fp)?;
            (s.len(), s.iter().map(|s| s.items.len()).sum(), Some(fp))
        }
        (Joined::Impression(r), _) => (r.len(), r.len(), None),
        _ => unreachable!("stored blocks follow the run mode"),
    };

    let registry = config.generator.registry();
    let batch_cfg = &config.batch;
    let mut counters = BTreeMap::new();
    let outputs_path = out_dir.join("outputs.jsonl");
    let mut out = BufWriter::new(fs::File::create(&outputs_path).map_err(HarnessError::io(&outputs_path))?);
    let params = if config.pipeline.architectures.is_empty() || sample_count == 0 {
        None
    } else {
        Some(ModelParams::init(&config.resolved_model(), &registry)?)
    };
    let batches: Vec<JaggedBatch> = match &stored {
        Joined::Roo(s) => s
            .chunks(config.pipeline.batch_size)
            .map(|c| build_batch(c, &registry, batch_cfg))
            .collect::<Result<_, _>>()?,
        Joined::Impression(r) => r
            .chunks(config.pipeline.batch_size)
            .map(|c| build_impression_batch(c, &registry, batch_cfg))
            .collect::<Result<_, _>>()?,
    };
    for &arch in &config.pipeline.architectures {
        let mut total = Counters::with_run_id(hash.clone());
        if let Some(params) = &params {
            for batch in &batches {
                let mut c = Counters::with_run_id(hash.clone());
                let y = forward(batch, params, arch, mode, &mut c)?;
                total.merge(&c);
                let rows = fanout(batch).row_map;
                for (j, &r) in rows.iter().enumerate() {
                    let line = OutputLine {
                        arch: arch.name(),
                        request_id: batch.request_ids[r as usize],
                        item_id: batch.items[j],
                        values: y.row(j),
                    };
                    let text = serde_json::to_string(&line).map_err(HarnessError::json(&outputs_path))?;
                    writeln!(out, "{text}").map_err(HarnessError::io(&outputs_path))?;
                }
            }
        }
        counters.insert(arch.name().to_string(), total);
    }
    out.flush().map_err(HarnessError::io(&outputs_path))?;
    write_json(&out_dir.join("counters.json"), &counters)?;

    let manifest = Manifest {
        mode,
        stream_hash: hash,
        event_count: events.len(),
        sample_count,
        impression_count,
        blocks,
        architectures: config.pipeline.architectures.clone(),
        config: config.clone(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(RunSummary {
        manifest,
        footprint,
        counters,
    })
}

fn read_run_blocks(run_dir: &Path, mode: Mode, blocks: &[BlockEntry]) -> Result<Joined, HarnessError> {
    Ok(match mode {
        Mode::Roo => {
            let mut all = Vec::new();
            for b in blocks {
                all.extend(read_block(&run_dir.join(&b.file))?);
            }
            Joined::Roo(all)
        }
        Mode::Impression => {
            let mut all = Vec::new();
            for b in blocks {
                all.extend(read_impressions(&run_dir.join(&b.file))?);
            }
            Joined::Impression(all)
        }
    })
}

pub(crate) fn read_roo_run(run_dir: &Path, manifest: &Manifest) -> Result<Vec<RequestSample>, HarnessError> {
    match read_run_blocks(run_dir, Mode::Roo, &manifest.blocks)? {
        Joined::Roo(s) => Ok(s),
        Joined::Impression(_) => unreachable!(),
    }
}

pub(crate) fn read_impression_run(run_dir: &Path, manifest: &Manifest) -> Result<Vec<ImpressionSample>, HarnessError> {
    match read_run_blocks(run_dir, Mode::Impression, &manifest.blocks)? {
        Joined::Impression(r) => Ok(r),
        Joined::Roo(_) => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{generate_events, GeneratorConfig, ImpressionDist};

    fn config(users: u32) -> Config {
        Config {
            generator: GeneratorConfig {
                num_users: users,
                requests_per_user: 2,
                history_len_max: 6,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn outputs(dir: &Path) -> BTreeMap<(String, u64, u64), Vec<f32>> {
        fs::read_to_string(dir.join("outputs.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                (
                    (
                        v["arch"].as_str().unwrap().to_string(),
                        v["request_id"].as_u64().unwrap(),
                        v["item_id"].as_u64().unwrap(),
                    ),
                    serde_json::from_value(v["values"].clone()).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn modes_agree_on_outputs() {
        let cfg = config(4);
        let events = generate_events(&cfg.generator).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("roo"), dir.path().join("imp"));
        let roo = run_pipeline(&events, Mode::Roo, &cfg, &a).unwrap();
        let imp = run_pipeline(&events, Mode::Impression, &cfg, &b).unwrap();
        assert_eq!(roo.manifest.impression_count, imp.manifest.impression_count);
        let (oa, ob) = (outputs(&a), outputs(&b));
        assert_eq!(oa.len(), 4 * roo.manifest.impression_count);
        assert_eq!(oa, ob);
        let k = roo.manifest.impression_count as u64;
        assert_eq!(roo.counters["lsr"].b_nro, k);
        assert_eq!(imp.counters["lsr"].b_ro, k);
    }

    #[test]
    fn runs_are_byte_deterministic() {
        let cfg = config(3);
        let events = generate_events(&cfg.generator).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for m in [Mode::Roo, Mode::Impression] {
            let (a, b) = (dir.path().join("a"), dir.path().join("b"));
            run_pipeline(&events, m, &cfg, &a).unwrap();
            run_pipeline(&events, m, &cfg, &b).unwrap();
            for f in [
                "manifest.json",
                "counters.json",
                "outputs.jsonl",
                "join_metrics.json",
                "blocks/block_00000.roo",
                "blocks/block_00000.imp",
            ] {
                let (x, y) = (a.join(f), b.join(f));
                if x.exists() {
                    assert_eq!(fs::read(&x).unwrap(), fs::read(&y).unwrap(), "{f}");
                }
            }
            fs::remove_dir_all(&a).unwrap();
            fs::remove_dir_all(&b).unwrap();
        }
    }

    #[test]
    fn empty_stream_gives_zeroed_reports() {
        let dir = tempfile::tempdir().unwrap();
        let s = run_pipeline(&[], Mode::Roo, &config(0), dir.path()).unwrap();
        assert!(s.manifest.blocks.is_empty());
        assert_eq!(s.footprint.unwrap().roo_bytes, 0);
        assert!(s.counters.values().all(|c| c.total_flops() == 0));
        assert_eq!(fs::read_to_string(dir.path().join("outputs.jsonl")).unwrap(), "");
    }

    #[test]
    fn single_request_stream() {
        let mut cfg = config(1);
        cfg.generator.requests_per_user = 1;
        cfg.generator.impressions = ImpressionDist::Fixed { k: 3 };
        let events = generate_events(&cfg.generator).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_pipeline(&events, Mode::Roo, &cfg, &dir.path().join("r")).unwrap();
        run_pipeline(&events, Mode::Impression, &cfg, &dir.path().join("i")).unwrap();
        assert_eq!(outputs(&dir.path().join("r")), outputs(&dir.path().join("i")));
    }
}
