//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs with its own `main` so the lines print under plain `cargo test`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use roo::batcher::{build_batch, BatchConfig};
use roo::cost::{dedup_ratio, measure_run};
use roo::harness::{audit_runs, generate_events, run_pipeline, Config, ImpressionDist, PipelineConfig};
use roo::joiner::{join_stream, JoinerConfig};
use roo::model::{expanded_forward_oracle, forward, Architecture, Counters, Mode, ModelParams};
use roo::schema::{expand_request_sample, group_impressions, FeatureId, FeatureRegistry, RequestSample};
use roo::store::{decode_block, encode_block, measure_footprint, read_block, sample_bytes, write_block};

use common::{corpus_config, max_rel_diff, random_case};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_budget(elapsed: Duration, budget: Duration) -> Result<(), String> {
    check(
        elapsed <= budget,
        format!(
            "took {:.2} s, budget {:.0} s",
            elapsed.as_secs_f64(),
            budget.as_secs_f64()
        ),
    )
}

fn cost_formula() -> Outcome {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_roo"))
        .args(["cost", "1000", "10", "256"])
        .output()
        .map_err(|e| e.to_string())?;
    within_budget(start.elapsed(), Duration::from_secs(1))?;
    check(out.status.success(), format!("exit status {}", out.status))?;
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    let ratio = v["savings_ratio"].as_f64().ok_or("no savings_ratio")?;
    check((ratio - 9.82).abs() <= 0.01, format!("savings_ratio {ratio}"))?;
    Ok(format!(
        "impression {} / roo {} = {ratio:.4}",
        v["impression_flops"], v["roo_flops"]
    ))
}

fn forward_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let cfg = BatchConfig::default();
    for seed in 0..100u64 {
        let case = random_case(seed);
        let params = ModelParams::init(&case.model, &case.registry).map_err(|e| e.to_string())?;
        let batch = build_batch(&case.samples, &case.registry, &cfg).map_err(|e| e.to_string())?;
        for arch in Architecture::ALL {
            let roo = forward(&batch, &params, arch, Mode::Roo, &mut Counters::default())
                .map_err(|e| format!("seed {seed} {}: {e}", arch.name()))?;
            let (oracle, _) = expanded_forward_oracle(&case.samples, &case.registry, &cfg, &params, arch)
                .map_err(|e| format!("seed {seed} {}: {e}", arch.name()))?;
            check(
                roo.shape() == oracle.shape(),
                format!("seed {seed} {}: shape", arch.name()),
            )?;
            check(
                roo.is_finite(),
                format!("seed {seed} {}: non-finite output", arch.name()),
            )?;
            let d = max_rel_diff(roo.data(), oracle.data());
            let w = worst.entry(arch.name()).or_default();
            *w = w.max(d);
        }
    }
    within_budget(start.elapsed(), Duration::from_secs(120))?;
    for (arch, d) in &worst {
        check(*d <= 1e-6, format!("{arch}: max relative diff {d:e}"))?;
    }
    Ok(format!(
        "100 cases x 4 architectures, max relative diff {:e}",
        worst.values().fold(0.0, |a: f64, &b| a.max(b))
    ))
}

fn pipeline_pair(config: &Config, dir: &Path) -> Result<(roo::harness::RunSummary, roo::harness::RunSummary), String> {
    let events = generate_events(&config.generator).map_err(|e| e.to_string())?;
    let a = run_pipeline(&events, Mode::Roo, config, &dir.join("roo")).map_err(|e| e.to_string())?;
    let b = run_pipeline(&events, Mode::Impression, config, &dir.join("imp")).map_err(|e| e.to_string())?;
    Ok((a, b))
}

fn ro_ratios(roo: &Counters, imp: &Counters) -> BTreeMap<FeatureId, f64> {
    roo.ro_rows_fetched
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|(f, &n)| (*f, imp.ro_rows_fetched.get(f).copied().unwrap_or(0) as f64 / n as f64))
        .collect()
}

fn dedup_counters() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let constant = corpus_config(31, 50, ImpressionDist::Fixed { k: 4 });
    let (roo, imp) = pipeline_pair(&constant, &dir.path().join("k4"))?;
    let mut features = 0;
    for arch in Architecture::ALL {
        let (r, i) = (&roo.counters[arch.name()], &imp.counters[arch.name()]);
        for (f, &n) in &r.ro_rows_fetched {
            check(n > 0, format!("{}: no rows fetched for {f}", arch.name()))?;
            check(
                i.ro_rows_fetched[f] == 4 * n,
                format!("{}: {f} {} vs 4 x {n}", arch.name(), i.ro_rows_fetched[f]),
            )?;
            features += 1;
        }
        check(
            r.nro_rows_fetched == i.nro_rows_fetched,
            format!("{}: NRO rows differ", arch.name()),
        )?;
        check(
            i.ro_flops == 4 * r.ro_flops,
            format!("{}: RO flops not 4x", arch.name()),
        )?;
        check(i.nro_flops == r.nro_flops, format!("{}: NRO flops differ", arch.name()))?;
    }

    let varied = corpus_config(32, 50, ImpressionDist::Uniform { min: 4, max: 7 });
    let (roo, imp) = pipeline_pair(&varied, &dir.path().join("k47"))?;
    let (mut lo, mut hi) = (f64::MAX, f64::MIN);
    for arch in Architecture::ALL {
        for (f, x) in ro_ratios(&roo.counters[arch.name()], &imp.counters[arch.name()]) {
            check((4.0..=7.0).contains(&x), format!("{}: {f} ratio {x}", arch.name()))?;
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    let mean_k = roo.manifest.impression_count as f64 / roo.manifest.sample_count as f64;
    check(
        (4.0..=7.0).contains(&mean_k),
        format!("mean impressions per request {mean_k}"),
    )?;
    Ok(format!(
        "k=4: {features} RO feature counters exactly 4.000x, NRO equal; k~U{{4..7}}: ratios in [{lo:.3}, {hi:.3}], b_nro/b_ro {mean_k:.3}"
    ))
}

/// `n` samples of `k` items whose byte model has user share close to
/// `share`. Returns the samples with the declared (u, v).
fn storage_corpus(n: usize, k: usize, share: f64, seed: u64) -> (Vec<RequestSample>, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nro_len = 10usize;
    let probe = |ro_len: usize, rng: &mut ChaCha8Rng, rid: u64| RequestSample {
        request_id: rid,
        user_id: rid + 1_000_000,
        items: (0..k as u64).map(|i| rid * 16 + i).collect(),
        conversions: vec![vec![]; k],
        ro_idlist: [(FeatureId(1), (0..ro_len).map(|_| rng.gen_range(1..1000)).collect())].into(),
        nro_idlist: [(
            FeatureId(2),
            (0..k)
                .map(|_| (0..nro_len).map(|_| rng.gen_range(1..1000)).collect())
                .collect(),
        )]
        .into(),
        ..Default::default()
    };
    let b = sample_bytes(&probe(0, &mut rng, 0));
    let v = b.items as f64 / k as f64;
    let u_target = share / (1.0 - share) * v;
    let ro_len = ((u_target - b.user as f64) / 8.0).round().max(0.0) as usize;
    let samples: Vec<RequestSample> = (1..=n as u64).map(|rid| probe(ro_len, &mut rng, rid)).collect();
    let b = sample_bytes(&samples[0]);
    (samples, b.user as f64, b.items as f64 / k as f64)
}

fn storage_model() -> Outcome {
    let start = Instant::now();
    let predicted = |k: f64, u: f64, v: f64| k * (u + v) / (u + k * v) - 1.0;

    let (samples, u, v) = storage_corpus(10_000, 4, 0.75, 1);
    let fp = measure_footprint(&samples).map_err(|e| e.to_string())?;
    let want = predicted(4.0, u, v);
    let rel = (fp.implied_volume_increase - want).abs() / want;
    check(
        rel <= 0.05,
        format!("k=4: measured {} vs model {want}", fp.implied_volume_increase),
    )?;
    within_budget(start.elapsed(), Duration::from_secs(60))?;

    // Band membership only: k from 2 so the low end of the band is reachable.
    let (mut lo, mut hi) = (f64::MAX, f64::MIN);
    for k in 2..=7usize {
        for share in [0.3, 0.5, 0.7, 0.85] {
            let (s, _, _) = storage_corpus(1_000, k, share, k as u64);
            let x = measure_footprint(&s)
                .map_err(|e| e.to_string())?
                .implied_volume_increase;
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    check(lo <= 0.43 && hi >= 1.50, format!("sweep covers [{lo}, {hi}] only"))?;
    Ok(format!(
        "k=4 u={u} v={v}: {:.4} vs model {want:.4} ({:.2}% off); sweep spans [{:.1}%, {:.1}%]",
        fp.implied_volume_increase,
        rel * 100.0,
        lo * 100.0,
        hi * 100.0
    ))
}

fn audit_config(loss_rate: f64) -> Config {
    let mut c = corpus_config(51, 5_000, ImpressionDist::default());
    c.generator.conversion_rates = vec![0.5, 0.5];
    c.generator.history_len_max = 2;
    c.generator.ro_idlist_len = 2;
    c.generator.loss_rate = loss_rate;
    c.pipeline = PipelineConfig {
        architectures: vec![],
        ..Default::default()
    };
    c
}

fn join_quality() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let exact = audit_config(0.0);
    let (roo, _) = pipeline_pair(&exact, &dir.path().join("exact"))?;
    check(
        roo.manifest.sample_count >= 10_000,
        format!("{} requests", roo.manifest.sample_count),
    )?;
    let a = audit_runs(&dir.path().join("exact/roo"), &dir.path().join("exact/imp")).map_err(|e| e.to_string())?;
    check(!a.labels.is_empty(), "no labels audited")?;
    for l in &a.labels {
        check(
            l.mismatch_rate == 0.0,
            format!("loss 0: label {} mismatch {}", l.label.0, l.mismatch_rate),
        )?;
    }

    let p = 0.001;
    let lossy = audit_config(p);
    pipeline_pair(&lossy, &dir.path().join("lossy"))?;
    let a = audit_runs(&dir.path().join("lossy/roo"), &dir.path().join("lossy/imp")).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    for l in &a.labels {
        let sigma = (p * (1.0 - p) / l.union as f64).sqrt();
        check(
            (l.mismatch_rate - p).abs() <= 3.0 * sigma,
            format!(
                "loss {p}: label {} mismatch {} outside {p} +- {}",
                l.label.0,
                l.mismatch_rate,
                3.0 * sigma
            ),
        )?;
        parts.push(format!(
            "label {} {:.4}% of {} (3 sigma {:.4}%)",
            l.label.0,
            l.mismatch_rate * 100.0,
            l.union,
            3.0 * sigma * 100.0
        ));
    }
    Ok(format!(
        "{} requests: loss 0 gives 0 for {} labels; loss 0.1%: {}",
        roo.manifest.sample_count,
        a.labels.len(),
        parts.join(", ")
    ))
}

fn landing_latency() -> Outcome {
    let c = corpus_config(61, 2_500, ImpressionDist::default());
    let events = generate_events(&c.generator).map_err(|e| e.to_string())?;
    let t = c.joiner.window_ms as f64;
    check(
        c.generator.window_ms == c.joiner.window_ms,
        "generator and joiner windows differ",
    )?;
    let dynamic = join_stream(
        &events,
        &JoinerConfig {
            dynamic_trigger: true,
            ..c.joiner.clone()
        },
    )
    .map_err(|e| e.to_string())?;
    let fixed = join_stream(&events, &c.joiner).map_err(|e| e.to_string())?;
    let n = dynamic.metrics.samples_published;
    check(n >= 10_000, format!("{n} requests"))?;
    let dyn_frac = dynamic.metrics.mean_landing_latency_ms / t;
    check(
        (0.4..=0.6).contains(&dyn_frac),
        format!("dynamic mean landing latency {dyn_frac} T"),
    )?;
    check(
        fixed.metrics.mean_landing_latency_ms == t,
        format!(
            "fixed mean landing latency {} ms, T = {t}",
            fixed.metrics.mean_landing_latency_ms
        ),
    )?;
    Ok(format!(
        "{n} requests: dynamic {dyn_frac:.4} T, fixed {:.4} T",
        fixed.metrics.mean_landing_latency_ms / t
    ))
}

fn jsonl(samples: &[RequestSample]) -> String {
    samples.iter().map(|s| s.canonical_json() + "\n").collect()
}

fn round_trips() -> Outcome {
    let c = corpus_config(71, 250, ImpressionDist::default());
    let events = generate_events(&c.generator).map_err(|e| e.to_string())?;
    let samples = join_stream(&events, &c.joiner)
        .map_err(|e| e.to_string())?
        .into_samples();
    check(samples.len() == 1_000, format!("{} samples", samples.len()))?;

    let bytes = encode_block(&samples).map_err(|e| e.to_string())?;
    let back = decode_block(&bytes).map_err(|e| e.to_string())?;
    check(jsonl(&back) == jsonl(&samples), "decode(encode(x)) differs")?;
    check(
        encode_block(&back).map_err(|e| e.to_string())? == bytes,
        "re-encoding is not byte-identical",
    )?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("b.roo");
    write_block(&samples, &path).map_err(|e| e.to_string())?;
    check(
        read_block(&path).map_err(|e| e.to_string())? == samples,
        "read(write(x)) differs",
    )?;

    let registry: FeatureRegistry = c.generator.registry();
    let mut rows = Vec::new();
    for s in &samples {
        rows.extend(expand_request_sample(s).map_err(|e| e.to_string())?);
    }
    let regrouped = group_impressions(&rows, &registry).map_err(|e| e.to_string())?;
    check(regrouped == samples, "group(expand(x)) differs")?;

    let again = join_stream(&events, &c.joiner)
        .map_err(|e| e.to_string())?
        .into_samples();
    check(jsonl(&again) == jsonl(&samples), "joiner output differs between runs")?;
    let mut quiet = c.clone();
    quiet.pipeline.architectures = vec![Architecture::Lsr];
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_pipeline(&events, Mode::Roo, &quiet, &a).map_err(|e| e.to_string())?;
    run_pipeline(&events, Mode::Roo, &quiet, &b).map_err(|e| e.to_string())?;
    for f in [
        "manifest.json",
        "counters.json",
        "outputs.jsonl",
        "footprint.json",
        "blocks/block_00000.roo",
    ] {
        check(
            fs::read(a.join(f)).ok() == fs::read(b.join(f)).ok(),
            format!("{f} differs between runs"),
        )?;
    }
    Ok(format!(
        "1000 samples: store byte-exact ({} B), expand/group identity over {} rows, joiner and run directory deterministic",
        bytes.len(),
        rows.len()
    ))
}

fn outputs(dir: &Path) -> Result<BTreeMap<(String, u64, u64), String>, String> {
    let text = fs::read_to_string(dir.join("outputs.jsonl")).map_err(|e| e.to_string())?;
    text.lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).map_err(|e| e.to_string())?;
            Ok((
                (
                    v["arch"].as_str().unwrap_or_default().to_string(),
                    v["request_id"].as_u64().unwrap_or_default(),
                    v["item_id"].as_u64().unwrap_or_default(),
                ),
                v["values"].to_string(),
            ))
        })
        .collect()
}

fn degenerate() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let c = corpus_config(81, 60, ImpressionDist::Fixed { k: 1 });
    let (roo, imp) = pipeline_pair(&c, dir.path())?;
    let events = generate_events(&c.generator).map_err(|e| e.to_string())?;
    let samples = join_stream(&events, &c.joiner)
        .map_err(|e| e.to_string())?
        .into_samples();
    for chunk in samples.chunks(c.pipeline.batch_size) {
        let b = build_batch(chunk, &c.generator.registry(), &c.batch).map_err(|e| e.to_string())?;
        check(b.b_ro == b.b_nro, format!("b_ro {} b_nro {}", b.b_ro, b.b_nro))?;
        check(dedup_ratio(&b).map_err(|e| e.to_string())? == 1.0, "dedup ratio not 1")?;
    }
    for arch in Architecture::ALL {
        let r = measure_run(&roo.counters[arch.name()], &imp.counters[arch.name()]).map_err(|e| e.to_string())?;
        check(
            r.savings_ratio == Some(1.0),
            format!("{}: savings {:?}", arch.name(), r.savings_ratio),
        )?;
        check(
            r.rows_fetched_roo == r.rows_fetched_impression,
            format!("{}: rows differ", arch.name()),
        )?;
        check(
            r.dedup_ratio() == Some(1.0),
            format!("{}: dedup {:?}", arch.name(), r.dedup_ratio()),
        )?;
    }
    let fp = roo.footprint.ok_or("no footprint")?;
    check(
        fp.implied_volume_increase < 0.02,
        format!("implied volume increase {}", fp.implied_volume_increase),
    )?;
    let (a, b) = (outputs(&dir.path().join("roo"))?, outputs(&dir.path().join("imp"))?);
    check(!a.is_empty() && a == b, "outputs differ across modes")?;
    Ok(format!(
        "{} requests: b_ro = b_nro, savings and dedup 1.0, volume increase {:.3}%, {} outputs bitwise equal",
        samples.len(),
        fp.implied_volume_increase * 100.0,
        a.len()
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("cost formula reproduction", cost_formula),
        ("ROO vs impression forward equivalence", forward_equivalence),
        ("dedup counters", dedup_counters),
        ("storage model", storage_model),
        ("join quality", join_quality),
        ("landing latency", landing_latency),
        ("round trips", round_trips),
        ("degenerate correctness", degenerate),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail} ({secs:.2} s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why} ({secs:.2} s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
