//! Consolidated report over finished runs. Sections are copied from the
//! run directories; a missing input leaves its section absent.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cost::{measure_run, CostReport};
use crate::joiner::JoinerMetrics;
use crate::model::Counters;
use crate::store::FootprintReport;

use super::audit::AuditReport;
use super::impression_join::ImpressionJoinMetrics;
use super::pipeline::{load_manifest, read_json};
use super::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub stream_hash: Option<String>,
    pub footprint: Option<FootprintReport>,
    pub cost: Option<BTreeMap<String, CostReport>>,
    pub audit: Option<AuditReport>,
    pub latency: Option<JoinerMetrics>,
    pub impression_join: Option<ImpressionJoinMetrics>,
}

/// Rounds to 6 significant digits.
pub fn sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

fn round_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64().and_then(|x| serde_json::Number::from_f64(sig6(x))) {
                *n = x;
            }
        }
        Value::Array(a) => a.iter_mut().for_each(round_floats),
        Value::Object(o) => o.values_mut().for_each(round_floats),
        _ => {}
    }
}

fn optional<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>, HarnessError> {
    if path.exists() {
        read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

pub fn build_report(
    roo_dir: Option<&Path>,
    impression_dir: Option<&Path>,
    audit: Option<&Path>,
) -> Result<Report, HarnessError> {
    let roo_manifest = roo_dir.map(load_manifest).transpose()?;
    let imp_manifest = impression_dir.map(load_manifest).transpose()?;
    if let (Some(a), Some(b)) = (&roo_manifest, &imp_manifest) {
        if a.stream_hash != b.stream_hash {
            return Err(HarnessError::StreamMismatch(
                a.stream_hash.clone(),
                b.stream_hash.clone(),
            ));
        }
    }
    let stream_hash = roo_manifest.or(imp_manifest).map(|m| m.stream_hash);

    let audit: Option<AuditReport> = match audit {
        Some(p) if !p.exists() => return Err(HarnessError::Missing(p.display().to_string())),
        Some(p) => Some(read_json(p)?),
        None => None,
    };
    if let (Some(a), Some(h)) = (&audit, &stream_hash) {
        if &a.stream_hash != h {
            return Err(HarnessError::StreamMismatch(a.stream_hash.clone(), h.clone()));
        }
    }

    let footprint = roo_dir
        .map(|d| optional(&d.join("footprint.json")))
        .transpose()?
        .flatten();
    let latency = roo_dir
        .map(|d| optional(&d.join("join_metrics.json")))
        .transpose()?
        .flatten();
    let impression_join = impression_dir
        .map(|d| optional(&d.join("join_metrics.json")))
        .transpose()?
        .flatten();
    let roo_counters: Option<BTreeMap<String, Counters>> = roo_dir
        .map(|d| optional(&d.join("counters.json")))
        .transpose()?
        .flatten();
    let imp_counters: Option<BTreeMap<String, Counters>> = impression_dir
        .map(|d| optional(&d.join("counters.json")))
        .transpose()?
        .flatten();
    let cost = match (roo_counters, imp_counters) {
        (Some(r), Some(i)) => {
            let mut out = BTreeMap::new();
            for (arch, rc) in &r {
                if let Some(ic) = i.get(arch) {
                    out.insert(arch.clone(), measure_run(rc, ic)?);
                }
            }
            Some(out)
        }
        _ => None,
    };
    Ok(Report {
        stream_hash,
        footprint,
        cost,
        audit,
        latency,
        impression_join,
    })
}

impl Report {
    /// Pretty JSON with every float rounded to 6 significant digits.
    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        round_floats(&mut v);
        serde_json::to_string_pretty(&v).expect("value serializes") + "\n"
    }
}

fn g(x: f64) -> String {
    format!("{}", sig6(x))
}

/// Human-readable rendering of [`Report`].
pub fn render_table(r: &Report) -> String {
    let mut s = String::new();
    let absent = "  (absent)\n";
    let _ = writeln!(s, "stream  {}", r.stream_hash.as_deref().unwrap_or("-"));

    let _ = writeln!(s, "\n[footprint]");
    match &r.footprint {
        Some(f) => {
            let _ = writeln!(s, "  samples                      {}", f.sample_count);
            let _ = writeln!(s, "  impressions                  {}", f.impression_count);
            let _ = writeln!(s, "  roo_bytes                    {}", f.roo_bytes);
            let _ = writeln!(s, "  impression_bytes             {}", f.impression_bytes);
            let _ = writeln!(s, "  ro_byte_share                {}", g(f.ro_byte_share));
            let _ = writeln!(
                s,
                "  mean_impressions_per_request {}",
                g(f.mean_impressions_per_request)
            );
            let _ = writeln!(s, "  implied_volume_increase      {}", g(f.implied_volume_increase));
        }
        None => s.push_str(absent),
    }

    let _ = writeln!(s, "\n[cost]");
    match &r.cost {
        Some(c) if !c.is_empty() => {
            let _ = writeln!(
                s,
                "  {:<10} {:>8} {:>8} {:>14} {:>14} {:>10} {:>12} {:>12}",
                "arch", "b_ro", "b_nro", "roo_flops", "imp_flops", "savings", "rows_roo", "rows_imp"
            );
            for (arch, c) in c {
                let _ = writeln!(
                    s,
                    "  {:<10} {:>8} {:>8} {:>14} {:>14} {:>10} {:>12} {:>12}",
                    arch,
                    c.b_ro,
                    c.b_nro,
                    c.roo_flops,
                    c.impression_flops,
                    c.savings_ratio.map_or("-".into(), g),
                    c.rows_fetched_roo,
                    c.rows_fetched_impression
                );
            }
        }
        _ => s.push_str(absent),
    }

    let _ = writeln!(s, "\n[audit]");
    match &r.audit {
        Some(a) => {
            let _ = writeln!(s, "  sample_coverage   {}", g(a.sample_coverage));
            let _ = writeln!(s, "  feature_coverage  {}", g(a.feature_coverage));
            for l in &a.labels {
                let _ = writeln!(
                    s,
                    "  label {:<4} mismatch {} ({} roo-only, {} impression-only of {})",
                    l.label.0,
                    g(l.mismatch_rate),
                    l.roo_only,
                    l.impression_only,
                    l.union
                );
            }
        }
        None => s.push_str(absent),
    }

    let _ = writeln!(s, "\n[latency]");
    match &r.latency {
        Some(m) => {
            let _ = writeln!(s, "  samples_published        {}", m.samples_published);
            let _ = writeln!(s, "  mean_landing_latency_ms  {}", g(m.mean_landing_latency_ms));
            let _ = writeln!(s, "  mean_close_latency_ms    {}", g(m.mean_close_latency_ms));
            let _ = writeln!(s, "  late_events_dropped      {}", m.late_events_dropped);
            let _ = writeln!(s, "  orphan_events_dropped    {}", m.orphan_events_dropped);
            for (reason, n) in &m.closes_by_reason {
                let _ = writeln!(s, "  closes[{reason}]  {n}");
            }
        }
        None => s.push_str(absent),
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(9.822_847_3), 9.82285);
        assert_eq!(sig6(0.000_123_456_78), 0.000123457);
        assert_eq!(sig6(0.0), 0.0);
        assert_eq!(sig6(1234567.0), 1234570.0);
    }

    #[test]
    fn empty_report_marks_sections_absent() {
        let r = build_report(None, None, None).unwrap();
        let t = render_table(&r);
        assert_eq!(t.matches("(absent)").count(), 4);
        assert!(r.to_json().contains("\"audit\": null"));
    }

    #[test]
    fn missing_audit_file_is_an_error() {
        let e = build_report(None, None, Some(Path::new("/nonexistent/audit.json"))).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }
}
