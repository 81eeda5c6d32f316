//! Both modes over one stream into run directories, then the consolidated
//! report.

use roo::harness::{audit_runs, build_report, generate_events, render_table, run_pipeline, Config, GeneratorConfig};
use roo::model::Mode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = Config {
        generator: GeneratorConfig {
            num_users: 30,
            ..Default::default()
        },
        ..Default::default()
    }
    .with_seed(3);
    let events = generate_events(&config.generator)?;
    let dir = tempfile::tempdir()?;
    let (roo_dir, imp_dir) = (dir.path().join("roo"), dir.path().join("impression"));
    run_pipeline(&events, Mode::Roo, &config, &roo_dir)?;
    run_pipeline(&events, Mode::Impression, &config, &imp_dir)?;
    let audit_path = dir.path().join("audit.json");
    std::fs::write(&audit_path, serde_json::to_string(&audit_runs(&roo_dir, &imp_dir)?)?)?;
    let report = build_report(Some(&roo_dir), Some(&imp_dir), Some(&audit_path))?;
    print!("{}", render_table(&report));
    Ok(())
}
