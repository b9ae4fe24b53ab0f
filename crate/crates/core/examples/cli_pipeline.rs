//! The simulate -> evaluate -> report flow the command-line tool runs, here
//! driven from code into a temporary directory.

use dpm_ope::pipeline::{run_evaluate, run_report, run_simulate, ExperimentConfig, REPORT_FILE};

fn main() -> dpm_ope::error::Result<()> {
    let out = std::env::temp_dir().join("dpm-ope-example");
    let config = ExperimentConfig::from_toml_with_overrides(
        r#"
[simulation]
n_auctions = 100000
base_ctr = 0.05
policies = [{ name = "candidate", sigma = 1.0 }]
"#,
        &[format!("output_dir={:?}", out.display().to_string())],
    )?;
    run_simulate(&config)?;
    run_evaluate(&config)?;
    run_report(&config)?;
    let report = out.join(REPORT_FILE);
    println!("{}", std::fs::read_to_string(&report).unwrap_or_default());
    println!("artifacts in {}", out.display());
    Ok(())
}
