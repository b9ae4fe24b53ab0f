//! End-to-end evaluation in memory: simulate logs, fit DPM and parametric
//! propensities, run every estimator and score daily lifts against truth.

use dpm_ope::pipeline::{evaluate_dataset, summary_text, ExperimentConfig};
use dpm_ope::simulator::{simulate, PolicySpec, SimConfig};

fn main() -> dpm_ope::error::Result<()> {
    let mut config = ExperimentConfig::from_toml_str(
        r#"
output_dir = "unused"
[simulation]
n_auctions = 200000
base_ctr = 0.05
"#,
    )?;
    let sim: &mut SimConfig = config.simulation.as_mut().expect("set above");
    sim.policies = vec![
        PolicySpec::perturbed("sharper", 1.0),
        PolicySpec::perturbed("noisier", 3.5),
        PolicySpec::perturbed("twin", 2.5).with_stream("logging"),
    ];
    let (data, truth) = simulate(sim)?;
    let eval = evaluate_dataset(&data, Some(&truth), &config)?;
    print!("{}", summary_text(&eval, &config));
    Ok(())
}
