//! Emulates a 14-day online test: each evaluation policy's true lift over the
//! logging policy, day by day, from the counterfactual clicks.

use dpm_ope::simulator::{calibrate_sigma, make_ab_schedule, PolicySpec, SimConfig, SimulationWorld};

fn main() -> dpm_ope::error::Result<()> {
    let mut config = SimConfig {
        n_auctions: 280_000,
        base_ctr: 0.05,
        ..SimConfig::default()
    };
    let sigma = calibrate_sigma(&config, 10.0, "plus10")?;
    println!("sigma for +10% expected lift: {sigma:.4}");
    config.policies = vec![PolicySpec::perturbed("plus10", sigma)];
    let world = SimulationWorld::generate(&config)?;
    println!("{:>3} {:>8} {:>8} {:>8} {:>9}", "day", "imps", "clk0", "clk1", "lift(%)");
    for d in make_ab_schedule(&world, 14)? {
        println!(
            "{:>3} {:>8} {:>8} {:>8} {:>9.2}",
            d.day, d.impressions, d.logging_clicks, d.policy_clicks, d.truth_lift
        );
    }
    Ok(())
}
