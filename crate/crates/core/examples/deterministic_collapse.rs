//! With 0/1 propensities an evaluation policy only keeps the clicks where it
//! agrees with the logging policy, so its IPS estimate can never beat the
//! logged CTR, however good the policy really is.

use dpm_ope::estimators::deterministic_ips;
use dpm_ope::simulator::{simulate, PolicySpec, SimConfig};

fn main() -> dpm_ope::error::Result<()> {
    let config = SimConfig {
        n_auctions: 100_000,
        base_ctr: 0.01,
        policies: vec![
            PolicySpec::perturbed("better", 0.2),
            PolicySpec::perturbed("worse", 5.0),
            PolicySpec::perturbed("same", 2.5).with_stream("logging"),
        ],
        ..SimConfig::default()
    };
    let (data, truth) = simulate(&config)?;
    println!("logged CTR          {:.6}", data.logged_ctr());
    for policy in data.policy_names() {
        let est = deterministic_ips(&data, policy)?;
        println!(
            "{policy:<8} deterministic IPS {:.6}   true CTR {:.6}",
            est.value,
            truth.value(policy)?
        );
    }
    Ok(())
}
