//! IPS vs SNIPS vs capped SNIPS over replicated worlds, with paired t-tests
//! on the per-unit absolute errors.

use dpm_ope::dpm::BinningStrategy;
use dpm_ope::estimators::Estimator;
use dpm_ope::pipeline::{ablation_text, run_ablation, AblationSpec, ExperimentConfig};

fn main() -> dpm_ope::error::Result<()> {
    let config = ExperimentConfig::from_toml_str(
        r#"
output_dir = "unused"
[simulation]
n_auctions = 100000
n_segments = 2
segment_bid_shift = 0.0
ctr_alpha = 0.2
base_ctr = 0.05
policies = [
  { name = "close", sigma = 0.1 },
  { name = "mid", sigma = 1.7 },
  { name = "far", sigma = 3.6 },
]
[dpm]
segmentation_candidates = ["segment_key"]
"#,
    )?;
    let spec = AblationSpec {
        bins: vec![BinningStrategy::default()],
        estimators: vec![Estimator::Ips, Estimator::Snips, Estimator::CappedSnips],
        replications: 5,
    };
    print!("{}", ablation_text(&run_ablation(&config, &spec)?, &config));
    Ok(())
}
