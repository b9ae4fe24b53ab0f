//! Adaptive bin count against fixed 100 / 1,000 / 10,000 bins.

use dpm_ope::estimators::Estimator;
use dpm_ope::pipeline::{ablation_text, run_ablation, AblationSpec, ExperimentConfig};

fn main() -> dpm_ope::error::Result<()> {
    let config = ExperimentConfig::from_toml_str(
        r#"
output_dir = "unused"
[simulation]
n_auctions = 200000
n_segments = 2
segment_bid_shift = 0.0
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
        bins: ["adaptive", "100", "1000", "10000"]
            .iter()
            .map(|b| b.parse())
            .collect::<dpm_ope::error::Result<_>>()?,
        estimators: vec![Estimator::CappedSnips],
        replications: 3,
    };
    print!("{}", ablation_text(&run_ablation(&config, &spec)?, &config));
    Ok(())
}
