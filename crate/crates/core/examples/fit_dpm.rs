//! Fits a discrete price model to a sample of market prices and prints the
//! per-bin tables.

use dpm_ope::dpm::{adaptive_bin_count, fit_dpm, DEFAULT_APS_FLOOR, DEFAULT_Z_ALPHA_SQ};
use rand::SeedableRng;
use rand_distr::{Distribution, LogNormal};

fn main() -> dpm_ope::error::Result<()> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    let prices: Vec<f64> = LogNormal::new(0.0, 0.8)
        .unwrap()
        .sample_iter(&mut rng)
        .take(5_000)
        .collect();
    let bins = adaptive_bin_count(prices.len(), DEFAULT_Z_ALPHA_SQ)?;
    let model = fit_dpm(&prices, bins, DEFAULT_APS_FLOOR)?;
    model.check_invariants()?;

    println!("{} prices, {} bins", prices.len(), model.num_bins());
    println!("{:>4} {:>10} {:>10} {:>8} {:>8} {:>8}", "bin", "lo", "hi", "p", "S", "h");
    let edges = &model.bins.edges;
    for l in 0..model.num_bins() {
        println!(
            "{:>4} {:>10.4} {:>10.4} {:>8.4} {:>8.4} {:>8.4}",
            l, edges[l], edges[l + 1], model.p[l], model.survival[l], model.hazard[l]
        );
    }
    for score in [0.5, 1.0, 2.0] {
        println!("APS at score {score}: {:.4}", model.aps(score));
    }
    Ok(())
}
