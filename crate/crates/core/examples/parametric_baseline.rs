//! Fits every parametric family to a market-price sample by maximum
//! likelihood and compares the best fit's propensities with the DPM's.

use dpm_ope::dpm::{adaptive_bin_count, fit_dpm, DEFAULT_APS_FLOOR, DEFAULT_Z_ALPHA_SQ};
use dpm_ope::parametric::{fit_all, parametric_aps, select_best_fit, Family};
use rand::SeedableRng;
use rand_distr::{Distribution, Gamma};

fn main() -> dpm_ope::error::Result<()> {
    let mut rng = rand::rngs::StdRng::seed_from_u64(3);
    let prices: Vec<f64> = Gamma::new(2.0, 0.5)
        .unwrap()
        .sample_iter(&mut rng)
        .take(20_000)
        .collect();
    for (family, fit) in fit_all(&prices, &Family::ALL) {
        match fit {
            Ok(f) => println!("{family:<12} logL = {:>12.2}  AIC = {:>12.2}", f.log_likelihood, f.aic()),
            Err(e) => println!("{family:<12} {e}"),
        }
    }
    let best = select_best_fit(&prices)?;
    println!("best: {:?}", best.params);

    let dpm = fit_dpm(&prices, adaptive_bin_count(prices.len(), DEFAULT_Z_ALPHA_SQ)?, DEFAULT_APS_FLOOR)?;
    println!("{:>6} {:>10} {:>12}", "score", "DPM APS", "param APS");
    for score in [0.25, 0.5, 1.0, 2.0, 3.0] {
        println!(
            "{score:>6} {:>10.4} {:>12.4}",
            dpm.aps(score),
            parametric_aps(&best, &dpm.bins, score, DEFAULT_APS_FLOOR)
        );
    }
    Ok(())
}
