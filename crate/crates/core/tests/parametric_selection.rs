use dpm_ope::dpm::{adaptive_bin_count, fit_dpm, DEFAULT_APS_FLOOR, DEFAULT_Z_ALPHA_SQ};
use dpm_ope::parametric::{select_best_fit, Family, ParametricSegment};
use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Beta, Distribution, Exp, Gamma, LogNormal, Normal};

fn draws(family: Family, seed: u64, n: usize) -> Vec<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    match family {
        Family::Normal => Normal::new(10.0, 1.5).unwrap().sample_iter(&mut rng).take(n).collect(),
        Family::LogNormal => LogNormal::new(0.0, 0.6).unwrap().sample_iter(&mut rng).take(n).collect(),
        Family::Beta => Beta::new(2.0, 5.0).unwrap().sample_iter(&mut rng).take(n).collect(),
        Family::Gamma => Gamma::new(3.0, 0.5).unwrap().sample_iter(&mut rng).take(n).collect(),
        Family::Exponential => Exp::new(1.5).unwrap().sample_iter(&mut rng).take(n).collect(),
    }
}

/// Families whose fits can reproduce `family` exactly.
fn accepted(family: Family) -> &'static [Family] {
    match family {
        Family::Exponential => &[Family::Exponential, Family::Gamma],
        Family::Normal => &[Family::Normal],
        Family::LogNormal => &[Family::LogNormal],
        Family::Beta => &[Family::Beta],
        Family::Gamma => &[Family::Gamma],
    }
}

#[test]
fn generating_family_is_selected_at_least_90_percent() {
    for family in Family::ALL {
        let mut hits = 0;
        let mut picked = Vec::new();
        for seed in 0..100 {
            let fit = select_best_fit(&draws(family, seed, 50_000)).unwrap();
            if accepted(family).contains(&fit.family()) {
                hits += 1;
            } else {
                picked.push(fit.family());
            }
        }
        assert!(hits >= 90, "{family}: {hits}/100, others {picked:?}");
    }
}

#[test]
fn log_normal_hazards_track_the_empirical_model() {
    let v = draws(Family::LogNormal, 42, 100_000);
    let l = adaptive_bin_count(v.len(), DEFAULT_Z_ALPHA_SQ).unwrap();
    let dpm = fit_dpm(&v, l, DEFAULT_APS_FLOOR).unwrap();
    let fit = select_best_fit(&v).unwrap();
    assert_eq!(fit.family(), Family::LogNormal);
    let seg = ParametricSegment::new("s".into(), fit, dpm.bins.clone(), DEFAULT_APS_FLOOR).unwrap();
    let tol = 2.0 / (2.0 * l as f64);
    for (j, (a, b)) in seg.hazard.iter().zip(&dpm.hazard).enumerate() {
        assert!((a - b).abs() <= tol, "bin {j}: {a} vs {b} (tol {tol})");
    }
}

#[test]
fn hazard_product_reproduces_normalized_survival() {
    for family in Family::ALL {
        let v = draws(family, 7, 20_000);
        let fit = select_best_fit(&v).unwrap();
        let dpm = fit_dpm(&v, 40, DEFAULT_APS_FLOOR).unwrap();
        let seg = ParametricSegment::new("s".into(), fit, dpm.bins.clone(), DEFAULT_APS_FLOOR).unwrap();
        let edges = &dpm.bins.edges;
        let base = fit.params.sf(edges[0]);
        let mut prod = 1.0;
        for (j, h) in seg.hazard.iter().enumerate() {
            prod *= 1.0 - h;
            let target = fit.params.sf(edges[j + 1]) / base;
            // Clamping at the floor or at 1 breaks the identity; skip those bins.
            if *h > DEFAULT_APS_FLOOR && *h < 1.0 {
                assert!((prod - target).abs() <= 1e-6, "{family} bin {j}: {prod} vs {target}");
            } else {
                prod = target;
            }
        }
    }
}
