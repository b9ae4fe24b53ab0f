use dpm_ope::simulator::{simulate, PolicySpec, SimConfig, SimulationWorld};

fn config(seed: u64, n: usize, policies: Vec<PolicySpec>) -> SimConfig {
    SimConfig {
        seed,
        n_auctions: n,
        base_ctr: 0.05,
        policies,
        ..SimConfig::default()
    }
}

/// Recomputes winners, prices and clicks of every auction from its raw draws
/// with a sort instead of the generator's own argmax.
#[test]
fn brute_force_replay_matches_world() {
    let cfg = config(
        11,
        3_000,
        vec![
            PolicySpec::perturbed("a", 0.7),
            PolicySpec::perturbed("b", 3.0),
            PolicySpec::constant("c"),
        ],
    );
    let world = SimulationWorld::generate(&cfg).unwrap();
    let data = world.dataset().unwrap();
    let truth = world.ground_truth();
    let n_p = world.policies.len();
    let mut clicks = vec![0u64; n_p];
    for a in 0..cfg.n_auctions {
        let d = world.regenerate_auction(a).unwrap();
        for (x, c) in d.beta_draws.iter().zip(&d.true_ctr) {
            assert_eq!(*c, (world.scale * x).min(1.0));
        }
        let winner = |p: usize| {
            let mut idx: Vec<usize> = (0..cfg.n_candidates).collect();
            // Descending score, then ascending index.
            idx.sort_by(|i, j| d.scores[p][*j].partial_cmp(&d.scores[p][*i]).unwrap().then(i.cmp(j)));
            idx
        };
        let order0 = winner(0);
        let w0 = order0[0];
        assert_eq!(data.score_logging()[a], d.scores[0][w0]);
        assert_eq!(data.market_prices()[a], Some(d.scores[0][order0[1]]));
        assert_eq!(data.rewards()[a], d.click_uniforms[w0] < d.true_ctr[w0]);
        for p in 0..n_p {
            let wp = winner(p)[0];
            assert_eq!(world.winners[p][a] as usize, wp);
            clicks[p] += u64::from(d.click_uniforms[wp] < d.true_ctr[wp]);
            if p > 0 {
                assert_eq!(data.score_eval(p - 1)[a], d.scores[p][w0]);
                assert_eq!(data.agreement(p - 1).unwrap()[a], wp == w0);
            }
        }
        // Constant policy: every candidate ties, the first one wins.
        assert_eq!(world.winners[3][a], 0);
    }
    for p in 0..n_p {
        assert_eq!(truth.overall[p].clicks, clicks[p], "policy {p}");
        assert_eq!(truth.overall[p].impressions, cfg.n_auctions as u64);
    }
}

#[test]
fn winner_scores_dominate_market_price() {
    let (data, _) = simulate(&config(2, 20_000, vec![PolicySpec::perturbed("a", 1.0)])).unwrap();
    for (s, z) in data.score_logging().iter().zip(data.market_prices()) {
        assert!(*s >= z.unwrap());
    }
}

#[test]
fn logged_ctr_concentrates_at_default_scale() {
    let cfg = SimConfig {
        n_auctions: 1_000_000,
        ..SimConfig::default()
    };
    assert_eq!(cfg.base_ctr, 0.001);
    let (data, truth) = simulate(&cfg).unwrap();
    let ctr = data.logged_ctr();
    assert!((0.0008..=0.0012).contains(&ctr), "{ctr}");
    assert_eq!(truth.value("logging").unwrap(), ctr);
}

#[test]
fn oracle_policy_dominates() {
    let mut wins = 0;
    for seed in 0..100 {
        let cfg = config(
            seed,
            20_000,
            vec![
                PolicySpec::perturbed("oracle", 0.0),
                PolicySpec::perturbed("good", 0.5),
                PolicySpec::perturbed("fair", 1.5),
                PolicySpec::constant("flat"),
            ],
        );
        let world = SimulationWorld::generate(&cfg).unwrap();
        let truth = world.ground_truth();
        let oracle = truth.value("oracle").unwrap();
        if truth
            .policies
            .iter()
            .all(|p| truth.value(p).unwrap() <= oracle)
        {
            wins += 1;
        }
    }
    assert!(wins >= 95, "oracle dominated in {wins} of 100 seeds");
}

#[test]
fn constant_policy_value_is_first_candidate_ctr() {
    let cfg = config(5, 5_000, vec![PolicySpec::constant("flat")]);
    let world = SimulationWorld::generate(&cfg).unwrap();
    let mean_first: f64 = (0..cfg.n_auctions)
        .map(|a| world.regenerate_auction(a).unwrap().true_ctr[0])
        .sum::<f64>()
        / cfg.n_auctions as f64;
    assert!((world.expected_value("flat").unwrap() - mean_first).abs() < 1e-12);
}

#[test]
fn adding_a_policy_leaves_existing_streams_alone() {
    let one = SimulationWorld::generate(&config(8, 4_000, vec![PolicySpec::perturbed("a", 1.0)])).unwrap();
    let two = SimulationWorld::generate(&config(
        8,
        4_000,
        vec![PolicySpec::perturbed("a", 1.0), PolicySpec::perturbed("b", 2.0)],
    ))
    .unwrap();
    assert_eq!(one.winners[1], two.winners[1]);
    assert_eq!(one.rewards[0], two.rewards[0]);
    assert_eq!(one.market_price, two.market_price);
}
