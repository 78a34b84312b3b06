mod common;

use common::{fixture, registry, tasks};
use restore_core::agent::{AgentAction, Mode, Policy, PolicyContext, RandomPolicy, SessionState};
use restore_core::bench::{run_comparison, BenchConfig, Combo};
use restore_core::space::{enumerate_decisions, rank_of, search_space};
use restore_core::{Execution, ScoreConfig};

#[test]
fn random_policy_is_uniform_over_full_length_decisions() {
    let reg = registry();
    let set = tasks(&["rain", "noise", "jpeg"]);
    let (reference, degraded) = fixture(21, &set, 32);
    let space = enumerate_decisions(&reg, &set, false).unwrap();
    let n = space.len();
    assert_eq!(n, 36);
    let table = search_space(&degraded, &reference, &space, &reg, &ScoreConfig::default(), Execution::Serial).unwrap();
    let trials = 720;
    let mut hits = vec![0usize; n];
    let mut ranks = Vec::new();
    for seed in 0..trials {
        let state = SessionState::new(degraded.clone(), 12);
        let ctx = PolicyContext { state: &state, tasks: &set, registry: &reg, reference: None, mode: Mode::SingleShot };
        let AgentAction::Pipeline(d) = RandomPolicy::new(seed).decide(&ctx).unwrap() else { panic!("not a pipeline") };
        assert_eq!(d.len(), set.len());
        hits[space.candidates().iter().position(|c| *c == d).unwrap()] += 1;
        ranks.push(rank_of(&d, &table.table).unwrap() as f64);
    }
    let mean = ranks.iter().sum::<f64>() / trials as f64;
    // ranks of a uniform draw over 1..=n, assuming no ties
    let sd = (((n * n - 1) as f64) / 12.0).sqrt();
    let se = sd / (trials as f64).sqrt();
    assert!((mean - (n + 1) as f64 / 2.0).abs() < 3.0 * se, "mean rank {mean}, se {se}");
    // Pearson chi-square against uniform, 35 dof: p = 0.001 at 66.6
    let e = trials as f64 / n as f64;
    let chi2: f64 = hits.iter().map(|&h| (h as f64 - e).powi(2) / e).sum();
    assert!(chi2 < 66.6, "chi2 {chi2}");
}

#[test]
fn greedy_beats_random_on_noise_and_jpeg() {
    let reg = registry();
    let mut cfg = BenchConfig::default();
    cfg.dataset.size = 64;
    cfg.dataset.combos = vec![Combo { tasks: vec!["noise".into(), "jpeg".into()], count: 30 }];
    cfg.strategies = vec!["oracle".into(), "greedy".into(), "random".into()];
    let out = run_comparison(&cfg, &reg, Execution::default()).unwrap();
    assert!(out.failures.is_empty());
    let row = |s: &str| out.rows.iter().find(|r| r.strategy == s && r.n.is_some()).unwrap();
    assert_eq!(row("oracle").mean_rank, 1.0);
    assert!(row("greedy").mean_rank <= row("random").mean_rank);
    for s in ["greedy", "random"] {
        assert!(row(s).balanced <= row("oracle").balanced);
        assert!(row(s).rank_pct > 0.0 && row(s).rank_pct <= 100.0);
    }
    let avg = out.rows.iter().find(|r| r.group == "average" && r.strategy == "greedy").unwrap();
    assert_eq!(avg.mean_rank, row("greedy").mean_rank);
    assert_eq!(avg.n, None);
}
