use proptest::prelude::*;
use recess_core::attacks::{self, AttackerView, DirectionReference, PerturbationKind};
use recess_core::defenses;
use recess_core::harness::{self, ExperimentConfig};
use recess_core::GradientVector;

fn gv(v: &[f64]) -> GradientVector {
    GradientVector::new(v.to_vec()).unwrap()
}

fn view(g: &[Vec<f64>], n: usize, c: usize) -> AttackerView {
    AttackerView {
        benign_gradients: g.iter().map(|r| gv(r)).collect(),
        num_clients: n,
        num_malicious: c,
        last_aggregate: None,
        reference: DirectionReference::ViewMean,
    }
}

fn benign_set(max_n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..max_n, 1usize..6).prop_flat_map(|(n, d)| prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Standard normal CDF by Simpson's rule on the density.
fn phi(z: f64) -> f64 {
    let steps = 2000;
    let h = z / steps as f64;
    let f = |x: f64| (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(0.0) + f(z);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(i as f64 * h);
    }
    0.5 + s * h / 3.0
}

fn inverse_phi(p: f64) -> f64 {
    let (mut lo, mut hi) = (-8.0, 8.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn lie_z_matches_quadrature_oracle() {
    for (n, c) in [(50, 10), (30, 6), (20, 4), (10, 2), (7, 1)] {
        let s = n / 2 + 1 - c;
        let arg = (n - c - s) as f64 / (n - c) as f64;
        let want = inverse_phi(arg);
        let got = attacks::lie_z(n, c).unwrap();
        assert!((got - want).abs() < 1e-7, "n={n} c={c}: {got} vs {want}");
    }
    assert!((attacks::lie_z(50, 10).unwrap() - 0.2533).abs() < 1e-4);
    assert_eq!(attacks::lie_z(4, 2).unwrap(), 0.0);
}

/// Brute force over every benign point and every neighbour subset size.
fn brute_lambda(g: &[Vec<f64>], n: usize, c: usize) -> (f64, f64) {
    let d = g[0].len() as f64;
    let k = (n - c - 2).min(g.len() - 1).max(1);
    let mean: Vec<f64> = (0..g[0].len()).map(|j| g.iter().map(|r| r[j]).sum::<f64>() / g.len() as f64).collect();
    let mut best = f64::INFINITY;
    for i in 0..g.len() {
        let mut ds: Vec<f64> = (0..g.len()).filter(|&l| l != i).map(|l| dist(&g[l], &g[i])).collect();
        ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        best = best.min(ds[..k].iter().sum());
    }
    let d1 = best / ((n - 2 * c - 1) as f64 * d.sqrt());
    let d2 = g.iter().map(|r| dist(r, &mean)).fold(0.0, f64::max) / d.sqrt();
    (d1, d2)
}

#[test]
fn fang_lambda_small_example() {
    let g = vec![vec![1.0], vec![1.1], vec![0.9]];
    let l = attacks::fang_lambda(&view(&g, 4, 1)).unwrap();
    // Neighbours of 1.0 are at 0.1 each; the sum of one closest is 0.1.
    // D₁ = 0.1 / (4 − 2 − 1) = 0.1, D₂ = max |gᵢ − 1.0| = 0.1.
    assert!((l.d1 - 0.1).abs() < 1e-12);
    assert!((l.d2 - 0.1).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fang_lambda_matches_brute_force(g in benign_set(9), c in 1usize..3) {
        let n = g.len() + c;
        prop_assume!(n > 2 * c + 1 && n >= c + 3);
        let l = attacks::fang_lambda(&view(&g, n, c)).unwrap();
        let (d1, d2) = brute_lambda(&g, n, c);
        prop_assert!((l.d1 - d1).abs() <= 1e-9 * (1.0 + d1));
        prop_assert!((l.d2 - d2).abs() <= 1e-9 * (1.0 + d2));
    }

    #[test]
    fn fang_output_is_krum_selected(g in benign_set(10), c in 1usize..3, seed in any::<u64>()) {
        let n = g.len() + c;
        prop_assume!(n > 2 * c + 1 && n >= c + 3);
        let out = attacks::fang_opt_attack(&view(&g, n, c), seed).unwrap();
        prop_assert_eq!(out.gradients.len(), c);
        if out.lambda >= 1e-5 {
            let mut pool = out.gradients.clone();
            pool.extend(g.iter().map(|r| gv(r)));
            let (_, idx) = defenses::krum(&pool, c).unwrap();
            prop_assert!(idx < c);
        }
    }

    #[test]
    fn minmax_stays_within_benign_diameter(g in benign_set(10), pert in 0usize..3) {
        let pert = [PerturbationKind::InverseUnit, PerturbationKind::InverseStd, PerturbationKind::InverseSign][pert];
        let out = attacks::agr_minmax(&view(&g, g.len() + 2, 2), pert).unwrap();
        let diameter = g.iter().flat_map(|a| g.iter().map(move |b| dist(a, b))).fold(0.0, f64::max);
        let reach = g.iter().map(|r| dist(out.as_slice(), r)).fold(0.0, f64::max);
        prop_assert!(reach <= diameter * (1.0 + 1e-6) + 1e-12);
    }

    #[test]
    fn minsum_stays_within_benign_spread(g in benign_set(10), pert in 0usize..3) {
        let pert = [PerturbationKind::InverseUnit, PerturbationKind::InverseStd, PerturbationKind::InverseSign][pert];
        let out = attacks::agr_minsum(&view(&g, g.len() + 2, 2), pert).unwrap();
        let sum_sq = |x: &[f64]| g.iter().map(|r| dist(x, r).powi(2)).sum::<f64>();
        let bound = g.iter().map(|r| sum_sq(r)).fold(0.0, f64::max);
        prop_assert!(sum_sq(out.as_slice()) <= bound * (1.0 + 1e-6) + 1e-12);
    }

    #[test]
    fn lie_degenerates_to_mean_without_spread(row in prop::collection::vec(-3.0f64..3.0, 1..6), k in 2usize..8) {
        let g = vec![row.clone(); k];
        let out = attacks::lie_attack(&view(&g, k + 2, 1)).unwrap();
        for (a, b) in out.iter().zip(&row) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn krum_selection_follows_permutation(g in benign_set(9), rot in 0usize..9) {
        let n = g.len();
        prop_assume!(n >= 3);
        let gvs: Vec<GradientVector> = g.iter().map(|r| gv(r)).collect();
        let (picked, idx) = defenses::krum(&gvs, 0).unwrap();
        let mut rotated = gvs.clone();
        rotated.rotate_left(rot % n);
        let (picked2, idx2) = defenses::krum(&rotated, 0).unwrap();
        let scores = defenses::krum_scores(&gvs, 0).unwrap();
        let best = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let ties = scores.iter().filter(|&&s| s == best).count();
        prop_assume!(ties == 1);
        prop_assert_eq!(picked, picked2);
        prop_assert_eq!((idx2 + rot % n) % n, idx);
    }
}

fn tiny(v: serde_json::Value) -> ExperimentConfig {
    let mut base = serde_json::json!({
        "task": { "type": "synthetic", "feature_dim": 8, "train_per_class": 200, "test_per_class": 100 },
        "num_clients": 10,
        "rounds": 12,
        "detection_schedule": { "type": "consecutive", "k": 4 }
    });
    for (k, val) in v.as_object().unwrap() {
        base[k] = val.clone();
    }
    ExperimentConfig::from_json(&base.to_string()).unwrap()
}

#[test]
fn round_records_respect_invariants() {
    for defense in ["recess", "fedavg", "median", "recess_median"] {
        let cfg = tiny(serde_json::json!({
            "defense": { "type": defense },
            "attack": { "kind": { "type": "agr_min_max" } }
        }));
        let out = harness::run_experiment(&cfg).unwrap();
        assert_eq!(out.records.len(), 12);
        for r in &out.records {
            assert!((0.0..=1.0).contains(&r.accuracy));
            if r.detection {
                assert_eq!(r.agg_norm, 0.0);
                continue;
            }
            let w: Vec<f64> = r.clients.iter().filter(|c| !c.flagged).filter_map(|c| c.weight).collect();
            if !w.is_empty() {
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{defense} round {}", r.round);
            }
        }
        if defense.starts_with("recess") {
            assert_eq!(out.records.iter().filter(|r| r.detection).count(), 4);
        }
    }
}

#[test]
fn flagged_clients_never_contribute_again() {
    let cfg = tiny(serde_json::json!({
        "defense": { "type": "recess" },
        "attack": { "kind": { "type": "agr_min_max" } },
        "task": { "type": "synthetic", "feature_dim": 60, "train_per_class": 400, "test_per_class": 100 },
        "detection_schedule": { "type": "consecutive", "k": 10 },
        "rounds": 16
    }));
    let out = harness::run_experiment(&cfg).unwrap();
    let mut seen_flagged = std::collections::BTreeSet::new();
    for r in &out.records {
        for c in &r.clients {
            if seen_flagged.contains(&c.client) {
                assert!(c.flagged);
                assert!(c.weight.is_none_or(|w| w == 0.0));
                assert!(c.alpha.is_none());
            }
        }
        for c in r.clients.iter().filter(|c| c.flagged) {
            seen_flagged.insert(c.client);
        }
    }
    for &j in &out.summary.flagged {
        assert!(seen_flagged.contains(&j));
    }
}

#[test]
fn honest_probe_responses_agree_on_convex_task() {
    for seed in 0..10 {
        let mut cfg = tiny(serde_json::json!({ "defense": { "type": "recess" } }));
        cfg.seed = seed;
        let out = harness::run_experiment(&cfg).unwrap();
        for r in out.records.iter().filter(|r| r.detection) {
            for c in &r.clients {
                assert!(c.alpha.unwrap() <= 0.0, "seed {seed} round {} client {}", r.round, c.client);
            }
        }
    }
}

#[test]
fn malicious_alpha_exceeds_benign_under_min_max() {
    for seed in 0..5 {
        let mut cfg = tiny(serde_json::json!({
            "defense": { "type": "recess" },
            "attack": { "kind": { "type": "agr_min_max" } },
            "task": { "type": "synthetic", "feature_dim": 100 },
            "num_clients": 30,
            "detection_schedule": { "type": "consecutive", "k": 3 },
            "rounds": 4
        }));
        cfg.seed = seed;
        let out = harness::run_experiment(&cfg).unwrap();
        let mal: Vec<usize> = out.malicious.clone();
        for r in out.records.iter().filter(|r| r.detection) {
            let (m, b): (Vec<_>, Vec<_>) = r.clients.iter().partition(|c| mal.contains(&c.client));
            if m.is_empty() {
                continue;
            }
            let m_mean = m.iter().map(|c| c.alpha.unwrap()).sum::<f64>() / m.len() as f64;
            let b_max = b.iter().map(|c| c.alpha.unwrap()).fold(f64::NEG_INFINITY, f64::max);
            assert!(m_mean > b_max, "seed {seed} round {}: {m_mean} vs {b_max}", r.round);
        }
    }
}
