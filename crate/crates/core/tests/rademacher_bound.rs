//! Rademacher estimators and bound assembly.

mod common;

use mdat_core::bound::{
    confidence_term, empirical_rademacher, evaluate_mdtc_bound, massart_bound, rademacher_exact_tiny, BoundConfig,
    BoundSource, FiniteBoundInput, FiniteFamily, SupMode,
};
use mdat_core::dataio::synth_generate;
use mdat_core::margin::{margin_error, FiniteHypothesisClass, ScoreTable};
use mdat_core::model::MdatModel;
use mdat_core::numkernel::RngState;
use mdat_core::train::ArchConfig;
use proptest::prelude::*;

/// Exact expectation over all 2^n sign vectors, no symmetry tricks.
fn brute_force_rademacher(rows: &[Vec<f64>]) -> f64 {
    let n = rows[0].len();
    let mut total = 0.0;
    for mask in 0..(1u32 << n) {
        let sigma: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
        let best = rows
            .iter()
            .map(|r| r.iter().zip(&sigma).map(|(f, s)| f * s).sum::<f64>() / n as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    total / f64::from(1u32 << n)
}

fn random_rows(rng: &mut RngState, n: usize, size: usize) -> Vec<Vec<f64>> {
    (0..size)
        .map(|_| (0..n).map(|_| 2.0 * rng.uniform() - 1.0).collect())
        .collect()
}

#[test]
fn gray_code_enumeration_matches_brute_force() {
    let mut rng = RngState::new(3);
    for _ in 0..10 {
        let n = 1 + rng.below(12);
        let size = 1 + rng.below(20);
        let rows = random_rows(&mut rng, n, size);
        let exact = rademacher_exact_tiny(&FiniteFamily::new(&rows).unwrap()).unwrap();
        assert!((exact - brute_force_rademacher(&rows)).abs() < 1e-12);
    }
}

#[test]
fn monte_carlo_agrees_with_exact_and_massart_dominates() {
    let mut rng = RngState::new(11);
    for case in 0..10 {
        let n = 2 + rng.below(11);
        let size = 2 + rng.below(19);
        let fam = FiniteFamily::new(&random_rows(&mut rng, n, size)).unwrap();
        let exact = rademacher_exact_tiny(&fam).unwrap();
        let est = empirical_rademacher(&fam, 200, &RngState::new(case)).unwrap();
        assert_eq!(est.sup_mode, SupMode::EnumerateFiniteClass);
        assert!((est.value - exact).abs() <= 3.0 * est.std_error, "case {case}");
        assert!(exact <= massart_bound(fam.len(), n, 1.0));
    }
}

#[test]
fn doubling_draws_shrinks_std_error_by_root_two() {
    let mut rng = RngState::new(21);
    let fam = FiniteFamily::new(&random_rows(&mut rng, 10, 15)).unwrap();
    let ratios: Vec<f64> = (0..10)
        .map(|rep| {
            let a = empirical_rademacher(&fam, 200, &RngState::new(1000 + rep)).unwrap();
            let b = empirical_rademacher(&fam, 400, &RngState::new(2000 + rep)).unwrap();
            b.std_error / a.std_error
        })
        .collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!((0.6..=0.85).contains(&mean), "mean ratio {mean}, ratios {ratios:?}");
}

#[test]
fn nested_families_are_ordered_within_noise() {
    let mut rng = RngState::new(31);
    let rows = random_rows(&mut rng, 12, 20);
    let small = FiniteFamily::new(&rows[..5]).unwrap();
    let large = FiniteFamily::new(&rows).unwrap();
    let a = empirical_rademacher(&small, 200, &RngState::new(1)).unwrap();
    let b = empirical_rademacher(&large, 200, &RngState::new(2)).unwrap();
    let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
    assert!(a.value <= b.value + 3.0 * se);
    // with a shared sign stream the ordering holds draw by draw
    let c = empirical_rademacher(&large, 200, &RngState::new(1)).unwrap();
    assert!(a.value <= c.value);
}

#[test]
fn estimator_is_deterministic_per_seed() {
    let mut rng = RngState::new(41);
    let fam = FiniteFamily::new(&random_rows(&mut rng, 8, 6)).unwrap();
    let a = empirical_rademacher(&fam, 50, &RngState::new(9)).unwrap();
    let b = empirical_rademacher(&fam, 50, &RngState::new(9)).unwrap();
    assert_eq!(a, b);
}

/// Threshold scorers on a 1-D projection: `f_t(x) = (t − x, x − t)`.
fn threshold_instance() -> (FiniteHypothesisClass, Vec<Vec<usize>>) {
    let mut rng = RngState::new(51);
    let xs: Vec<f64> = (0..16)
        .map(|i| if i < 8 { rng.uniform() } else { 0.4 + rng.uniform() })
        .collect();
    let labels: Vec<usize> = xs.iter().map(|&x| usize::from(x > 0.7)).collect();
    let tables = (0..=10)
        .map(|t| {
            let t = t as f64 / 10.0;
            let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![t - x, x - t]).collect();
            ScoreTable::from_rows(&rows, Some(labels.clone())).unwrap()
        })
        .collect();
    let domains = vec![(0..8).collect(), (8..16).collect()];
    (FiniteHypothesisClass::new(tables).unwrap(), domains)
}

#[test]
fn finite_bound_terms_are_nonnegative_and_sum_to_total() {
    let (class, domains) = threshold_instance();
    for scorer in [3, 7] {
        let report = evaluate_mdtc_bound(
            BoundSource::Finite(FiniteBoundInput {
                class: &class,
                scorer,
                domains: &domains,
            }),
            &BoundConfig {
                rho: 0.1,
                ..BoundConfig::default()
            },
            &RngState::new(0),
        )
        .unwrap();
        let parts = report.parts();
        assert!(parts.iter().all(|(_, v)| *v >= 0.0));
        let sum: f64 = parts.iter().map(|(_, v)| v).sum();
        assert!((report.total - sum).abs() <= 1e-12);
        for d in &report.domains {
            assert!(d.margin_error >= 0.0 && d.confidence > 0.0);
            assert!(d.rademacher_pi1.value >= 0.0 && d.rademacher_pih.value >= 0.0);
        }
        let mean_err: f64 = report.domains.iter().map(|d| d.margin_error).sum::<f64>() / 2.0;
        assert!(report.total >= mean_err);
        assert_eq!(report.sup_mode, SupMode::EnumerateFiniteClass);
        assert!(report.lambda.contains("lambda"));
        // the margin error equals a direct evaluation on the domain subset
        let sub: Vec<Vec<f64>> = domains[0].iter().map(|&i| class.get(scorer).row(i).to_vec()).collect();
        let labels: Vec<usize> = domains[0].iter().map(|&i| class.get(scorer).labels().unwrap()[i]).collect();
        let direct = margin_error(&ScoreTable::from_rows(&sub, Some(labels)).unwrap(), 0.1).unwrap();
        assert_eq!(report.domains[0].margin_error, direct);
    }
}

#[test]
fn single_domain_has_zero_discrepancy_and_margin_bound_terms() {
    let (class, _) = threshold_instance();
    let domains = vec![(0..16).collect::<Vec<usize>>()];
    let cfg = BoundConfig {
        rho: 0.2,
        ..BoundConfig::default()
    };
    let report = evaluate_mdtc_bound(
        BoundSource::Finite(FiniteBoundInput {
            class: &class,
            scorer: 5,
            domains: &domains,
        }),
        &cfg,
        &RngState::new(0),
    )
    .unwrap();
    assert_eq!(report.discrepancy_term, 0.0);
    assert_eq!(report.domains[0].discrepancy, 0.0);
    let d = &report.domains[0];
    let c = confidence_term(cfg.delta, 16.0);
    let single = d.margin_error + 8.0 / cfg.rho * d.rademacher_pi1.value + 2.0 / cfg.rho * d.rademacher_pih.value + 2.0 * c;
    assert!((report.margin_error_term + report.complexity_term - single).abs() < 1e-12);
    assert_eq!(report.n_bar, 16.0);
}

#[test]
fn bound_rejects_bad_delta_and_rho() {
    let (class, domains) = threshold_instance();
    let src = BoundSource::Finite(FiniteBoundInput {
        class: &class,
        scorer: 0,
        domains: &domains,
    });
    for (rho, delta) in [(1.0, 0.5), (1.0, 0.0), (0.0, 0.05), (-1.0, 0.05)] {
        let cfg = BoundConfig {
            rho,
            delta,
            ..BoundConfig::default()
        };
        assert_eq!(evaluate_mdtc_bound(src, &cfg, &RngState::new(0)).unwrap_err().kind(), "config");
    }
}

#[test]
fn confidence_terms_decrease_toward_zero() {
    let v: Vec<f64> = [1e2, 1e3, 1e4].iter().map(|&n| confidence_term(0.05, n)).collect();
    assert!(v[0] > v[1] && v[1] > v[2] && v[2] < 0.02);
}

#[test]
fn model_route_flags_surrogate_and_is_consistent() {
    let synth = synth_generate(&common::small_synth(2)).unwrap();
    let arch = ArchConfig::compact().for_corpus(&synth.corpus);
    let model = MdatModel::init(arch, 4).unwrap();
    let cfg = BoundConfig {
        draws: 20,
        max_samples: 40,
        ..BoundConfig::default()
    };
    let report = evaluate_mdtc_bound(
        BoundSource::Model {
            model: &model,
            corpus: &synth.corpus,
        },
        &cfg,
        &RngState::new(0),
    )
    .unwrap();
    assert_eq!(report.sup_mode, SupMode::RandomSearchParametric);
    assert_eq!(report.discrepancy_source.as_str(), "auxiliary-surrogate");
    assert_eq!(report.m, 3);
    assert!(report.parts().iter().all(|(_, v)| *v >= 0.0));
    let sum: f64 = report.parts().iter().map(|(_, v)| v).sum();
    assert!((report.total - sum).abs() <= 1e-12);
    assert!(report.domains.iter().all(|d| d.n == 60 && d.n_estimate == 40));
    let again = evaluate_mdtc_bound(
        BoundSource::Model {
            model: &model,
            corpus: &synth.corpus,
        },
        &cfg,
        &RngState::new(0),
    )
    .unwrap();
    assert_eq!(report, again);
    assert!(report.to_kv().contains("discrepancy_source = auxiliary-surrogate"));
}

proptest! {
    #[test]
    fn exact_value_is_bounded_by_massart_and_half_range(seed in 0u64..1000) {
        let mut rng = RngState::new(seed);
        let n = 1 + rng.below(8);
        let size = 1 + rng.below(10);
        let fam = FiniteFamily::new(&random_rows(&mut rng, n, size)).unwrap();
        let exact = rademacher_exact_tiny(&fam).unwrap();
        prop_assert!(exact >= 0.0);
        prop_assert!(exact <= massart_bound(size, n, fam.max_abs()) + 1e-12);
        prop_assert!(exact <= fam.max_abs() + 1e-12);
    }

    #[test]
    fn massart_is_nonincreasing_in_n(size in 1usize..100, n in 1usize..1000) {
        prop_assert!(massart_bound(size, n + 1, 1.0) <= massart_bound(size, n, 1.0));
    }
}
