//! Divergence oracles against a separately written exhaustive search.

mod common;

use mdat_core::margin::{
    discrepancy_divergence_oracle, hdeltah_divergence_oracle, margin_discrepancy_oracle, margin_disparity, ramp,
    squared_label_loss, zero_one_discrepancy, FiniteHypothesisClass, ScoreTable,
};
use mdat_core::numkernel::RngState;
use proptest::prelude::*;

/// Plain nested-loop reference; shares no helpers with the library.
mod reference {
    pub fn label(row: &[f64]) -> usize {
        let mut best = 0;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        best
    }

    pub fn margin(row: &[f64], y: usize) -> f64 {
        let mut other = f64::NEG_INFINITY;
        for (c, &v) in row.iter().enumerate() {
            if c != y && v > other {
                other = v;
            }
        }
        (row[y] - other) / 2.0
    }

    pub fn ramp(x: f64, rho: f64) -> f64 {
        (1.0 - x / rho).clamp(0.0, 1.0)
    }

    /// `tables[t][i]` is the score row of hypothesis `t` on sample `i`.
    pub fn margin_discrepancy(f: &[Vec<f64>], tables: &[Vec<Vec<f64>>], s1: &[usize], s2: &[usize], rho: f64) -> f64 {
        let disp = |g: &Vec<Vec<f64>>, s: &[usize]| {
            let mut total = 0.0;
            for &i in s {
                total += ramp(margin(&g[i], label(&f[i])), rho);
            }
            total / s.len() as f64
        };
        let mut best = f64::NEG_INFINITY;
        for g in tables {
            let v = disp(g, s2) - disp(g, s1);
            if v > best {
                best = v;
            }
        }
        best
    }

    pub fn hdeltah(tables: &[Vec<Vec<f64>>], s1: &[usize], s2: &[usize]) -> f64 {
        let mut best = 0.0f64;
        for a in tables {
            for b in tables {
                let dis = |s: &[usize]| {
                    let mut c = 0.0;
                    for &i in s {
                        if label(&a[i]) != label(&b[i]) {
                            c += 1.0;
                        }
                    }
                    c / s.len() as f64
                };
                best = best.max((dis(s2) - dis(s1)).abs());
            }
        }
        best
    }

    pub fn zero_one(h: &[usize], tables: &[Vec<Vec<f64>>], s1: &[usize], s2: &[usize]) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for g in tables {
            let dis = |s: &[usize]| {
                let mut c = 0.0;
                for &i in s {
                    if h[i] != label(&g[i]) {
                        c += 1.0;
                    }
                }
                c / s.len() as f64
            };
            best = best.max(dis(s2) - dis(s1));
        }
        best
    }
}

struct Instance {
    class: FiniteHypothesisClass,
    rows: Vec<Vec<Vec<f64>>>,
    s1: Vec<usize>,
    s2: Vec<usize>,
}

fn instance(seed: u64) -> Instance {
    let mut rng = RngState::new(seed);
    let n = 2 + rng.below(9);
    let k = 2 + rng.below(3);
    let size = 1 + rng.below(50);
    // Quantized scores make ties and exact ramp kinks common.
    let rows: Vec<Vec<Vec<f64>>> = (0..size)
        .map(|_| {
            (0..n)
                .map(|_| (0..k).map(|_| (rng.below(9) as f64 - 4.0) / 4.0).collect())
                .collect()
        })
        .collect();
    let class = FiniteHypothesisClass::new(rows.iter().map(|t| ScoreTable::from_rows(t, None).unwrap()).collect()).unwrap();
    let pick = |rng: &mut RngState| {
        let mut s: Vec<usize> = (0..n).filter(|_| rng.uniform() < 0.6).collect();
        if s.is_empty() {
            s.push(rng.below(n));
        }
        s
    };
    let s1 = pick(&mut rng);
    let s2 = pick(&mut rng);
    Instance { class, rows, s1, s2 }
}

#[test]
fn oracles_match_exhaustive_reference_on_random_instances() {
    for seed in 0..20 {
        let inst = instance(seed);
        for rho in [0.25, 0.5, 1.0, 2.0] {
            for f in 0..inst.class.len().min(5) {
                let got = margin_discrepancy_oracle(inst.class.get(f), &inst.class, &inst.s1, &inst.s2, rho)
                    .unwrap()
                    .value;
                let want = reference::margin_discrepancy(&inst.rows[f], &inst.rows, &inst.s1, &inst.s2, rho);
                assert!((got - want).abs() <= 1e-12, "seed {seed} rho {rho}: {got} vs {want}");
            }
        }
        let got = hdeltah_divergence_oracle(&inst.class, &inst.s1, &inst.s2).unwrap();
        let want = reference::hdeltah(&inst.rows, &inst.s1, &inst.s2);
        assert!((got - want).abs() <= 1e-12);
        let h: Vec<usize> = inst.rows[0].iter().map(|r| reference::label(r)).collect();
        let got = zero_one_discrepancy(&h, &inst.class, &inst.s1, &inst.s2).unwrap();
        let want = reference::zero_one(&h, &inst.rows, &inst.s1, &inst.s2);
        assert!((got - want).abs() <= 1e-12);
    }
}

#[test]
fn identical_sample_sets_give_exact_zero() {
    for seed in 0..20 {
        let inst = instance(100 + seed);
        let s = &inst.s1;
        for f in 0..inst.class.len() {
            assert_eq!(margin_discrepancy_oracle(inst.class.get(f), &inst.class, s, s, 0.5).unwrap().value, 0.0);
        }
        assert_eq!(hdeltah_divergence_oracle(&inst.class, s, s).unwrap(), 0.0);
        let h = inst.class.get(0).labeling();
        assert_eq!(zero_one_discrepancy(&h, &inst.class, s, s).unwrap(), 0.0);
        let sq = squared_label_loss(inst.class.k());
        assert_eq!(discrepancy_divergence_oracle(&inst.class, s, s, &sq).unwrap(), 0.0);
    }
}

#[test]
fn size_limit_is_an_explicit_error() {
    let mut rng = RngState::new(1);
    let class = common::random_class(&mut rng, 2000, 2, 1, false);
    let tables: Vec<ScoreTable> = std::iter::repeat_n(class.get(0).clone(), 400).collect();
    let big = FiniteHypothesisClass::new(tables).unwrap();
    let all: Vec<usize> = (0..2000).collect();
    let err = hdeltah_divergence_oracle(&big, &all, &all).unwrap_err();
    assert_eq!(err.kind(), "size");
}

proptest! {
    #[test]
    fn ramp_is_bounded_and_nonincreasing(x in -5.0f64..5.0, dx in 0.0f64..3.0, rho in 0.01f64..4.0) {
        let a = ramp(x, rho).unwrap();
        let b = ramp(x + dx, rho).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(b <= a);
    }

    #[test]
    fn margin_disparity_is_bounded_and_monotone_in_rho(seed in 0u64..500, rho in 0.05f64..3.0) {
        let mut rng = RngState::new(seed);
        let class = common::random_class(&mut rng, 6, 3, 2, false);
        let small = margin_disparity(class.get(0), class.get(1), rho).unwrap();
        let wide = margin_disparity(class.get(0), class.get(1), 2.0 * rho).unwrap();
        prop_assert!((0.0..=1.0).contains(&small));
        prop_assert!(wide >= small);
    }

    #[test]
    fn margin_discrepancy_is_bounded_and_antisymmetric_at_most(seed in 0u64..500) {
        let mut rng = RngState::new(seed);
        let class = common::random_class(&mut rng, 8, 2, 6, false);
        let s1: Vec<usize> = (0..4).collect();
        let s2: Vec<usize> = (4..8).collect();
        let f = class.get(0);
        let d12 = margin_discrepancy_oracle(f, &class, &s1, &s2, 1.0).unwrap().value;
        let d21 = margin_discrepancy_oracle(f, &class, &s2, &s1, 1.0).unwrap().value;
        prop_assert!((-1.0..=1.0).contains(&d12));
        // the two suprema cannot both be negative: one direction is >= the
        // negated other at every hypothesis
        prop_assert!(d12 + d21 >= -1e-12);
    }
}
