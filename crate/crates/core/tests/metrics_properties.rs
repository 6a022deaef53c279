use std::collections::BTreeMap;

use holofair::labels::{empirical_distribution, group_counts, LabelRecord};
use holofair::metrics::{
    bootstrap_ci, ca_quantile, conditional_scores, intrinsic_diversity, mgbi, normalized_entropy_of,
    Statistic, DEFAULT_EPSILON,
};
use holofair::taxonomy::Attribute;
use proptest::prelude::*;

/// Shannon entropy over ln(k), written independently of the library.
fn oracle_entropy(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    h / (p.len() as f64).ln()
}

fn distribution(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, k).prop_filter_map("non-zero mass", |w| {
        let s: f64 = w.iter().sum();
        (s > 1e-9).then(|| w.iter().map(|x| x / s).collect())
    })
}

fn any_distribution() -> impl Strategy<Value = Vec<f64>> {
    (2usize..=6).prop_flat_map(distribution)
}

fn unit_map() -> impl Strategy<Value = BTreeMap<Attribute, f64>> {
    (0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(g, a, r)| {
        [(Attribute::Gender, g), (Attribute::Age, a), (Attribute::Race, r)]
            .into_iter()
            .collect()
    })
}

fn records(labels: &[(usize, f64)], attribute: Attribute, copy: usize) -> Vec<LabelRecord> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &(c, conf))| {
            LabelRecord::new(
                "p",
                format!("img-{copy}-{i}"),
                attribute,
                attribute.categories()[c % attribute.num_categories()],
                conf,
            )
            .unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn entropy_in_unit_interval_and_matches_oracle(p in any_distribution()) {
        let h = normalized_entropy_of(&p).unwrap();
        prop_assert!((0.0..=1.0).contains(&h));
        prop_assert!((h - oracle_entropy(&p)).abs() < 1e-12);
        let off_uniform = p.iter().any(|x| (x - 1.0 / p.len() as f64).abs() > 1e-6);
        if off_uniform {
            prop_assert!(h < 1.0);
        }
    }

    #[test]
    fn entropy_is_permutation_invariant(p in any_distribution(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut q = p.clone();
        q.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = normalized_entropy_of(&p).unwrap();
        let b = normalized_entropy_of(&q).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mgbi_square_identity(id in 0.0f64..=1.0, cq in 0.0f64..=1.0) {
        let m = mgbi(id, cq, DEFAULT_EPSILON);
        let product = id.max(DEFAULT_EPSILON) * cq.max(DEFAULT_EPSILON);
        prop_assert_eq!(m, product.sqrt());
        prop_assert!((m * m - product).abs() <= 4.0 * f64::EPSILON * product);
        prop_assert_eq!(m, mgbi(cq, id, DEFAULT_EPSILON));
    }

    #[test]
    fn mgbi_fixed_point(x in DEFAULT_EPSILON..=1.0) {
        prop_assert!((mgbi(x, x, DEFAULT_EPSILON) - x).abs() <= 2.0 * f64::EPSILON * x);
    }

    #[test]
    fn intrinsic_diversity_matches_product_root(h in unit_map()) {
        let id = intrinsic_diversity(&h, DEFAULT_EPSILON).unwrap();
        let oracle = h.values().map(|v| v.max(DEFAULT_EPSILON)).product::<f64>().cbrt();
        prop_assert!((id - oracle).abs() < 1e-12);
        let hi = h.values().copied().fold(0.0, f64::max);
        prop_assert!(id <= hi + 1e-12);
    }

    #[test]
    fn quantile_limits(scores in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(ca_quantile(&scores, 0.0).unwrap(), min);
        prop_assert_eq!(ca_quantile(&scores, 1.0).unwrap(), max);
        let near0 = ca_quantile(&scores, 1e-12).unwrap();
        let near1 = ca_quantile(&scores, 1.0 - 1e-12).unwrap();
        prop_assert!((near0 - min).abs() < 1e-9);
        prop_assert!((near1 - max).abs() < 1e-9);
    }

    #[test]
    fn quantile_is_monotone_in_q(
        scores in prop::collection::vec(0.0f64..1.0, 1..40),
        a in 0.0f64..=1.0,
        b in 0.0f64..=1.0,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(ca_quantile(&scores, lo).unwrap() <= ca_quantile(&scores, hi).unwrap());
    }

    #[test]
    fn conditional_scores_are_geometric_means(triggers in prop::collection::btree_map("[a-z]{3,8}", unit_map(), 1..6)) {
        let g = conditional_scores(&triggers).unwrap();
        for (name, h) in &triggers {
            let oracle = h.values().product::<f64>().cbrt();
            prop_assert!((g[name] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_distribution_is_scale_invariant(
        labels in prop::collection::vec((0usize..5, 0.0f64..=1.0), 1..60),
        copies in 2usize..5,
    ) {
        let a = Attribute::Race;
        let base = records(&labels, a, 0);
        let scaled: Vec<LabelRecord> = (0..copies).flat_map(|c| records(&labels, a, c)).collect();
        let d1 = empirical_distribution(&base, a, 0.0).unwrap();
        let d2 = empirical_distribution(&scaled, a, 0.0).unwrap();
        prop_assert_eq!(d2.support_count, d1.support_count * copies as u64);
        for (x, y) in d1.probs.iter().zip(&d2.probs) {
            prop_assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn raising_tau_never_increases_support(
        labels in prop::collection::vec((0usize..3, 0.0f64..=1.0), 1..60),
        t1 in 0.0f64..=1.0,
        t2 in 0.0f64..=1.0,
    ) {
        let a = Attribute::Age;
        let recs = records(&labels, a, 0);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let support = |tau| empirical_distribution(&recs, a, tau).map(|d| d.support_count).unwrap_or(0);
        prop_assert!(support(hi) <= support(lo));
    }

    #[test]
    fn group_counts_agree_with_distribution(
        labels in prop::collection::vec((0usize..2, 0.0f64..=1.0), 1..40),
        tau in 0.0f64..=1.0,
    ) {
        let a = Attribute::Gender;
        let recs = records(&labels, a, 0);
        let g = group_counts(&recs, "p", labels.len() as u64, tau).unwrap();
        let counts = g.counts(a);
        match empirical_distribution(&recs, a, tau) {
            Ok(d) => {
                let support: u64 = counts.iter().sum();
                prop_assert_eq!(support, d.support_count);
                for (c, p) in counts.iter().zip(&d.probs) {
                    prop_assert!((*c as f64 / support as f64 - p).abs() < 1e-15);
                }
            }
            Err(_) => prop_assert_eq!(counts.iter().sum::<u64>(), 0),
        }
    }
}

#[test]
fn entropy_maximum_on_brute_force_grid() {
    // every distribution on a 1/20 grid over 3 categories
    let n = 20;
    let mut best = (f64::NEG_INFINITY, vec![]);
    for i in 0..=n {
        for j in 0..=n - i {
            let p = vec![i as f64 / n as f64, j as f64 / n as f64, (n - i - j) as f64 / n as f64];
            let h = normalized_entropy_of(&p).unwrap();
            if h > best.0 {
                best = (h, p);
            }
        }
    }
    // 20 is not divisible by 3, so the grid maximum is the most balanced point
    let mut p = best.1.clone();
    p.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(p, vec![0.3, 0.35, 0.35]);
    assert!(best.0 < 1.0);
    let uniform = normalized_entropy_of(&[1.0 / 3.0; 3]).unwrap();
    assert!((uniform - 1.0).abs() < 1e-15);
}

#[test]
fn bootstrap_is_bit_reproducible_and_degenerate_on_constants() {
    let scores = [0.2, 0.35, 0.5, 0.41, 0.77, 0.63, 0.3, 0.52, 0.44];
    let a = bootstrap_ci(&scores, Statistic::CaMean, 2000, 0.95, 11).unwrap();
    let b = bootstrap_ci(&scores, Statistic::CaMean, 2000, 0.95, 11).unwrap();
    assert_eq!(a.lower.to_bits(), b.lower.to_bits());
    assert_eq!(a.upper.to_bits(), b.upper.to_bits());
    let c = bootstrap_ci(&scores, Statistic::CaMean, 2000, 0.95, 12).unwrap();
    assert_ne!((a.lower, a.upper), (c.lower, c.upper));

    let flat = bootstrap_ci(&[0.4; 9], Statistic::CaQuantile { q: 0.1 }, 500, 0.95, 0).unwrap();
    assert_eq!(flat.lower, flat.upper);
    assert_eq!(flat.point, 0.4);
}
