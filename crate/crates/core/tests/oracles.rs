mod common;

use embnum::baselines::{ks_statistic, mw_statistic, numeric_jaccard, semantictyper_score, welch_t};
use embnum::sampling::{empirical_cdf, sample_inverse_transform, sample_random_choice};
use proptest::prelude::*;

use common::*;

fn attribute() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![
            (-1e6f64..1e6),
            (-5i32..5).prop_map(|i| i as f64),
            Just(0.0),
        ],
        1..120,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn inverse_transform_matches_oracle(v in attribute(), h in 1usize..200) {
        let got = sample_inverse_transform(&v, h).unwrap();
        let want = sampling_oracle(&v, h);
        prop_assert_eq!(got.values(), want.as_slice());
        prop_assert!(got.values().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn samples_stay_in_support(v in attribute(), h in 1usize..64, seed in any::<u64>()) {
        let s = sample_random_choice(&v, h, seed).unwrap();
        prop_assert_eq!(&s, &sample_random_choice(&v, h, seed).unwrap());
        prop_assert_eq!(s.width(), h);
        prop_assert!(s.values().iter().all(|x| v.contains(x)));
        let t = sample_inverse_transform(&v, h).unwrap();
        prop_assert!(t.values().iter().all(|x| v.contains(x)));
        prop_assert_eq!(*t.values().last().unwrap(), v.iter().copied().fold(f64::MIN, f64::max));
    }

    #[test]
    fn cdf_ends_at_one(v in attribute()) {
        let cdf = empirical_cdf(&v).unwrap();
        prop_assert_eq!(cdf.total(), v.len() as u64);
        prop_assert_eq!(*cdf.cum_prob().last().unwrap(), 1.0);
        prop_assert!(cdf.support().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn statistics_match_oracles(a in attribute(), b in attribute()) {
        prop_assert!((ks_statistic(&a, &b).unwrap() - ks_oracle(&a, &b)).abs() <= 1e-9);
        prop_assert!((mw_statistic(&a, &b).unwrap() - mw_oracle(&a, &b)).abs() <= 1e-9);
        prop_assert!((numeric_jaccard(&a, &b).unwrap() - jaccard_oracle(&a, &b)).abs() <= 1e-9);
        if let Ok(t) = welch_t(&a, &b) {
            let want = welch_oracle(&a, &b);
            prop_assert!((t - want).abs() <= 1e-9 * want.abs().max(1.0), "{} vs {}", t, want);
        }
    }

    #[test]
    fn statistic_symmetries(a in attribute(), b in attribute()) {
        prop_assert_eq!(ks_statistic(&a, &b).unwrap(), ks_statistic(&b, &a).unwrap());
        prop_assert_eq!(mw_statistic(&a, &b).unwrap() + mw_statistic(&b, &a).unwrap(), 1.0);
        prop_assert_eq!(numeric_jaccard(&a, &b).unwrap(), numeric_jaccard(&b, &a).unwrap());
        let ks = ks_statistic(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ks));
        prop_assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
        let st = semantictyper_score(&a, &b).unwrap();
        prop_assert!(st.is_finite());
    }
}
