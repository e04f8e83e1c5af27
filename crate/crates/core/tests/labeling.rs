mod common;

use std::sync::Arc;

use embnum::baselines;
use embnum::dataset::{generate_synthetic, split_holdout, Dataset, NumericAttribute, SyntheticSpec};
use embnum::embnet::build_model;
use embnum::labeling::{
    assign_label, experiment_count, index_labeled, label_batch, mrr, rank, run_benchmark, Method, Orientation,
};
use proptest::prelude::*;

use common::small_arch;

fn methods() -> Vec<Method> {
    let model = build_model(&small_arch(32, 8), 3).unwrap();
    let dsl_data = generate_synthetic(&SyntheticSpec::with_defaults(6, 3, 2)).unwrap();
    vec![
        Method::EmbNum(Arc::new(model)),
        Method::SemanticTyper,
        Method::Dsl(baselines::dsl_train_on_dataset(&dsl_data, 300, 1.0).unwrap()),
    ]
}

fn data() -> Dataset {
    generate_synthetic(&SyntheticSpec::with_defaults(5, 4, 21)).unwrap()
}

#[test]
fn index_keeps_one_record_per_attribute() {
    let d = data();
    for m in methods() {
        let store = index_labeled(&d, &m).unwrap();
        assert_eq!(store.len(), d.len());
        for (r, a) in store.records().iter().zip(d.attributes()) {
            assert_eq!((r.label.as_str(), r.source.as_str()), (a.label(), a.source()));
        }
    }
}

#[test]
fn labeled_attributes_retrieve_themselves() {
    let d = data();
    for m in methods() {
        let store = index_labeled(&d, &m).unwrap();
        for a in d.attributes() {
            let r = rank(&store, a).unwrap();
            assert_eq!(r.len(), d.len());
            assert_eq!(assign_label(&r).unwrap(), a.label(), "{} {}", m.kind(), a.source());
        }
    }
}

#[test]
fn rankings_are_totally_ordered_and_repeatable() {
    let d = data();
    let held = d.sources()[0].clone();
    let (labeled, queries) = split_holdout(&d, &held).unwrap();
    let values: Vec<&[f64]> = queries.attributes().iter().map(|a| a.values()).collect();
    for m in methods() {
        let store = index_labeled(&labeled, &m).unwrap();
        let first = label_batch(&store, &values).unwrap();
        assert_eq!(first, label_batch(&store, &values).unwrap());
        for r in &first {
            for w in r.entries.windows(2) {
                let better = match r.orientation {
                    Orientation::AscendingDistance => w[0].score < w[1].score,
                    Orientation::DescendingSimilarity => w[0].score > w[1].score,
                };
                let tied = w[0].score == w[1].score && (&w[0].label, &w[0].source) < (&w[1].label, &w[1].source);
                assert!(better || tied, "{:?} before {:?}", w[0], w[1]);
            }
        }
    }
}

#[test]
fn more_labeled_sources_do_not_hurt() {
    let d = generate_synthetic(&SyntheticSpec::with_defaults(6, 5, 8)).unwrap();
    for m in [Method::SemanticTyper] {
        let r = run_benchmark(&d, &m).unwrap();
        for w in r.per_count.windows(2) {
            assert!(w[1].mean_mrr + 0.02 >= w[0].mean_mrr, "{:?}", r.per_count);
        }
    }
}

#[test]
fn experiment_counts_match_closed_form() {
    for d in 2..=10usize {
        let attrs = (0..d)
            .map(|s| NumericAttribute::new(vec![s as f64, 1.0], "x", format!("s{s}")).unwrap())
            .collect();
        let r = run_benchmark(&Dataset::new(attrs).unwrap(), &Method::SemanticTyper).unwrap();
        assert_eq!(r.total_experiments as u128, experiment_count(d));
        assert_eq!(r.total_experiments as u128, d as u128 * ((1u128 << (d - 1)) - 1));
        for c in &r.per_count {
            let choose = (0..c.labeled_sources).fold(1u128, |acc, i| acc * (d as u128 - 1 - i as u128) / (i as u128 + 1));
            assert_eq!(c.experiments as u128, d as u128 * choose);
        }
    }
}

proptest! {
    #[test]
    fn mrr_is_mean_reciprocal(ranks in prop::collection::vec(1usize..50, 1..30)) {
        let want = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64;
        let got = mrr(&ranks).unwrap();
        prop_assert!((got - want).abs() < 1e-12);
        prop_assert!(got > 0.0 && got <= 1.0);
    }
}
