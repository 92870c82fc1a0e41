use proptest::prelude::*;

use res_core::corpus::{generate_synthetic_world, Confusability, Split, SynthConfig};
use res_core::evaluation::aggregate;
use res_core::retrieval::{index_by_mention, recall_at_k, retrieve_all, AnalyzerConfig, Bm25Params};

fn world(seed: u64, hard: bool) -> SynthConfig {
    SynthConfig {
        seed,
        n_domains: 4,
        entities_per_domain: 12,
        mentions_per_domain: 10,
        confusability: if hard { Confusability::Hard } else { Confusability::Easy },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn candidates_never_leave_the_mention_domain(seed in 0u64..1000, hard: bool) {
        let ds = generate_synthetic_world(&world(seed, hard)).unwrap();
        let sets = retrieve_all(&ds, 8, Bm25Params::default(), AnalyzerConfig::default()).unwrap();
        for (set, m) in sets.iter().zip(ds.mentions()) {
            prop_assert_eq!(&set.mention_id, &m.mention_id);
            for id in set.entity_ids() {
                prop_assert!(ds.entity(&m.domain, id).is_some());
            }
        }
    }

    #[test]
    fn scores_are_sorted_and_ties_ordered_by_id(seed in 0u64..1000, hard: bool) {
        let ds = generate_synthetic_world(&world(seed, hard)).unwrap();
        let sets = retrieve_all(&ds, 12, Bm25Params::default(), AnalyzerConfig::default()).unwrap();
        for set in &sets {
            for w in set.candidates.windows(2) {
                prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].entity_id < w[1].entity_id));
            }
        }
    }

    #[test]
    fn recall_never_drops_as_k_grows(seed in 0u64..1000, hard: bool) {
        let ds = generate_synthetic_world(&world(seed, hard)).unwrap();
        let cands = index_by_mention(retrieve_all(&ds, 12, Bm25Params::default(), AnalyzerConfig::default()).unwrap());
        for split in Split::ALL {
            let mut prev = 0.0;
            for k in 1..=12 {
                let r = recall_at_k(&cands, ds.mentions_in(split), k).unwrap();
                prop_assert!((0.0..=1.0).contains(&r) && r >= prev);
                prev = r;
            }
        }
    }

    #[test]
    fn split_entities_stay_disjoint(seed in 0u64..1000, hard: bool) {
        let ds = generate_synthetic_world(&world(seed, hard)).unwrap();
        let (train, valid, test) = (ds.entity_ids(Split::Train), ds.entity_ids(Split::Valid), ds.entity_ids(Split::Test));
        prop_assert!(train.is_disjoint(&valid) && train.is_disjoint(&test) && valid.is_disjoint(&test));
    }

    #[test]
    fn averages_lie_between_domain_extremes(
        pairs in prop::collection::vec((0.0f64..=100.0, 1usize..5000), 1..10)
    ) {
        let (accs, sizes): (Vec<f64>, Vec<usize>) = pairs.into_iter().unzip();
        let (macro_avg, micro) = aggregate(&accs, &sizes).unwrap();
        let lo = accs.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-9;
        let hi = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-9;
        prop_assert!(macro_avg >= lo && macro_avg <= hi);
        prop_assert!(micro >= lo && micro <= hi);
    }
}
