use std::collections::HashSet;

use headroute::data::{batches, eval_batches, gen_cluster_task, load_tsv, Dataset, Example, SyntheticTaskSpec, Vocab, CLS, PAD};
use headroute::usage::{frequencies, rank_experts, usage_entropy, UsageRecord, UsageReport};
use headroute::Error;
use proptest::prelude::*;

fn spec(seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        n_clusters: 4,
        n_classes: 2,
        vocab_size: 64,
        seq_len: 16,
        train_examples: 130,
        valid_examples: 41,
        seed,
    }
}

#[test]
fn batch_sizes_keep_the_remainder() {
    let (tr, _) = gen_cluster_task(&spec(0)).unwrap();
    let sizes: Vec<usize> = batches(&tr, 64, 3, 0).unwrap().iter().map(|b| b.labels.len()).collect();
    assert_eq!(sizes, vec![64, 64, 2]);
    assert!(matches!(batches(&tr, 0, 3, 0), Err(Error::Config(_))));
}

fn order_of(ds: &Dataset, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    batches(ds, 16, seed, epoch)
        .unwrap()
        .iter()
        .flat_map(|b| (0..b.labels.len()).map(|i| b.tokens.row(i).ids).collect::<Vec<_>>())
        .collect()
}

#[test]
fn shuffling_is_seeded_per_epoch() {
    let (tr, _) = gen_cluster_task(&spec(1)).unwrap();
    assert_eq!(order_of(&tr, 4, 2), order_of(&tr, 4, 2));
    assert_ne!(order_of(&tr, 4, 2), order_of(&tr, 4, 3));
    assert_ne!(order_of(&tr, 4, 2), order_of(&tr, 5, 2));
}

#[test]
fn generator_is_deterministic_and_balanced() {
    let a = gen_cluster_task(&spec(7)).unwrap();
    assert_eq!(a, gen_cluster_task(&spec(7)).unwrap());
    assert_ne!(a.0, gen_cluster_task(&spec(8)).unwrap().0);
    for ds in [&a.0, &a.1] {
        let mut hist = [0usize; 2];
        for l in ds.labels() {
            hist[l] += 1;
        }
        assert!(hist[0].abs_diff(hist[1]) <= 1, "{hist:?}");
    }
    let bad = SyntheticTaskSpec { vocab_size: 18, ..spec(0) };
    assert!(matches!(gen_cluster_task(&bad), Err(Error::Config(_))));
}

/// Class of the sub-vocabulary holding the most tokens of the sequence.
fn bag_of_words_oracle(e: &Example, s: &SyntheticTaskSpec) -> usize {
    let sub = (s.vocab_size - 3) / s.n_clusters;
    let mut votes = vec![0usize; s.n_clusters];
    for (&id, &m) in e.ids.iter().zip(&e.mask).skip(1) {
        if m && id >= 3 && (id - 3) / sub < s.n_clusters {
            votes[(id - 3) / sub] += 1;
        }
    }
    let cluster = (0..s.n_clusters).max_by_key(|&c| (votes[c], std::cmp::Reverse(c))).unwrap();
    cluster % s.n_classes
}

#[test]
fn labels_are_decodable_by_bag_of_words() {
    for seed in 0..3 {
        let s = SyntheticTaskSpec { n_classes: 3, n_clusters: 6, vocab_size: 90, ..spec(seed) };
        let (tr, va) = gen_cluster_task(&s).unwrap();
        for e in tr.examples.iter().chain(&va.examples) {
            assert_eq!(bag_of_words_oracle(e, &s), e.label);
            assert_eq!(e.ids[0], CLS);
        }
    }
}

#[test]
fn batches_partition_and_masks_are_prefixes() {
    let (tr, _) = gen_cluster_task(&spec(2)).unwrap();
    let mut seen = HashSet::new();
    let mut count = 0;
    for b in batches(&tr, 32, 9, 1).unwrap() {
        for i in 0..b.labels.len() {
            let row = b.tokens.row(i);
            assert!(row.mask.windows(2).all(|w| w[0] >= w[1]));
            seen.insert(row.ids);
            count += 1;
        }
    }
    assert_eq!(count, tr.len());
    let distinct: HashSet<Vec<usize>> = tr.examples.iter().map(|e| e.ids.clone()).collect();
    assert_eq!(seen, distinct);
    let first = &eval_batches(&tr, 50).unwrap()[0];
    assert_eq!(first.tokens.row(0).ids, tr.examples[0].ids);
}

#[test]
fn tsv_and_vocab_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocab::synthetic(64).unwrap();
    let vpath = dir.path().join("vocab.txt");
    vocab.save(&vpath).unwrap();
    let back = Vocab::load(&vpath).unwrap();
    assert_eq!(back, vocab);
    assert_eq!(back.len(), 64);
    let (tr, _) = gen_cluster_task(&spec(3)).unwrap();
    let path = dir.path().join("train.tsv");
    tr.write_tsv(&path, &back).unwrap();
    assert_eq!(load_tsv(&path, &back, 16, 2).unwrap(), tr);
    // Truncation keeps [CLS] and pads with PAD.
    let short = load_tsv(&path, &back, 4, 2).unwrap();
    assert_eq!(short.examples[0].ids.len(), 4);
    let padded = load_tsv(&path, &back, 20, 2).unwrap();
    assert_eq!(padded.examples[0].ids[19], PAD);
    assert!(!padded.examples[0].mask[19]);
}

fn report_of(k: usize, counts: Vec<u64>) -> UsageReport {
    let total = counts.iter().sum::<u64>() / k as u64;
    UsageReport { k, dataset: "d".into(), layers: vec![UsageRecord { layer: 0, counts, total }] }
}

#[test]
fn usage_report_file_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("usage.json");
    let r = report_of(2, vec![3, 1, 4, 2]);
    r.save(&path).unwrap();
    assert_eq!(UsageReport::load(&path).unwrap(), r);
    let mut broken = r.clone();
    broken.layers[0].total += 1;
    broken.save(&path).unwrap();
    assert!(matches!(UsageReport::load(&path), Err(Error::Format(_))));
    assert_eq!(usage_entropy(&[1.0, 0.0]), 0.0);
    assert!((usage_entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
}

fn selections(n: usize, k: usize) -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(Just((0..n).collect::<Vec<_>>()).prop_shuffle().prop_map(move |v| v[..k].to_vec()), 1..40)
}

proptest! {
    #[test]
    fn frequencies_form_a_distribution(sel in selections(6, 2)) {
        let mut rec = UsageRecord::new(0, 6);
        for s in &sel {
            rec.record(s).unwrap();
        }
        let f = frequencies(&rec, 2).unwrap();
        prop_assert!(f.iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut order = rank_experts(&f);
        prop_assert!(order.windows(2).all(|w| f[w[0]] > f[w[1]] || (f[w[0]] == f[w[1]] && w[0] < w[1])));
        order.sort();
        prop_assert_eq!(order, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn merge_equals_pooled_tally(a in selections(4, 1), b in selections(4, 1)) {
        let tally = |sel: &[Vec<usize>]| {
            let mut r = UsageReport { k: 1, dataset: "d".into(), layers: vec![UsageRecord::new(3, 4)] };
            for s in sel {
                r.record(3, s).unwrap();
            }
            r
        };
        let pooled: Vec<Vec<usize>> = a.iter().chain(&b).cloned().collect();
        prop_assert_eq!(tally(&a).merge(&tally(&b)).unwrap(), tally(&pooled));
    }
}
