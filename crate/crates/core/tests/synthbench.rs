use std::collections::{BTreeMap, HashSet};

use grounding::synthbench::{
    corrupt_text, derive_query, entry_fields_for, evaluate, generate_database, generate_world, make_benchmark,
    GeneratorConfig, NoiseConfig, ADDRESS, BUSINESS, NAME, PHONE, STREET,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// |count - n p| <= 3 sqrt(n p (1 - p))
fn within_3_sigma(count: usize, n: usize, p: f64) -> bool {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - mean).abs() <= 3.0 * sd
}

fn gen(n: usize, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        n_entries: n,
        seed,
        ..GeneratorConfig::default()
    }
}

#[test]
fn missing_rates_calibrated() {
    let n = 10_000;
    let db = generate_database(&gen(n, 5)).unwrap();
    for (field, p) in [(PHONE, 0.21), (STREET, 0.17)] {
        let missing = db.iter().filter(|e| e.get(field).is_none()).count();
        assert!(within_3_sigma(missing, n, p), "{field}: {missing} of {n}");
    }
    for field in [NAME, ADDRESS, BUSINESS] {
        assert!(db.iter().all(|e| e.get(field).is_some()), "{field}");
    }
}

#[test]
fn missing_phone_count_at_1000() {
    let db = generate_database(&gen(1000, 0)).unwrap();
    let missing = db.iter().filter(|e| e.get(PHONE).is_none()).count();
    assert!(within_3_sigma(missing, 1000, 0.21), "{missing}");
}

#[test]
fn no_franchises_means_distinct_names() {
    let cfg = GeneratorConfig {
        franchise_fraction: 0.0,
        ..gen(3000, 2)
    };
    let db = generate_database(&cfg).unwrap();
    let names: HashSet<&str> = db.iter().map(|e| e.get(NAME).unwrap()).collect();
    assert_eq!(names.len(), db.len());
}

#[test]
fn franchises_share_brand_tokens() {
    let db = generate_database(&gen(2000, 1)).unwrap();
    let mut brands: BTreeMap<String, usize> = BTreeMap::new();
    for e in &db {
        let words: Vec<&str> = e.get(NAME).unwrap().split(' ').collect();
        *brands.entry(words[..2].join(" ")).or_default() += 1;
    }
    let shared: usize = brands.values().filter(|&&c| c > 1).sum();
    // Roughly the configured 30% of entries belong to a franchise.
    assert!((400..=800).contains(&shared), "{shared}");
}

#[test]
fn substitution_rate_calibrated() {
    let noise = NoiseConfig {
        char_sub_rate: 0.05,
        ..NoiseConfig::zero()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let text = "Gold Cafe 02-123-4567 Seoul Gangnam ".repeat(10);
    let (mut n, mut changed) = (0, 0);
    while n < 100_000 {
        let out = corrupt_text(&text, &noise, &mut rng);
        assert_eq!(out.chars().count(), text.chars().count());
        changed += text.chars().zip(out.chars()).filter(|(a, b)| a != b).count();
        n += text.chars().count();
    }
    assert!(within_3_sigma(changed, n, 0.05), "{changed} of {n}");
}

#[test]
fn deletion_rate_calibrated() {
    let noise = NoiseConfig {
        char_del_rate: 0.02,
        ..NoiseConfig::zero()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let text = "abcdefghij".repeat(100);
    let (mut n, mut deleted) = (0, 0);
    while n < 100_000 {
        deleted += text.len() - corrupt_text(&text, &noise, &mut rng).len();
        n += text.len();
    }
    assert!(within_3_sigma(deleted, n, 0.02), "{deleted} of {n}");
}

#[test]
fn full_substitution_changes_every_character() {
    let noise = NoiseConfig {
        char_sub_rate: 1.0,
        ..NoiseConfig::zero()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let text = "aaa 000 zzz --- Gold";
    let out = corrupt_text(text, &noise, &mut rng);
    assert_eq!(out.chars().count(), text.chars().count());
    assert!(text.chars().zip(out.chars()).all(|(a, b)| a != b), "{out}");
}

#[test]
fn field_drop_rates_calibrated() {
    let world = generate_world(&gen(2000, 4)).unwrap();
    let noise = NoiseConfig {
        field_drop_prob: BTreeMap::from([(PHONE.to_owned(), 0.1), (BUSINESS.to_owned(), 0.3)]),
        ..NoiseConfig::zero()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 10_000;
    let (mut phone, mut biz) = (0, 0);
    for i in 0..n {
        let store = &world.stores[i % world.stores.len()].record;
        let q = derive_query("q", store, &noise, &mut rng);
        phone += usize::from(q.get(PHONE).is_none());
        biz += usize::from(q.get(BUSINESS).is_none());
        assert!(q.get(NAME).is_some());
    }
    assert!(within_3_sigma(phone, n, 0.1), "{phone}");
    assert!(within_3_sigma(biz, n, 0.3), "{biz}");
}

#[test]
fn zero_noise_query_copies_the_store() {
    let world = generate_world(&gen(500, 6)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for store in &world.stores {
        let s = &store.record;
        let q = derive_query("q", s, &NoiseConfig::zero(), &mut rng);
        assert_eq!(q.get(NAME), s.get(NAME));
        assert_eq!(q.get(PHONE), s.get(PHONE));
        assert_eq!(q.get(BUSINESS), s.get(BUSINESS));
        let a = q.get(ADDRESS).unwrap();
        assert!(Some(a) == s.get(ADDRESS) || Some(a) == s.get(STREET), "{a}");
    }
}

#[test]
fn always_dropped_phone_never_appears() {
    let world = generate_world(&gen(300, 8)).unwrap();
    let noise = NoiseConfig {
        field_drop_prob: BTreeMap::from([(PHONE.to_owned(), 1.0)]),
        ..NoiseConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert!(world
        .stores
        .iter()
        .all(|s| derive_query("q", &s.record, &noise, &mut rng).get(PHONE).is_none()));
}

#[test]
fn default_noise_changes_most_queries() {
    let world = generate_world(&gen(2000, 3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = NoiseConfig::default();
    let changed = world
        .stores
        .iter()
        .filter(|s| {
            let q = derive_query("q", &s.record, &noise, &mut rng);
            [NAME, PHONE, BUSINESS].iter().any(|f| q.get(f) != s.record.get(f))
                || ![s.record.get(ADDRESS), s.record.get(STREET)].contains(&q.get(ADDRESS))
        })
        .count();
    assert!(changed * 2 > world.stores.len(), "{changed}");
}

#[test]
fn benchmark_shape_and_integrity() {
    let b = make_benchmark(&gen(500, 0), &NoiseConfig::default(), 1000, 0.1).unwrap();
    assert_eq!(b.queries.len(), 1000);
    assert_eq!(b.test.len(), 100);
    assert_eq!(b.train.len(), 900);
    let entry_ids: HashSet<&str> = b.entries.iter().map(|e| e.id.as_str()).collect();
    assert!(b.gold.values().all(|e| entry_ids.contains(e.as_str())));
    let train: HashSet<&str> = b.train.iter().map(|a| a.query_id.as_str()).collect();
    assert!(b.test.iter().all(|a| !train.contains(a.query_id.as_str())));
    assert!(b.train.iter().chain(&b.test).all(|a| b.gold[&a.query_id] == a.entry_id));
}

#[test]
fn benchmark_rejects_bad_split() {
    for f in [0.0, 1.0, -0.1, 1.5] {
        assert!(make_benchmark(&gen(100, 0), &NoiseConfig::default(), 100, f).is_err());
    }
    assert!(make_benchmark(&gen(100, 0), &NoiseConfig::default(), 9, 0.5).is_err());
}

#[test]
fn same_seed_same_benchmark() {
    let a = make_benchmark(&gen(800, 21), &NoiseConfig::default(), 500, 0.2).unwrap();
    let b = make_benchmark(&gen(800, 21), &NoiseConfig::default(), 500, 0.2).unwrap();
    assert_eq!(a.entries, b.entries);
    assert_eq!(a.queries, b.queries);
    assert_eq!(a.gold, b.gold);
    assert_eq!(a.train, b.train);
    let c = make_benchmark(&gen(800, 22), &NoiseConfig::default(), 500, 0.2).unwrap();
    assert_ne!(a.entries, c.entries);
}

#[test]
fn oracle_and_adversary_grounders() {
    let b = make_benchmark(&gen(300, 0), &NoiseConfig::default(), 200, 0.25).unwrap();
    let queries = b.test_queries();
    let oracle = evaluate(|q| Some(vec![b.gold[&q.id].clone()]), &queries, &b.gold, &[1, 5]).unwrap();
    assert_eq!(oracle.top1_acc, 1.0);
    assert_eq!(oracle.mrr, 1.0);
    let never = evaluate(|_| Some(vec!["nobody".to_owned()]), &queries, &b.gold, &[1, 5]).unwrap();
    assert_eq!(never.top1_acc, 0.0);
    let none = evaluate(|_| None, &queries, &b.gold, &[1]).unwrap();
    assert_eq!(none.top1_acc, 0.0);
    assert!(evaluate(|_| None, &[], &b.gold, &[1]).is_err());
}

#[test]
fn ablation_field_mapping() {
    assert_eq!(entry_fields_for(&[NAME]), [NAME]);
    assert_eq!(entry_fields_for(&[NAME, ADDRESS]), [NAME, ADDRESS, STREET]);
    assert_eq!(entry_fields_for(&[NAME, ADDRESS, PHONE, BUSINESS]).len(), 5);
}

proptest! {
    #[test]
    fn zero_noise_is_identity(s in "\\PC{0,40}", seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(corrupt_text(&s, &NoiseConfig::zero(), &mut rng), s);
    }

    #[test]
    fn metrics_are_monotone(ranks in prop::collection::vec(prop::option::of(0usize..60), 1..40)) {
        // Query i's gold entry sits at ranks[i] (None: absent from the ranking).
        let gold: BTreeMap<String, String> = (0..ranks.len()).map(|i| (format!("q{i}"), "gold".to_owned())).collect();
        let records: Vec<grounding::records::Record> = (0..ranks.len()).map(|i| grounding::records::Record::new(format!("q{i}"))).collect();
        let refs: Vec<&grounding::records::Record> = records.iter().collect();
        let m = evaluate(
            |q| {
                let i: usize = q.id[1..].parse().unwrap();
                let mut list: Vec<String> = (0..60).map(|j| format!("x{j}")).collect();
                if let Some(r) = ranks[i] {
                    list[r] = "gold".to_owned();
                }
                Some(list)
            },
            &refs,
            &gold,
            &[1, 5, 10, 50],
        )
        .unwrap();
        for w in m.topk_acc.windows(2) {
            prop_assert!(w[0].1 <= w[1].1);
        }
        prop_assert!((0.0..=1.0).contains(&m.mrr));
        prop_assert_eq!(m.top1_acc, m.topk(1).unwrap());
    }
}
