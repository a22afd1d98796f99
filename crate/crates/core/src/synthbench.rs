//! Synthetic POI world, query noise, and retrieval metrics.
//!
//! A world is a set of stores with complete ground-truth attributes. The
//! database view of each store has values knocked out at configured missing
//! rates; queries are derived from the ground truth and then damaged the way
//! an upstream OCR + parsing stage would: dropped fields, character
//! substitutions and deletions, shuffled word order, stale values.

use std::collections::{BTreeMap, HashSet};

use rand::distr::weighted::WeightedIndex;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::baseline::VisitHistory;
use crate::error::{Error, Result};
use crate::records::{Association, Record, Schema, Side};

pub const NAME: &str = "name";
pub const PHONE: &str = "phone";
pub const ADDRESS: &str = "address";
pub const STREET: &str = "street";
pub const BUSINESS: &str = "business_number";

pub fn query_schema() -> Schema {
    Schema::new(Side::Query, [NAME, PHONE, ADDRESS, BUSINESS]).expect("static schema")
}

pub fn entry_schema() -> Schema {
    Schema::new(Side::Entry, [NAME, PHONE, ADDRESS, STREET, BUSINESS]).expect("static schema")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_entries: usize,
    pub franchise_fraction: f64,
    pub franchise_mean_size: usize,
    /// Per entry field probability that the database lacks the value.
    pub missing_rates: BTreeMap<String, f64>,
    /// Probability that a franchise shares one head-office phone number.
    pub shared_phone_prob: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_entries: 10_000,
            franchise_fraction: 0.3,
            franchise_mean_size: 5,
            missing_rates: BTreeMap::from([(PHONE.to_owned(), 0.21), (STREET.to_owned(), 0.17)]),
            shared_phone_prob: 0.5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_entries == 0 {
            return Err(Error::Config("n_entries must be at least 1".into()));
        }
        check_rate("franchise_fraction", self.franchise_fraction)?;
        check_rate("shared_phone_prob", self.shared_phone_prob)?;
        let schema = entry_schema();
        for (field, &rate) in &self.missing_rates {
            if !schema.contains(field) {
                return Err(Error::Config(format!("missing rate for unknown entry field {field:?}")));
            }
            check_rate(field, rate)?;
        }
        Ok(())
    }

    fn missing_rate(&self, field: &str) -> f64 {
        self.missing_rates.get(field).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub char_sub_rate: f64,
    pub char_del_rate: f64,
    pub word_shuffle_prob: f64,
    /// Per query field probability that the value is absent from the query.
    pub field_drop_prob: BTreeMap<String, f64>,
    pub outdated_prob: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            char_sub_rate: 0.03,
            char_del_rate: 0.01,
            word_shuffle_prob: 0.15,
            field_drop_prob: BTreeMap::from([
                (NAME.to_owned(), 0.02),
                (PHONE.to_owned(), 0.1),
                (ADDRESS.to_owned(), 0.1),
                (BUSINESS.to_owned(), 0.2),
            ]),
            outdated_prob: 0.05,
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        NoiseConfig {
            char_sub_rate: 0.0,
            char_del_rate: 0.0,
            word_shuffle_prob: 0.0,
            field_drop_prob: BTreeMap::new(),
            outdated_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rate("char_sub_rate", self.char_sub_rate)?;
        check_rate("char_del_rate", self.char_del_rate)?;
        if self.char_sub_rate + self.char_del_rate > 1.0 {
            return Err(Error::Config("char_sub_rate + char_del_rate exceeds 1".into()));
        }
        check_rate("word_shuffle_prob", self.word_shuffle_prob)?;
        check_rate("outdated_prob", self.outdated_prob)?;
        let schema = query_schema();
        for (field, &rate) in &self.field_drop_prob {
            if !schema.contains(field) {
                return Err(Error::Config(format!("drop rate for unknown query field {field:?}")));
            }
            check_rate(field, rate)?;
        }
        Ok(())
    }

    fn drop_prob(&self, field: &str) -> f64 {
        self.field_drop_prob.get(field).copied().unwrap_or(0.0)
    }
}

fn check_rate(name: &str, rate: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {rate} is outside [0, 1]")))
    }
}

const ONSETS: &[&str] = &[
    "b", "ch", "d", "g", "h", "j", "k", "m", "n", "p", "r", "s", "t", "w", "y", "",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ae", "eo", "ou"];
const CODAS: &[&str] = &["", "", "", "n", "m", "l", "ng", "k"];
const CATEGORIES: &[&str] = &[
    "Cafe", "Mart", "Bakery", "Kitchen", "Pharmacy", "Bistro", "Books", "Clinic", "Salon",
    "Grill", "Noodle", "Chicken", "Pizza", "Bar", "Store", "Optical",
];
const REGIONS: &[(&str, &str)] = &[
    ("Seoul", "02"),
    ("Busan", "051"),
    ("Incheon", "032"),
    ("Daegu", "053"),
    ("Daejeon", "042"),
    ("Gwangju", "062"),
    ("Ulsan", "052"),
    ("Suwon", "031"),
];

fn pseudo_word(rng: &mut (impl Rng + ?Sized), syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
        w.push_str(CODAS.choose(rng).unwrap());
    }
    let mut chars = w.chars();
    match chars.next() {
        Some(c) => c.to_ascii_uppercase().to_string() + chars.as_str(),
        None => w,
    }
}

fn digits(rng: &mut (impl Rng + ?Sized), n: usize) -> String {
    (0..n).map(|_| char::from(b'0' + rng.random_range(0..10u8))).collect()
}

struct District {
    region: usize,
    name: String,
    dongs: Vec<String>,
    roads: Vec<String>,
}

struct Geography {
    districts: Vec<District>,
}

impl Geography {
    fn generate(rng: &mut ChaCha8Rng) -> Self {
        let mut used = HashSet::new();
        let mut unique_word = |rng: &mut ChaCha8Rng, syl: usize| loop {
            let w = pseudo_word(rng, syl);
            if used.insert(w.clone()) {
                return w;
            }
        };
        let mut districts = Vec::new();
        for region in 0..REGIONS.len() {
            for _ in 0..6 {
                let name = unique_word(rng, 2);
                let dongs = (0..6).map(|_| format!("{}-dong", unique_word(rng, 2))).collect();
                let roads = (0..8).map(|_| format!("{}-ro", unique_word(rng, 2))).collect();
                districts.push(District {
                    region,
                    name,
                    dongs,
                    roads,
                });
            }
        }
        Geography { districts }
    }
}

/// Complete attributes of one store; the database view may hide some.
#[derive(Debug, Clone, PartialEq)]
pub struct Store {
    pub record: Record,
    pub popularity: f64,
}

/// Ground truth plus the (incomplete) database view.
#[derive(Debug, Clone)]
pub struct World {
    pub stores: Vec<Store>,
    pub entries: Vec<Record>,
}

fn phone_number(rng: &mut (impl Rng + ?Sized), area: &str) -> String {
    let mid = if rng.random_bool(0.5) { 3 } else { 4 };
    format!("{area}-{}-{}", digits(rng, mid), digits(rng, 4))
}

pub fn generate_world(config: &GeneratorConfig) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let geo = Geography::generate(&mut rng);

    // Assign each entry slot to a franchise cluster or to an independent store.
    let n = config.n_entries;
    let n_franchised = (config.franchise_fraction * n as f64).round() as usize;
    let size_dist = Poisson::new((config.franchise_mean_size.max(2) - 1) as f64).expect("positive mean");
    let mut clusters: Vec<usize> = Vec::new();
    let mut remaining = n_franchised;
    while remaining > 0 {
        let size = (size_dist.sample(&mut rng) as usize + 1).max(2).min(remaining);
        clusters.push(size);
        remaining -= size;
    }

    let mut names_used = HashSet::new();
    let mut bizno_used = HashSet::new();
    let mut phones_used = HashSet::new();
    let popularity = LogNormal::new(0.0, 1.0).expect("valid lognormal");
    let mut stores = Vec::with_capacity(n);

    let mut make_store = |rng: &mut ChaCha8Rng, name: String, phone: Option<String>| {
        let district = &geo.districts[rng.random_range(0..geo.districts.len())];
        let (region, area) = REGIONS[district.region];
        let lot = if rng.random_bool(0.6) {
            format!("{}-{}", rng.random_range(1..999), rng.random_range(1..40))
        } else {
            rng.random_range(1..999).to_string()
        };
        let address = format!("{region} {} {} {lot}", district.name, district.dongs.choose(rng).unwrap());
        let street = format!(
            "{region} {} {} {}",
            district.name,
            district.roads.choose(rng).unwrap(),
            rng.random_range(1..300)
        );
        let phone = phone.unwrap_or_else(|| loop {
            let p = phone_number(rng, area);
            if phones_used.insert(p.clone()) {
                break p;
            }
        });
        let bizno = loop {
            let b = format!("{}-{}-{}", digits(rng, 3), digits(rng, 2), digits(rng, 5));
            if bizno_used.insert(b.clone()) {
                break b;
            }
        };
        (name, phone, address, street, bizno, district.name.clone())
    };

    let mut raw = Vec::with_capacity(n);
    for size in clusters {
        let brand = loop {
            let b = format!("{} {}", pseudo_word(&mut rng, 2), CATEGORIES.choose(&mut rng).unwrap());
            if names_used.insert(b.clone()) {
                break b;
            }
        };
        let shared = rng
            .random_bool(config.shared_phone_prob)
            .then(|| {
                let region = rng.random_range(0..REGIONS.len());
                phone_number(&mut rng, REGIONS[region].1)
            });
        for _ in 0..size {
            let (_, phone, address, street, bizno, district) = make_store(&mut rng, String::new(), shared.clone());
            let name = format!("{brand} {district}");
            raw.push((name, phone, address, street, bizno));
        }
    }
    while raw.len() < n {
        let name = loop {
            let candidate = if rng.random_bool(0.7) {
                format!("{} {}", pseudo_word(&mut rng, 2), CATEGORIES.choose(&mut rng).unwrap())
            } else {
                format!("{} {}", pseudo_word(&mut rng, 2), pseudo_word(&mut rng, 1))
            };
            if names_used.insert(candidate.clone()) {
                break candidate;
            }
        };
        let (name, phone, address, street, bizno, _) = make_store(&mut rng, name, None);
        raw.push((name, phone, address, street, bizno));
    }
    raw.shuffle(&mut rng);

    let mut entries = Vec::with_capacity(n);
    for (i, (name, phone, address, street, bizno)) in raw.into_iter().enumerate() {
        let record = Record::new(format!("e{i:06}"))
            .with(NAME, name)
            .with(PHONE, phone)
            .with(ADDRESS, address)
            .with(STREET, street)
            .with(BUSINESS, bizno);
        let mut db = record.clone();
        for field in entry_schema().names() {
            if rng.random_bool(config.missing_rate(field)) {
                db.set(field, None);
            }
        }
        entries.push(db);
        stores.push(Store {
            record,
            popularity: popularity.sample(&mut rng),
        });
    }
    Ok(World { stores, entries })
}

pub fn generate_database(config: &GeneratorConfig) -> Result<Vec<Record>> {
    Ok(generate_world(config)?.entries)
}

fn confusable(c: char) -> &'static [char] {
    match c {
        '0' => &['O', 'o', 'D', '8'],
        '1' => &['l', 'I', '7', 'i'],
        '2' => &['Z', 'z', '7'],
        '3' => &['8', 'B', 'E'],
        '4' => &['A', '9'],
        '5' => &['S', 's', '6'],
        '6' => &['b', 'G', '5', '8'],
        '7' => &['1', 'T', '/'],
        '8' => &['B', '3', '0', '6'],
        '9' => &['g', 'q', '4'],
        'a' => &['o', 'e', 'd'],
        'e' => &['c', 'o', 'a'],
        'i' => &['l', '1', 'j'],
        'o' => &['0', 'a', 'c'],
        'u' => &['v', 'n'],
        'n' => &['m', 'h', 'r'],
        'm' => &['n', 'r'],
        _ => &[],
    }
}

const RANDOM_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-";

fn substitute(c: char, rng: &mut (impl Rng + ?Sized)) -> char {
    let options = confusable(c);
    if !options.is_empty() && rng.random_bool(0.5) {
        return *options.choose(rng).unwrap();
    }
    loop {
        let r = char::from(*RANDOM_ALPHABET.choose(rng).unwrap());
        if r != c {
            return r;
        }
    }
}

/// Character substitutions and deletions, then (with some probability) a
/// shuffle of the whitespace-delimited word order.
pub fn corrupt_text(s: &str, noise: &NoiseConfig, rng: &mut (impl Rng + ?Sized)) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        let u: f64 = rng.random();
        if u < noise.char_sub_rate {
            out.push(substitute(c, rng));
        } else if u < noise.char_sub_rate + noise.char_del_rate {
            continue;
        } else {
            out.push(c);
        }
    }
    if noise.word_shuffle_prob > 0.0 && rng.random_bool(noise.word_shuffle_prob) {
        let mut words: Vec<&str> = out.split_whitespace().collect();
        if words.len() > 1 {
            words.shuffle(rng);
            return words.join(" ");
        }
    }
    out
}

fn stale_variant(field: &str, value: &str, rng: &mut (impl Rng + ?Sized)) -> String {
    match field {
        PHONE => {
            let area = value.split('-').next().unwrap_or("02");
            phone_number(rng, area)
        }
        NAME => {
            let mut words: Vec<String> = value.split_whitespace().map(str::to_owned).collect();
            let last = words.len().saturating_sub(1);
            if let Some(w) = words.get_mut(last) {
                *w = pseudo_word(rng, 2);
            }
            words.join(" ")
        }
        ADDRESS => {
            let mut words: Vec<String> = value.split_whitespace().map(str::to_owned).collect();
            if let Some(w) = words.last_mut() {
                *w = rng.random_range(1..999).to_string();
            }
            words.join(" ")
        }
        _ => value.to_owned(),
    }
}

/// Builds a noisy query from a store's complete record.
pub fn derive_query(query_id: &str, store: &Record, noise: &NoiseConfig, rng: &mut (impl Rng + ?Sized)) -> Record {
    let mut q = Record::new(query_id);
    q.set(NAME, store.get(NAME).map(str::to_owned));
    q.set(PHONE, store.get(PHONE).map(str::to_owned));
    let address = match (store.get(ADDRESS), store.get(STREET)) {
        (Some(a), Some(s)) => Some(if rng.random_bool(0.6) { a } else { s }),
        (a, s) => a.or(s),
    };
    q.set(ADDRESS, address.map(str::to_owned));
    q.set(BUSINESS, store.get(BUSINESS).map(str::to_owned));

    if rng.random_bool(noise.outdated_prob) {
        let candidates: Vec<&str> = [NAME, PHONE, ADDRESS].into_iter().filter(|f| q.get(f).is_some()).collect();
        if let Some(&field) = candidates.choose(rng) {
            let stale = stale_variant(field, q.get(field).unwrap(), rng);
            q.set(field, Some(stale));
        }
    }
    for field in query_schema().names() {
        if rng.random_bool(noise.drop_prob(field)) {
            q.set(field, None);
            continue;
        }
        if let Some(v) = q.get(field) {
            let damaged = corrupt_text(v, noise, rng);
            q.set(field, (!damaged.is_empty()).then_some(damaged));
        }
    }
    q
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub entries: Vec<Record>,
    pub queries: Vec<Record>,
    pub gold: BTreeMap<String, String>,
    pub train: Vec<Association>,
    pub test: Vec<Association>,
}

impl Benchmark {
    pub fn test_queries(&self) -> Vec<&Record> {
        let ids: HashSet<&str> = self.test.iter().map(|a| a.query_id.as_str()).collect();
        self.queries.iter().filter(|q| ids.contains(q.id.as_str())).collect()
    }

    pub fn train_queries(&self) -> Vec<Record> {
        let ids: HashSet<&str> = self.train.iter().map(|a| a.query_id.as_str()).collect();
        self.queries.iter().filter(|q| ids.contains(q.id.as_str())).cloned().collect()
    }

    /// Visit counts observed in the training split.
    pub fn visit_history(&self) -> VisitHistory {
        let mut h = VisitHistory::default();
        for a in &self.train {
            h.add(&a.entry_id, 1);
        }
        h
    }

    pub fn associations(&self) -> Vec<Association> {
        let mut all = self.train.clone();
        all.extend(self.test.iter().cloned());
        all.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        all
    }
}

pub fn make_benchmark(
    gen: &GeneratorConfig,
    noise: &NoiseConfig,
    n_queries: usize,
    test_fraction: f64,
) -> Result<Benchmark> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test_fraction {test_fraction} must lie in (0, 1)")));
    }
    if n_queries < 10 {
        return Err(Error::Config(format!("n_queries {n_queries} must be at least 10")));
    }
    noise.validate()?;
    let world = generate_world(gen)?;
    let mut rng = ChaCha8Rng::seed_from_u64(gen.seed ^ 0x9e37_79b9_7f4a_7c15);
    let sampler = WeightedIndex::new(world.stores.iter().map(|s| s.popularity)).expect("positive popularity");

    let mut queries = Vec::with_capacity(n_queries);
    let mut gold = BTreeMap::new();
    for i in 0..n_queries {
        let store = &world.stores[sampler.sample(&mut rng)];
        let qid = format!("q{i:06}");
        queries.push(derive_query(&qid, &store.record, noise, &mut rng));
        gold.insert(qid, store.record.id.clone());
    }

    let mut order: Vec<usize> = (0..n_queries).collect();
    order.shuffle(&mut rng);
    let n_test = ((n_queries as f64) * test_fraction).round() as usize;
    let n_test = n_test.clamp(1, n_queries - 1);
    let test_set: HashSet<usize> = order[..n_test].iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, q) in queries.iter().enumerate() {
        let a = Association::new(q.id.clone(), gold[&q.id].clone(), 1.0);
        if test_set.contains(&i) {
            test.push(a);
        } else {
            train.push(a);
        }
    }
    Ok(Benchmark {
        entries: world.entries,
        queries,
        gold,
        train,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub queries: usize,
    pub top1_acc: f64,
    /// (k, accuracy@k) in ascending k.
    pub topk_acc: Vec<(usize, f64)>,
    pub mrr: f64,
}

impl Metrics {
    pub fn topk(&self, k: usize) -> Option<f64> {
        self.topk_acc.iter().find(|(kk, _)| *kk == k).map(|(_, a)| *a)
    }
}

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 50];

/// Scores a grounder over test queries. A `None` ranking counts as a miss.
pub fn evaluate<'a, F>(mut grounder: F, queries: &[&'a Record], gold: &BTreeMap<String, String>, ks: &[usize]) -> Result<Metrics>
where
    F: FnMut(&'a Record) -> Option<Vec<String>>,
{
    if queries.is_empty() {
        return Err(Error::Config("evaluation needs at least one test query".into()));
    }
    let mut ks: Vec<usize> = ks.to_vec();
    ks.push(1);
    ks.sort_unstable();
    ks.dedup();
    let mut hits = vec![0usize; ks.len()];
    let mut rr = 0.0;
    for q in queries {
        let target = gold
            .get(&q.id)
            .ok_or_else(|| Error::Config(format!("query {} has no gold entry", q.id)))?;
        let rank = grounder(q).and_then(|ranking| ranking.iter().position(|id| id == target));
        if let Some(r) = rank {
            rr += 1.0 / (r + 1) as f64;
            for (h, &k) in hits.iter_mut().zip(&ks) {
                if r < k {
                    *h += 1;
                }
            }
        }
    }
    let n = queries.len() as f64;
    let topk_acc: Vec<(usize, f64)> = ks.iter().zip(&hits).map(|(&k, &h)| (k, h as f64 / n)).collect();
    Ok(Metrics {
        queries: queries.len(),
        top1_acc: topk_acc[0].1,
        topk_acc,
        mrr: rr / n,
    })
}

/// Maps a query field set onto the entry fields that carry the same
/// information; the street address travels with the address.
pub fn entry_fields_for(query_fields: &[&str]) -> Vec<String> {
    entry_schema()
        .names()
        .filter(|&f| match f {
            STREET => query_fields.contains(&ADDRESS),
            other => query_fields.contains(&other),
        })
        .map(str::to_owned)
        .collect()
}
