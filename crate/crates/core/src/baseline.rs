//! Rule-based matcher: normalized exact/prefix lookups tried stage by stage,
//! with multi-hit ties resolved by visit history.
//!
//! Matching fails closed. A single wrong digit in a phone number means the
//! phone stage finds nothing; there is no fuzzy fallback.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::{Record, Schema};
use crate::synthbench::{ADDRESS, BUSINESS, NAME, PHONE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Normalizer {
    DigitsOnly,
    CollapseSpaces,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Matcher {
    /// Normalized values are equal.
    ExactNormalized,
    /// The normalized entry value starts with the normalized query value.
    PrefixNormalized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub query_field: String,
    pub entry_field: String,
    pub matcher: Matcher,
    pub normalizer: Normalizer,
}

impl Rule {
    pub fn new(query_field: &str, entry_field: &str, matcher: Matcher, normalizer: Normalizer) -> Self {
        Rule {
            query_field: query_field.to_owned(),
            entry_field: entry_field.to_owned(),
            matcher,
            normalizer,
        }
    }

    fn accepts(&self, query_norm: &str, entry_norm: &str) -> bool {
        match self.matcher {
            Matcher::ExactNormalized => entry_norm == query_norm,
            Matcher::PrefixNormalized => entry_norm.starts_with(query_norm),
        }
    }

    /// Whether `entry` satisfies this rule for `query`.
    pub fn holds(&self, query: &Record, entry: &Record) -> bool {
        let Some(q) = self.query_value(query) else {
            return false;
        };
        entry
            .get(&self.entry_field)
            .map(|e| self.accepts(&q, &normalize(self.normalizer, e)))
            .unwrap_or(false)
    }

    fn query_value(&self, query: &Record) -> Option<String> {
        let v = normalize(self.normalizer, query.get(&self.query_field)?);
        (!v.is_empty()).then_some(v)
    }
}

/// Conjunction of rules; every rule must hold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Stage {
    pub rules: Vec<Rule>,
}

impl Stage {
    pub fn single(rule: Rule) -> Self {
        Stage { rules: vec![rule] }
    }

    pub fn validate(&self, query_schema: &Schema, entry_schema: &Schema) -> Result<()> {
        if self.rules.is_empty() {
            return Err(Error::Config("baseline stage has no rules".into()));
        }
        for r in &self.rules {
            if !query_schema.contains(&r.query_field) {
                return Err(Error::Config(format!("rule query field {:?} not in schema", r.query_field)));
            }
            if !entry_schema.contains(&r.entry_field) {
                return Err(Error::Config(format!("rule entry field {:?} not in schema", r.entry_field)));
            }
        }
        Ok(())
    }

    fn applicable(&self, query: &Record) -> bool {
        self.rules.iter().all(|r| r.query_value(query).is_some())
    }
}

pub fn normalize(kind: Normalizer, s: &str) -> String {
    match kind {
        Normalizer::DigitsOnly => s.chars().filter(char::is_ascii_digit).collect(),
        Normalizer::CollapseSpaces => s.split_whitespace().collect::<Vec<_>>().join(" "),
        Normalizer::Identity => s.to_owned(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitHistory {
    counts: HashMap<String, u64>,
}

impl VisitHistory {
    pub fn count(&self, entry_id: &str) -> u64 {
        self.counts.get(entry_id).copied().unwrap_or(0)
    }

    pub fn add(&mut self, entry_id: &str, n: u64) {
        *self.counts.entry(entry_id.to_owned()).or_default() += n;
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Reads `{"entry_id": .., "count": ..}` lines.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            entry_id: String,
            count: u64,
        }
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut h = VisitHistory::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: Line = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            })?;
            h.add(&l.entry_id, l.count);
        }
        Ok(h)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let sorted: BTreeMap<&String, &u64> = self.counts.iter().collect();
        let mut out = String::new();
        for (id, count) in sorted {
            out.push_str(&serde_json::json!({ "entry_id": id, "count": count }).to_string());
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn most_visited<'a>(candidates: impl Iterator<Item = &'a Record>, history: &VisitHistory) -> Option<String> {
    candidates
        .max_by(|a, b| {
            history
                .count(&a.id)
                .cmp(&history.count(&b.id))
                .then_with(|| b.id.cmp(&a.id))
        })
        .map(|r| r.id.clone())
}

/// Reference implementation: a linear scan per stage.
pub fn rule_match(query: &Record, entries: &[Record], stages: &[Stage], history: &VisitHistory) -> Option<String> {
    for stage in stages {
        if !stage.applicable(query) {
            continue;
        }
        let hits = entries.iter().filter(|e| stage.rules.iter().all(|r| r.holds(query, e)));
        if let Some(best) = most_visited(hits, history) {
            return Some(best);
        }
    }
    None
}

/// Business number → phone → name with address prefix → name.
pub fn default_rules(query_schema: &Schema, entry_schema: &Schema) -> Result<Vec<Stage>> {
    use Matcher::*;
    use Normalizer::*;
    let stages = vec![
        Stage::single(Rule::new(BUSINESS, BUSINESS, ExactNormalized, DigitsOnly)),
        Stage::single(Rule::new(PHONE, PHONE, ExactNormalized, DigitsOnly)),
        Stage {
            rules: vec![
                Rule::new(NAME, NAME, ExactNormalized, CollapseSpaces),
                Rule::new(ADDRESS, ADDRESS, PrefixNormalized, CollapseSpaces),
            ],
        },
        Stage::single(Rule::new(NAME, NAME, ExactNormalized, CollapseSpaces)),
    ];
    for s in &stages {
        s.validate(query_schema, entry_schema)?;
    }
    Ok(stages)
}

enum Lookup {
    Exact(HashMap<String, Vec<usize>>),
    /// Sorted (normalized value, entry index) pairs.
    Prefix(Vec<(String, usize)>),
}

struct StageIndex {
    lookup: Lookup,
    /// Normalized entry values for every rule of the stage.
    normalized: Vec<Vec<Option<String>>>,
}

/// Pre-normalized, hash-indexed form of [`rule_match`] for repeated queries
/// against one database. Returns exactly what `rule_match` returns.
pub struct RuleMatcher<'a> {
    entries: &'a [Record],
    stages: Vec<Stage>,
    indexes: Vec<StageIndex>,
}

impl<'a> RuleMatcher<'a> {
    pub fn new(entries: &'a [Record], stages: Vec<Stage>) -> Result<Self> {
        let mut indexes = Vec::with_capacity(stages.len());
        for stage in &stages {
            let first = stage
                .rules
                .first()
                .ok_or_else(|| Error::Config("baseline stage has no rules".into()))?;
            let normalized: Vec<Vec<Option<String>>> = stage
                .rules
                .iter()
                .map(|r| {
                    entries
                        .iter()
                        .map(|e| e.get(&r.entry_field).map(|v| normalize(r.normalizer, v)))
                        .collect()
                })
                .collect();
            let lookup = match first.matcher {
                Matcher::ExactNormalized => {
                    let mut map: HashMap<String, Vec<usize>> = HashMap::new();
                    for (i, v) in normalized[0].iter().enumerate() {
                        if let Some(v) = v {
                            map.entry(v.clone()).or_default().push(i);
                        }
                    }
                    Lookup::Exact(map)
                }
                Matcher::PrefixNormalized => {
                    let mut sorted: Vec<(String, usize)> = normalized[0]
                        .iter()
                        .enumerate()
                        .filter_map(|(i, v)| v.clone().map(|v| (v, i)))
                        .collect();
                    sorted.sort();
                    Lookup::Prefix(sorted)
                }
            };
            indexes.push(StageIndex { lookup, normalized });
        }
        Ok(RuleMatcher {
            entries,
            stages,
            indexes,
        })
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn match_query(&self, query: &Record, history: &VisitHistory) -> Option<String> {
        for (stage, index) in self.stages.iter().zip(&self.indexes) {
            let Some(values): Option<Vec<String>> = stage.rules.iter().map(|r| r.query_value(query)).collect() else {
                continue;
            };
            let candidates: Vec<usize> = match &index.lookup {
                Lookup::Exact(map) => map.get(&values[0]).cloned().unwrap_or_default(),
                Lookup::Prefix(sorted) => {
                    let start = sorted.partition_point(|(v, _)| v.as_str() < values[0].as_str());
                    sorted[start..]
                        .iter()
                        .take_while(|(v, _)| v.starts_with(&values[0]))
                        .map(|(_, i)| *i)
                        .collect()
                }
            };
            let hits = candidates.into_iter().filter(|&i| {
                stage.rules.iter().enumerate().skip(1).all(|(ri, rule)| {
                    index.normalized[ri][i]
                        .as_deref()
                        .map(|e| rule.accepts(&values[ri], e))
                        .unwrap_or(false)
                })
            });
            if let Some(best) = most_visited(hits.map(|i| &self.entries[i]), history) {
                return Some(best);
            }
        }
        None
    }
}
