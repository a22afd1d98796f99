//! Semi-structured records, their schemas, and query↔entry associations.
//!
//! Records and associations travel as line-delimited JSON. A JSON `null` and
//! an absent key are the same thing: a missing value.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Query,
    Entry,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::Query => f.write_str("query"),
            Side::Entry => f.write_str("entry"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldKey {
    pub name: String,
    pub side: Side,
}

/// Ordered set of valid fields for one side. Field order is the
/// serialization order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemaRepr", into = "SchemaRepr")]
pub struct Schema {
    side: Side,
    fields: Vec<FieldKey>,
}

#[derive(Serialize, Deserialize)]
struct SchemaRepr {
    side: Side,
    fields: Vec<String>,
}

impl TryFrom<SchemaRepr> for Schema {
    type Error = Error;
    fn try_from(repr: SchemaRepr) -> Result<Self> {
        Schema::new(repr.side, repr.fields)
    }
}

impl From<Schema> for SchemaRepr {
    fn from(schema: Schema) -> Self {
        SchemaRepr {
            side: schema.side,
            fields: schema.fields.into_iter().map(|f| f.name).collect(),
        }
    }
}

impl Schema {
    pub fn new<I, S>(side: Side, names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = HashSet::new();
        let mut fields = Vec::new();
        for name in names {
            let name = name.into();
            if name.is_empty() {
                return Err(Error::Schema("field name is empty".into()));
            }
            if name.chars().any(char::is_whitespace) {
                return Err(Error::Schema(format!("field name {name:?} contains whitespace")));
            }
            if name == "id" {
                return Err(Error::Schema("\"id\" is reserved".into()));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::Schema(format!("duplicate field {name:?}")));
            }
            fields.push(FieldKey { name, side });
        }
        if fields.is_empty() {
            return Err(Error::Schema(format!("{side} schema has no fields")));
        }
        Ok(Schema { side, fields })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn fields(&self) -> &[FieldKey] {
        &self.fields
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|f| f.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.fields.iter().any(|f| f.name == name)
    }

    /// Keeps only the listed fields, preserving schema order.
    pub fn restrict(&self, keep: &[&str]) -> Result<Schema> {
        Schema::new(
            self.side,
            self.names().filter(|n| keep.contains(n)).map(str::to_owned),
        )
    }
}

/// One query or database entry. Only present values are stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub id: String,
    values: BTreeMap<String, String>,
}

impl Record {
    pub fn new(id: impl Into<String>) -> Self {
        Record {
            id: id.into(),
            values: BTreeMap::new(),
        }
    }

    pub fn with(mut self, field: &str, value: impl Into<String>) -> Self {
        self.values.insert(field.to_owned(), value.into());
        self
    }

    pub fn get(&self, field: &str) -> Option<&str> {
        self.values.get(field).map(String::as_str)
    }

    pub fn set(&mut self, field: &str, value: Option<String>) {
        match value {
            Some(v) => {
                self.values.insert(field.to_owned(), v);
            }
            None => {
                self.values.remove(field);
            }
        }
    }

    pub fn present_fields(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Drops every value whose field is not in `schema`.
    pub fn project(&self, schema: &Schema) -> Record {
        Record {
            id: self.id.clone(),
            values: self
                .values
                .iter()
                .filter(|(k, _)| schema.contains(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// One JSON object with `id` first and fields in schema order; missing
    /// values are omitted.
    pub fn to_json_line(&self, schema: &Schema) -> String {
        let mut line = String::from("{\"id\":");
        line.push_str(&Value::String(self.id.clone()).to_string());
        for name in schema.names() {
            if let Some(v) = self.get(name) {
                line.push(',');
                line.push_str(&Value::String(name.to_owned()).to_string());
                line.push(':');
                line.push_str(&Value::String(v.to_owned()).to_string());
            }
        }
        line.push('}');
        line
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Association {
    pub query_id: String,
    pub entry_id: String,
    pub strength: f64,
}

impl Association {
    pub fn new(query_id: impl Into<String>, entry_id: impl Into<String>, strength: f64) -> Self {
        Association {
            query_id: query_id.into(),
            entry_id: entry_id.into(),
            strength,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub lines_read: usize,
    pub accepted: usize,
    /// Records rejected because their id was already loaded.
    pub rejected_duplicates: usize,
    /// Blank and malformed lines.
    pub skipped_lines: usize,
    pub unknown_fields_skipped: usize,
    pub malformed: Vec<(usize, String)>,
}

impl IngestReport {
    pub fn is_balanced(&self) -> bool {
        self.accepted + self.rejected_duplicates + self.skipped_lines == self.lines_read
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_record_line(
    line: &str,
    schema: &Schema,
    unknown: &mut usize,
) -> std::result::Result<Record, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let Value::Object(map) = value else {
        return Err("line is not a JSON object".into());
    };
    let id = match map.get("id") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(Value::String(_)) => return Err("empty \"id\"".into()),
        _ => return Err("missing string field \"id\"".into()),
    };
    let mut record = Record::new(id);
    for (key, v) in &map {
        if key == "id" {
            continue;
        }
        if !schema.contains(key) {
            *unknown += 1;
            continue;
        }
        match v {
            Value::Null => {}
            Value::String(s) => record.set(key, Some(s.clone())),
            other => return Err(format!("field {key:?} is not a string: {other}")),
        }
    }
    Ok(record)
}

/// Parses records from JSONL text. Malformed lines and duplicate ids are
/// counted in the report, never fatal.
pub fn parse_records(text: &str, schema: &Schema) -> (Vec<Record>, IngestReport) {
    let mut report = IngestReport::default();
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        report.lines_read += 1;
        if line.trim().is_empty() {
            report.skipped_lines += 1;
            continue;
        }
        match parse_record_line(line, schema, &mut report.unknown_fields_skipped) {
            Ok(record) => {
                if seen.insert(record.id.clone()) {
                    report.accepted += 1;
                    records.push(record);
                } else {
                    report.rejected_duplicates += 1;
                }
            }
            Err(message) => {
                report.skipped_lines += 1;
                report.malformed.push((idx + 1, message));
            }
        }
    }
    (records, report)
}

pub fn load_records(path: impl AsRef<Path>, schema: &Schema) -> Result<(Vec<Record>, IngestReport)> {
    let text = read_to_string(path.as_ref())?;
    Ok(parse_records(&text, schema))
}

pub fn write_records(path: impl AsRef<Path>, records: &[Record], schema: &Schema) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        writeln!(out, "{}", r.to_json_line(schema)).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AssociationReport {
    pub lines_read: usize,
    pub accepted: usize,
    pub dangling: usize,
    /// Repeated (query, entry) pairs folded into one association by summing
    /// strengths.
    pub merged_duplicates: usize,
    pub skipped_lines: usize,
    pub malformed: Vec<(usize, String)>,
}

#[derive(Deserialize)]
struct AssociationLine {
    query_id: String,
    entry_id: String,
    #[serde(default)]
    strength: Option<f64>,
}

pub fn parse_associations(
    text: &str,
    queries: &[Record],
    entries: &[Record],
) -> Result<(Vec<Association>, AssociationReport)> {
    let query_ids: HashSet<&str> = queries.iter().map(|r| r.id.as_str()).collect();
    let entry_ids: HashSet<&str> = entries.iter().map(|r| r.id.as_str()).collect();
    let mut report = AssociationReport::default();
    let mut out: Vec<Association> = Vec::new();
    let mut position: HashMap<(String, String), usize> = HashMap::new();

    for (idx, line) in text.lines().enumerate() {
        report.lines_read += 1;
        if line.trim().is_empty() {
            report.skipped_lines += 1;
            continue;
        }
        let parsed: AssociationLine = match serde_json::from_str(line) {
            Ok(p) => p,
            Err(e) => {
                report.skipped_lines += 1;
                report.malformed.push((idx + 1, e.to_string()));
                continue;
            }
        };
        let strength = parsed.strength.unwrap_or(1.0);
        if strength.is_nan() || strength <= 0.0 || !strength.is_finite() {
            return Err(Error::NonPositiveStrength {
                query_id: parsed.query_id,
                entry_id: parsed.entry_id,
                strength,
            });
        }
        if !query_ids.contains(parsed.query_id.as_str()) || !entry_ids.contains(parsed.entry_id.as_str()) {
            report.dangling += 1;
            continue;
        }
        let key = (parsed.query_id, parsed.entry_id);
        if let Some(&at) = position.get(&key) {
            out[at].strength += strength;
            report.merged_duplicates += 1;
        } else {
            position.insert(key.clone(), out.len());
            out.push(Association::new(key.0, key.1, strength));
            report.accepted += 1;
        }
    }
    Ok((out, report))
}

pub fn load_associations(
    path: impl AsRef<Path>,
    queries: &[Record],
    entries: &[Record],
) -> Result<(Vec<Association>, AssociationReport)> {
    let text = read_to_string(path.as_ref())?;
    parse_associations(&text, queries, entries)
}

pub fn write_associations(path: impl AsRef<Path>, associations: &[Association]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for a in associations {
        let line = serde_json::to_string(a)?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub missing: Vec<String>,
    pub control_char_fields: Vec<String>,
    pub foreign_fields: Vec<String>,
}

impl ValidationReport {
    pub fn missing_count(&self) -> usize {
        self.missing.len()
    }

    pub fn flagged_count(&self) -> usize {
        self.control_char_fields.len()
    }
}

pub fn validate(record: &Record, schema: &Schema) -> ValidationReport {
    let mut report = ValidationReport::default();
    for name in schema.names() {
        match record.get(name) {
            None => report.missing.push(name.to_owned()),
            Some(v) if v.chars().any(char::is_control) => {
                report.control_char_fields.push(name.to_owned())
            }
            Some(_) => {}
        }
    }
    for (k, _) in record.present_fields() {
        if !schema.contains(k) {
            report.foreign_fields.push(k.to_owned());
        }
    }
    report
}
