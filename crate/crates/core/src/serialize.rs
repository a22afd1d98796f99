//! Record → token sequence conversion.
//!
//! Values are emitted as raw UTF-8 bytes (ids 0..=255). Special tokens follow:
//! `[CLS]`, `[SEP]`, `[MASK]`, then a `[SEP]_f` / `[MASK]_f` pair for every
//! distinct field name, query fields first.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::{Record, Schema};

pub const CLS: u32 = 256;
pub const SEP: u32 = 257;
pub const MASK: u32 = 258;
pub const BASE_VOCAB: usize = 259;
pub const DEFAULT_MAX_LEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SepMode {
    Single,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskMode {
    None,
    Single,
    Multi,
}

impl SepMode {
    pub const ALL: [SepMode; 2] = [SepMode::Single, SepMode::Multi];
}

impl MaskMode {
    pub const ALL: [MaskMode; 3] = [MaskMode::None, MaskMode::Single, MaskMode::Multi];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    specials: Vec<String>,
    field_slots: HashMap<String, u32>,
}

impl Vocab {
    pub fn size(&self) -> usize {
        256 + self.specials.len()
    }

    /// Id of `[SEP]_field`.
    pub fn field_sep(&self, field: &str) -> Option<u32> {
        self.field_slots.get(field).copied()
    }

    /// Id of `[MASK]_field`.
    pub fn field_mask(&self, field: &str) -> Option<u32> {
        self.field_slots.get(field).map(|id| id + 1)
    }

    pub fn special_name(&self, id: u32) -> Option<&str> {
        let idx = (id as usize).checked_sub(256)?;
        self.specials.get(idx).map(String::as_str)
    }

    pub fn is_special(&self, id: u32) -> bool {
        (256..self.size() as u32).contains(&id)
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }
}

pub fn build_vocab(query_schema: &Schema, entry_schema: &Schema) -> Vocab {
    let mut specials = vec!["[CLS]".to_owned(), "[SEP]".to_owned(), "[MASK]".to_owned()];
    let mut field_slots = HashMap::new();
    for name in query_schema.names().chain(entry_schema.names()) {
        if field_slots.contains_key(name) {
            continue;
        }
        field_slots.insert(name.to_owned(), (256 + specials.len()) as u32);
        specials.push(format!("[SEP]_{name}"));
        specials.push(format!("[MASK]_{name}"));
    }
    Vocab {
        specials,
        field_slots,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    /// Wraps raw ids; the sequence must start with `[CLS]`.
    pub fn from_ids(ids: Vec<u32>) -> Result<Self> {
        match ids.first() {
            Some(&CLS) => Ok(TokenSequence { ids }),
            Some(_) => Err(Error::Serialize("sequence must start with [CLS]".into())),
            None => Err(Error::Serialize("empty token sequence".into())),
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Serialization settings shared by both towers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub sep: SepMode,
    pub mask: MaskMode,
    pub max_len: usize,
}

impl Default for Layout {
    fn default() -> Self {
        Layout {
            sep: SepMode::Multi,
            mask: MaskMode::Multi,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

pub fn serialize(
    record: &Record,
    schema: &Schema,
    sep: SepMode,
    mask: MaskMode,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(Error::Serialize(format!("max_len must be at least 2, got {max_len}")));
    }
    let mut ids = vec![CLS];
    for name in schema.names() {
        let slot = vocab
            .field_sep(name)
            .ok_or_else(|| Error::Serialize(format!("field {name:?} has no vocabulary slot")))?;
        match record.get(name) {
            Some(value) => ids.extend(value.bytes().map(u32::from)),
            None => match mask {
                MaskMode::None => {}
                MaskMode::Single => ids.push(MASK),
                MaskMode::Multi => ids.push(slot + 1),
            },
        }
        ids.push(match sep {
            SepMode::Single => SEP,
            SepMode::Multi => slot,
        });
        if ids.len() >= max_len {
            break;
        }
    }
    ids.truncate(max_len);
    Ok(TokenSequence { ids })
}

impl Layout {
    pub fn apply(&self, record: &Record, schema: &Schema, vocab: &Vocab) -> Result<TokenSequence> {
        serialize(record, schema, self.sep, self.mask, vocab, self.max_len)
    }
}

pub fn render(seq: &TokenSequence, vocab: &Vocab) -> Result<String> {
    if seq.is_empty() {
        return Err(Error::Serialize("cannot render an empty sequence".into()));
    }
    let mut parts = Vec::with_capacity(seq.len());
    for &id in seq.ids() {
        if id < 256 {
            let b = id as u8;
            if b.is_ascii_graphic() {
                parts.push((b as char).to_string());
            } else {
                parts.push(format!("<{b:02x}>"));
            }
        } else {
            parts.push(vocab.special_name(id).ok_or(Error::UnknownToken(id))?.to_owned());
        }
    }
    Ok(parts.join(" "))
}
