//! Exact nearest-neighbor index over entry embeddings.
//!
//! Snapshot layout (little-endian):
//!
//! ```text
//! "GIDX" | u32 version | u8 sim | u32 K | u64 m
//! | m × (u32 len, UTF-8 id) | m×K f32 row-major | u32 CRC32
//! ```

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::records::Record;
use crate::scoring::{similarity_unchecked, SimKind};
use crate::train::{check_crc, Checkpoint};

pub const INDEX_MAGIC: &[u8; 4] = b"GIDX";
pub const INDEX_VERSION: u32 = 1;

const ENCODE_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexSnapshot {
    sim: SimKind,
    dim: usize,
    ids: Vec<String>,
    matrix: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hit {
    pub entry_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    pub hits: Vec<Hit>,
}

impl QueryResult {
    pub fn top(&self) -> Option<&str> {
        self.hits.first().map(|h| h.entry_id.as_str())
    }

    pub fn ids(&self) -> Vec<String> {
        self.hits.iter().map(|h| h.entry_id.clone()).collect()
    }
}

impl IndexSnapshot {
    pub fn new(sim: SimKind, dim: usize, ids: Vec<String>, matrix: Vec<f32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Index("index needs at least one entry".into()));
        }
        if dim == 0 {
            return Err(Error::Index("embedding dimension must be positive".into()));
        }
        if matrix.len() != ids.len() * dim {
            return Err(Error::Index(format!(
                "matrix holds {} values, expected {} rows of {dim}",
                matrix.len(),
                ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Index(format!("duplicate entry id {dup:?}")));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Index("non-finite embedding value".into()));
        }
        Ok(IndexSnapshot { sim, dim, ids, matrix })
    }

    pub fn from_rows(sim: SimKind, ids: Vec<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimMismatch { left: bad.len(), right: dim });
        }
        if rows.len() != ids.len() {
            return Err(Error::DimMismatch {
                left: rows.len(),
                right: ids.len(),
            });
        }
        IndexSnapshot::new(sim, dim, ids, rows.concat())
    }

    pub fn sim(&self) -> SimKind {
        self.sim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, j: usize) -> &[f32] {
        &self.matrix[j * self.dim..(j + 1) * self.dim]
    }

    /// Exact top-k: score descending, then entry id ascending.
    pub fn search(&self, query: &[f32], k: usize) -> Result<QueryResult> {
        if k < 1 {
            return Err(Error::Index("k must be at least 1".into()));
        }
        if query.len() != self.dim {
            return Err(Error::DimMismatch {
                left: query.len(),
                right: self.dim,
            });
        }
        let mut scored: Vec<(f64, usize)> = self
            .matrix
            .chunks_exact(self.dim)
            .map(|row| similarity_unchecked(self.sim, query, row))
            .zip(0..)
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            b.0.total_cmp(&a.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(QueryResult {
            hits: scored
                .into_iter()
                .map(|(score, j)| Hit {
                    entry_id: self.ids[j].clone(),
                    score,
                })
                .collect(),
        })
    }
}

/// Embeds every entry with the checkpoint's entry tower.
pub fn build_index(ckpt: &Checkpoint, entries: &[Record], sim: SimKind) -> Result<IndexSnapshot> {
    if entries.is_empty() {
        return Err(Error::Index("cannot index an empty database".into()));
    }
    let mut matrix = Vec::with_capacity(entries.len() * ckpt.entry_encoder().out_dim());
    for chunk in entries.chunks(ENCODE_CHUNK) {
        let refs: Vec<&Record> = chunk.iter().collect();
        for row in ckpt.encode_entries(&refs)? {
            matrix.extend_from_slice(&row);
        }
    }
    let ids = entries.iter().map(|e| e.id.clone()).collect();
    IndexSnapshot::new(sim, ckpt.entry_encoder().out_dim(), ids, matrix)
}

pub fn ground(ckpt: &Checkpoint, snapshot: &IndexSnapshot, query: &Record, k: usize) -> Result<QueryResult> {
    let seq = ckpt.serialize_query(query)?;
    let vec = ckpt.query_encoder().encode(&seq)?;
    snapshot.search(&vec, k)
}

/// Grounds many queries, encoding them in batches.
pub fn ground_batch(ckpt: &Checkpoint, snapshot: &IndexSnapshot, queries: &[&Record], k: usize) -> Result<Vec<QueryResult>> {
    let mut out = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(ENCODE_CHUNK) {
        for vec in ckpt.encode_queries(chunk)? {
            out.push(snapshot.search(&vec, k)?);
        }
    }
    Ok(out)
}

pub fn index_to_bytes(snapshot: &IndexSnapshot) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + snapshot.matrix.len() * 4 + snapshot.ids.len() * 12);
    out.extend_from_slice(INDEX_MAGIC);
    out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    out.push(snapshot.sim.code());
    out.extend_from_slice(&(snapshot.dim as u32).to_le_bytes());
    out.extend_from_slice(&(snapshot.ids.len() as u64).to_le_bytes());
    for id in &snapshot.ids {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    for v in &snapshot.matrix {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= buf.len())
        .ok_or_else(|| Error::Format("unexpected end of index file".into()))?;
    let out = &buf[*pos..end];
    *pos = end;
    Ok(out)
}

pub fn index_from_bytes(bytes: &[u8]) -> Result<IndexSnapshot> {
    if bytes.len() < INDEX_MAGIC.len() || &bytes[..INDEX_MAGIC.len()] != INDEX_MAGIC {
        return Err(Error::Format("not an index file (bad magic)".into()));
    }
    let mut pos = INDEX_MAGIC.len();
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().expect("4 bytes"));
    if version != INDEX_VERSION {
        return Err(Error::Version {
            found: version,
            expected: INDEX_VERSION,
        });
    }
    let payload = check_crc(bytes)?;
    let code = take(payload, &mut pos, 1)?[0];
    let sim = SimKind::from_code(code).ok_or_else(|| Error::Format(format!("unknown similarity code {code}")))?;
    let dim = u32::from_le_bytes(take(payload, &mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    let m = u64::from_le_bytes(take(payload, &mut pos, 8)?.try_into().expect("8 bytes"));
    let m = usize::try_from(m).map_err(|_| Error::Format("entry count overflows".into()))?;
    let mut ids = Vec::with_capacity(m.min(payload.len() / 4));
    for _ in 0..m {
        let len = u32::from_le_bytes(take(payload, &mut pos, 4)?.try_into().expect("4 bytes")) as usize;
        let id = std::str::from_utf8(take(payload, &mut pos, len)?).map_err(|e| Error::Format(format!("entry id is not UTF-8: {e}")))?;
        ids.push(id.to_string());
    }
    let n = m.checked_mul(dim).and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::Format("matrix size overflows".into()))?;
    let matrix = take(payload, &mut pos, n)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if pos != payload.len() {
        return Err(Error::Format(format!("{} trailing bytes after matrix", payload.len() - pos)));
    }
    IndexSnapshot::new(sim, dim, ids, matrix)
}

pub fn save_index(snapshot: &IndexSnapshot, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, index_to_bytes(snapshot)).map_err(|e| Error::io(path, e))
}

pub fn load_index(path: impl AsRef<Path>) -> Result<IndexSnapshot> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    index_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(sim: SimKind) -> IndexSnapshot {
        IndexSnapshot::from_rows(
            sim,
            vec!["b".into(), "a".into(), "c".into()],
            &[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]],
        )
        .unwrap()
    }

    #[test]
    fn ties_break_by_id() {
        let r = snap(SimKind::Ips).search(&[1.0, 0.0], 3).unwrap();
        assert_eq!(r.ids(), vec!["a", "b", "c"]);
    }

    #[test]
    fn nsd_exact_row_scores_zero() {
        let r = snap(SimKind::Nsd).search(&[0.0, 2.0], 1).unwrap();
        assert_eq!(r.hits[0].entry_id, "c");
        assert_eq!(r.hits[0].score, 0.0);
    }

    #[test]
    fn k_past_end_returns_all() {
        let r = snap(SimKind::Nsd).search(&[0.0, 0.0], 50).unwrap();
        assert_eq!(r.hits.len(), 3);
    }

    #[test]
    fn bad_queries() {
        let s = snap(SimKind::Ips);
        assert!(s.search(&[1.0], 1).is_err());
        assert!(s.search(&[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn invalid_snapshots() {
        assert!(IndexSnapshot::new(SimKind::Ips, 2, vec![], vec![]).is_err());
        assert!(IndexSnapshot::new(SimKind::Ips, 1, vec!["a".into(), "a".into()], vec![0.0, 1.0]).is_err());
        assert!(IndexSnapshot::new(SimKind::Ips, 1, vec!["a".into()], vec![f32::NAN]).is_err());
    }

    #[test]
    fn bytes_round_trip_and_corruption() {
        let s = snap(SimKind::Nsd);
        let bytes = index_to_bytes(&s);
        assert_eq!(index_from_bytes(&bytes).unwrap(), s);

        let truncated = &bytes[..bytes.len() - 9];
        assert!(matches!(index_from_bytes(truncated), Err(Error::Checksum { .. })));

        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(index_from_bytes(&flipped), Err(Error::Checksum { .. })));

        let mut versioned = bytes.clone();
        versioned[4] = 9;
        assert!(matches!(index_from_bytes(&versioned), Err(Error::Version { .. })));

        assert!(matches!(index_from_bytes(b"NOPE...."), Err(Error::Format(_))));
    }
}
