//! Exact cosine top-k over Level-1 embeddings.
//!
//! Rows are unit-norm, so similarity is the plain dot product. Search is a
//! full scan; results are ordered by descending similarity with ties broken
//! by ascending summary id.
//!
//! File layout (`index.hym1`), all little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `HYM1` |
//! | 4     | dimension (u32) |
//! | 8     | row count (u64) |
//! | per row: 8 + 4·D | summary id (u64), D × f32 |

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::embedding::dot;
use crate::error::{Error, Result};
use crate::model::SummaryId;

pub const INDEX_MAGIC: &[u8; 4] = b"HYM1";
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub summary_id: SummaryId,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<SummaryId>,
    data: Vec<f32>,
    positions: HashMap<SummaryId, usize>,
}

impl VectorIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            positions: HashMap::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: SummaryId) -> bool {
        self.positions.contains_key(&id)
    }

    pub fn ids(&self) -> &[SummaryId] {
        &self.ids
    }

    pub fn get(&self, id: SummaryId) -> Option<&[f32]> {
        self.positions.get(&id).map(|&row| self.row(row))
    }

    fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = (SummaryId, &[f32])> {
        self.ids.iter().enumerate().map(|(i, id)| (*id, self.row(i)))
    }

    pub fn insert(&mut self, id: SummaryId, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::contract(format!(
                "vector for summary {id} has dimension {}, index expects {}",
                vector.len(),
                self.dim
            )));
        }
        if self.positions.contains_key(&id) {
            return Err(Error::contract(format!("summary {id} already indexed")));
        }
        self.positions.insert(id, self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    /// Keeps only the first `len` rows in insertion order.
    pub(crate) fn truncate(&mut self, len: usize) {
        for id in self.ids.drain(len.min(self.ids.len())..) {
            self.positions.remove(&id);
        }
        self.data.truncate(self.ids.len() * self.dim);
    }

    pub fn topk_search(&self, query: &[f32], k: usize) -> Result<Vec<Hit>> {
        self.topk_search_where(query, k, |_| true)
    }

    /// Top-k restricted to rows whose id satisfies `keep`.
    pub fn topk_search_where(
        &self,
        query: &[f32],
        k: usize,
        keep: impl Fn(SummaryId) -> bool,
    ) -> Result<Vec<Hit>> {
        if query.len() != self.dim {
            return Err(Error::contract(format!(
                "query has dimension {}, index expects {}",
                query.len(),
                self.dim
            )));
        }
        if k == 0 {
            return Err(Error::contract("k must be at least 1"));
        }
        let mut hits: Vec<Hit> = self
            .rows()
            .filter(|(id, _)| keep(*id))
            .map(|(summary_id, row)| Hit {
                summary_id,
                similarity: dot(query, row),
            })
            .collect();
        if hits.len() > k {
            hits.select_nth_unstable_by(k - 1, rank_order);
            hits.truncate(k);
        }
        hits.sort_unstable_by(rank_order);
        Ok(hits)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (8 + 4 * self.dim));
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (id, row) in self.rows() {
            out.extend_from_slice(&id.to_le_bytes());
            for x in row {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, reason: &str| Error::IndexFormat {
            offset: offset as u64,
            reason: reason.to_string(),
        };
        if bytes.len() < 4 || &bytes[..4] != INDEX_MAGIC {
            return Err(fail(0, "bad magic"));
        }
        if bytes.len() < HEADER_LEN {
            return Err(fail(bytes.len(), "truncated header"));
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if dim == 0 {
            return Err(fail(4, "zero dimension"));
        }
        let row_len = 8 + 4 * dim;
        let expected = (count as u128) * (row_len as u128) + HEADER_LEN as u128;
        if (bytes.len() as u128) < expected {
            // report the start of the first incomplete row
            let complete = (bytes.len() - HEADER_LEN) / row_len;
            return Err(fail(HEADER_LEN + complete * row_len, "truncated row payload"));
        }
        if (bytes.len() as u128) > expected {
            return Err(fail(expected as usize, "trailing bytes after last row"));
        }
        let mut index = VectorIndex::new(dim);
        let mut vector = vec![0f32; dim];
        for r in 0..count as usize {
            let at = HEADER_LEN + r * row_len;
            let id = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            for (j, x) in vector.iter_mut().enumerate() {
                let p = at + 8 + 4 * j;
                *x = f32::from_le_bytes(bytes[p..p + 4].try_into().unwrap());
            }
            index
                .insert(id, &vector)
                .map_err(|_| fail(at, "duplicate summary id"))?;
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then(a.summary_id.cmp(&b.summary_id))
}
