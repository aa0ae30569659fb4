//! Sparse implicit-feedback data: the compressed-row interaction matrix, text
//! ingestion, user splits, fold-in partitions and training-time masks.

pub mod ingest;
pub mod sampling;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub use ingest::{binarize_and_filter, load_events, RawEvent};
pub use sampling::{
    batch_iter, densify_row, fold_in_split, sample_mask, split_users, FoldInRow, MaskConfig,
    MaskedRow, SplitSpec, UserSplit,
};

const MATRIX_MAGIC: &[u8; 8] = b"RACTCSR1";

/// Binary user-by-item interaction matrix in compressed sparse row form.
/// Item indices within each row are strictly increasing; the matrix is
/// immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    n_users: usize,
    n_items: usize,
    row_offsets: Vec<usize>,
    item_ids: Vec<u32>,
    /// Raw item id for each dense item index.
    item_vocab: Vec<String>,
}

impl InteractionMatrix {
    /// Build from per-user sorted, duplicate-free item index lists.
    pub fn from_rows(rows: Vec<Vec<u32>>, n_items: usize, item_vocab: Vec<String>) -> Result<Self> {
        if item_vocab.len() != n_items {
            return Err(Error::Data(format!(
                "vocab size {} does not match item count {n_items}",
                item_vocab.len()
            )));
        }
        let mut row_offsets = Vec::with_capacity(rows.len() + 1);
        row_offsets.push(0usize);
        let mut item_ids = Vec::new();
        for row in &rows {
            for w in row.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::Data("row items must be strictly increasing".into()));
                }
            }
            if let Some(&last) = row.last() {
                if last as usize >= n_items {
                    return Err(Error::Data(format!(
                        "item index {last} out of range for {n_items} items"
                    )));
                }
            }
            item_ids.extend_from_slice(row);
            row_offsets.push(item_ids.len());
        }
        Ok(Self {
            n_users: rows.len(),
            n_items,
            row_offsets,
            item_ids,
            item_vocab,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn nnz(&self) -> usize {
        self.item_ids.len()
    }

    pub fn sparsity_percent(&self) -> f64 {
        let total = (self.n_users * self.n_items) as f64;
        if total == 0.0 {
            return 0.0;
        }
        100.0 * (1.0 - self.nnz() as f64 / total)
    }

    /// Item indices the user interacted with, sorted ascending.
    pub fn row(&self, user: usize) -> &[u32] {
        &self.item_ids[self.row_offsets[user]..self.row_offsets[user + 1]]
    }

    pub fn item_vocab(&self) -> &[String] {
        &self.item_vocab
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MATRIX_MAGIC)?;
        write_u64(&mut w, self.n_users as u64)?;
        write_u64(&mut w, self.n_items as u64)?;
        write_u64(&mut w, self.nnz() as u64)?;
        for &off in &self.row_offsets {
            write_u64(&mut w, off as u64)?;
        }
        for &id in &self.item_ids {
            write_u64(&mut w, id as u64)?;
        }
        for s in &self.item_vocab {
            write_string(&mut w, s)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).map_err(|e| {
            Error::Data(format!("cannot open matrix file {}: {e}", path.display()))
        })?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Data("matrix file truncated before magic".into()))?;
        if &magic != MATRIX_MAGIC {
            return Err(Error::Data(format!(
                "bad magic in {}: expected RACTCSR1",
                path.display()
            )));
        }
        let n_users = read_u64(&mut r)? as usize;
        let n_items = read_u64(&mut r)? as usize;
        let nnz = read_u64(&mut r)? as usize;
        let mut row_offsets = Vec::with_capacity(n_users + 1);
        for _ in 0..=n_users {
            row_offsets.push(read_u64(&mut r)? as usize);
        }
        if row_offsets.first() != Some(&0) || row_offsets.last() != Some(&nnz) {
            return Err(Error::Data("inconsistent row offsets".into()));
        }
        if row_offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Data("row offsets must be non-decreasing".into()));
        }
        let mut item_ids = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let v = read_u64(&mut r)?;
            if v as usize >= n_items {
                return Err(Error::Data(format!("item index {v} out of range")));
            }
            item_ids.push(v as u32);
        }
        let mut item_vocab = Vec::with_capacity(n_items);
        for _ in 0..n_items {
            item_vocab.push(read_string(&mut r)?);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Data("trailing bytes after matrix payload".into()));
        }
        Ok(Self {
            n_users,
            n_items,
            row_offsets,
            item_ids,
            item_vocab,
        })
    }
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Data("unexpected end of file".into()))?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u64(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Data(format!("unreasonable string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Data("unexpected end of file".into()))?;
    String::from_utf8(buf).map_err(|_| Error::Data("invalid UTF-8 in vocab".into()))
}
