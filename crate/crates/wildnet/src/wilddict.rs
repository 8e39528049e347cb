//! The wild-content store: a bounded FIFO queue of normalized wild pixel
//! embeddings with exact nearest-neighbor retrieval.
//!
//! Embeddings harvested from wild images are pushed each iteration; the
//! contrastive wild term queries the store with a stylized source embedding
//! and pulls toward the closest stored column. Retrieval is an exact linear
//! scan over dot products (queries and columns are unit vectors, so maximum
//! dot product and minimum Euclidean distance pick the same column). Stored
//! columns are constants with respect to optimization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MODULE: &str = "wilddict";

/// Tolerance on the unit-norm requirement for pushed columns and queries.
pub const NORM_TOLERANCE: f32 = 1e-5;

const SNAPSHOT_MAGIC: [u8; 4] = *b"WNQS";

/// Bounded FIFO store of `dim`-channel unit columns.
///
/// Internally a ring buffer; logically the entries are ordered oldest-first,
/// and `nearest` indexes into that logical order.
#[derive(Debug, Clone)]
pub struct ContentStore {
    dim: usize,
    capacity: usize,
    /// Ring storage, `capacity * dim` floats once full; column `i` of the
    /// ring lives at `i*dim..(i+1)*dim`.
    data: Vec<f32>,
    /// Next ring slot to write.
    write_cursor: usize,
    /// Columns currently held (`<= capacity`).
    len: usize,
    /// Total columns ever pushed; identifies the store's age.
    generation: u64,
}

impl ContentStore {
    pub fn new(dim: usize, capacity: usize) -> Result<Self> {
        if dim == 0 || capacity == 0 {
            return Err(Error::Parameter {
                module: MODULE,
                details: format!(
                    "store needs positive dimensions, got dim {dim}, capacity {capacity}"
                ),
            });
        }
        Ok(Self {
            dim,
            capacity,
            data: Vec::new(),
            write_cursor: 0,
            len: 0,
            generation: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Append unit columns in order, evicting the oldest entries once the
    /// capacity is reached. `columns` is a flat `count * dim` slice, one
    /// column after another.
    pub fn push(&mut self, columns: &[f32]) -> Result<()> {
        if columns.len() % self.dim != 0 {
            return Err(Error::Shape {
                module: MODULE,
                details: format!(
                    "pushed {} floats, not a multiple of the store dimension {}",
                    columns.len(),
                    self.dim
                ),
            });
        }
        for (i, col) in columns.chunks_exact(self.dim).enumerate() {
            let norm = col.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() as f32;
            let unit_or_zero = norm == 0.0 || (norm - 1.0).abs() <= NORM_TOLERANCE;
            if !norm.is_finite() || !unit_or_zero {
                return Err(Error::Data {
                    module: MODULE,
                    details: format!("pushed column {i} has L2 norm {norm}, expected 1"),
                });
            }
        }
        if self.data.len() < self.capacity * self.dim {
            self.data.reserve(columns.len().min(self.capacity * self.dim - self.data.len()));
        }
        for col in columns.chunks_exact(self.dim) {
            let at = self.write_cursor * self.dim;
            if self.data.len() < at + self.dim {
                self.data.extend_from_slice(col);
            } else {
                self.data[at..at + self.dim].copy_from_slice(col);
            }
            self.write_cursor = (self.write_cursor + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
            self.generation += 1;
        }
        Ok(())
    }

    /// The column at logical index `i` (0 = oldest surviving entry).
    pub fn entry(&self, i: usize) -> &[f32] {
        assert!(i < self.len, "store index {i} out of bounds ({})", self.len);
        let ring = if self.len < self.capacity {
            i
        } else {
            (self.write_cursor + i) % self.capacity
        };
        &self.data[ring * self.dim..(ring + 1) * self.dim]
    }

    /// Exact argmax of `dot(query, column)` over all stored columns; ties go
    /// to the lowest logical index (the oldest surviving entry). Returns the
    /// winning column and its logical index.
    pub fn nearest(&self, query: &[f32]) -> Result<(&[f32], usize)> {
        if self.is_empty() {
            return Err(Error::EmptyStore);
        }
        if query.len() != self.dim {
            return Err(Error::Shape {
                module: MODULE,
                details: format!(
                    "query has {} channels but the store holds {}",
                    query.len(),
                    self.dim
                ),
            });
        }
        let mut best_idx = 0usize;
        let mut best_dot = f64::NEG_INFINITY;
        for i in 0..self.len {
            let col = self.entry(i);
            let mut dot = 0.0f64;
            for (q, c) in query.iter().zip(col.iter()) {
                dot += *q as f64 * *c as f64;
            }
            if dot > best_dot {
                best_dot = dot;
                best_idx = i;
            }
        }
        Ok((self.entry(best_idx), best_idx))
    }

    /// Binary snapshot: magic, then little-endian `u64` header fields
    /// `dim`, `len`, `capacity`, `generation`, then the stored columns oldest
    /// first as raw `f32` values (row-major: column 0 fully, then column 1, …).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 32 + self.len * self.dim * 4);
        out.extend_from_slice(&SNAPSHOT_MAGIC);
        for v in [
            self.dim as u64,
            self.len as u64,
            self.capacity as u64,
            self.generation,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..self.len {
            for x in self.entry(i) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Rebuild from [`ContentStore::to_bytes`] output; logical order is
    /// preserved. Trailing bytes are rejected.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |details: String| Error::Format { module: MODULE, details };
        if bytes.len() < 4 + 32 || bytes[..4] != SNAPSHOT_MAGIC {
            return Err(bad("not a store snapshot (bad magic or truncated)".into()));
        }
        let mut header = [0u64; 4];
        for (i, h) in header.iter_mut().enumerate() {
            let off = 4 + i * 8;
            *h = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        }
        let [dim, len, capacity, generation] = header;
        let (dim, len, capacity) = (dim as usize, len as usize, capacity as usize);
        if dim == 0 || capacity == 0 || len > capacity {
            return Err(bad(format!(
                "inconsistent snapshot header: dim {dim}, len {len}, capacity {capacity}"
            )));
        }
        let payload = &bytes[4 + 32..];
        if payload.len() != len * dim * 4 {
            return Err(bad(format!(
                "snapshot payload is {} bytes, expected {}",
                payload.len(),
                len * dim * 4
            )));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut store = Self::new(dim, capacity)?;
        store.push(&floats)?;
        store.generation = generation;
        Ok(store)
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(MODULE, path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(MODULE, path, e))
    }

    /// Read a snapshot written by [`ContentStore::save_snapshot`].
    pub fn load_snapshot(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(MODULE, path, e))?;
        let mut r = BufReader::new(file);
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io(MODULE, path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f32]) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn push_units(store: &mut ContentStore, cols: &[Vec<f32>]) {
        let flat: Vec<f32> = cols.iter().flat_map(|c| unit(c)).collect();
        store.push(&flat).unwrap();
    }

    #[test]
    fn fifo_evicts_oldest() {
        let mut s = ContentStore::new(2, 4).unwrap();
        let cols: Vec<Vec<f32>> = (0..6)
            .map(|i| {
                let a = i as f32 * 0.7;
                vec![a.cos(), a.sin()]
            })
            .collect();
        push_units(&mut s, &cols[..3]);
        assert_eq!(s.len(), 3);
        push_units(&mut s, &cols[3..]);
        assert_eq!(s.len(), 4);
        assert_eq!(s.generation(), 6);
        // survivors are the last four pushed, in push order
        for (i, want) in cols[2..].iter().enumerate() {
            let got = s.entry(i);
            let want = unit(want);
            assert!(got.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }

    #[test]
    fn fill_to_exact_capacity_keeps_everything() {
        let mut s = ContentStore::new(3, 5).unwrap();
        let cols: Vec<Vec<f32>> = (0..5).map(|i| {
            let mut v = vec![0.0; 3];
            v[i % 3] = 1.0;
            v
        }).collect();
        push_units(&mut s, &cols);
        assert_eq!(s.len(), 5);
        for (i, want) in cols.iter().enumerate() {
            assert_eq!(s.entry(i), unit(want).as_slice());
        }
    }

    #[test]
    fn full_scale_volume_arithmetic() {
        // per-iteration harvest: a 16x16 grid per image, batch of 8
        let per_iter = 16 * 16 * 8;
        assert_eq!(per_iter, 2048);
        // a 393216-column store holds exactly 192 iterations of history
        assert_eq!(393_216 / per_iter, 192);
        assert_eq!(393_216 % per_iter, 0);
    }

    #[test]
    fn nearest_picks_max_dot() {
        let mut s = ContentStore::new(2, 8).unwrap();
        push_units(&mut s, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]);
        let q = unit(&[0.8, 0.6]);
        let (entry, idx) = s.nearest(&q).unwrap();
        assert_eq!(idx, 2);
        assert!((entry[0] - 0.6).abs() < 1e-6 && (entry[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn nearest_exact_match_returns_dot_one() {
        let mut s = ContentStore::new(3, 8).unwrap();
        push_units(&mut s, &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let (entry, idx) = s.nearest(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(idx, 1);
        let dot: f32 = entry.iter().zip([0.0, 1.0, 0.0]).map(|(a, b)| a * b).sum();
        assert!((dot - 1.0).abs() < 1e-6);
    }

    #[test]
    fn nearest_tie_breaks_to_lowest_index() {
        let mut s = ContentStore::new(2, 8).unwrap();
        push_units(&mut s, &[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        let (_, idx) = s.nearest(&[1.0, 0.0]).unwrap();
        assert_eq!(idx, 1);
    }

    #[test]
    fn empty_store_query_is_an_error() {
        let s = ContentStore::new(4, 4).unwrap();
        assert!(matches!(s.nearest(&[1.0, 0.0, 0.0, 0.0]), Err(Error::EmptyStore)));
    }

    #[test]
    fn non_unit_push_rejected() {
        let mut s = ContentStore::new(2, 4).unwrap();
        assert!(matches!(s.push(&[3.0, 4.0]), Err(Error::Data { .. })));
        // zero columns are tolerated (the projector can emit them)
        s.push(&[0.0, 0.0]).unwrap();
    }

    #[test]
    fn wrong_width_push_rejected() {
        let mut s = ContentStore::new(3, 4).unwrap();
        assert!(matches!(s.push(&[1.0, 0.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn snapshot_round_trip_preserves_logical_order() {
        let mut s = ContentStore::new(2, 3).unwrap();
        let cols: Vec<Vec<f32>> = (0..5)
            .map(|i| {
                let a = 0.3 + i as f32;
                vec![a.cos(), a.sin()]
            })
            .collect();
        push_units(&mut s, &cols);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.bin");
        s.save_snapshot(&path).unwrap();
        let loaded = ContentStore::load_snapshot(&path).unwrap();
        assert_eq!(loaded.dim(), 2);
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.capacity(), 3);
        assert_eq!(loaded.generation(), 5);
        for i in 0..3 {
            assert_eq!(loaded.entry(i), s.entry(i));
        }
        // and retrieval behaves identically
        let q = unit(&[0.2, 0.9]);
        assert_eq!(loaded.nearest(&q).unwrap().1, s.nearest(&q).unwrap().1);
    }

    #[test]
    fn snapshot_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"not a snapshot").unwrap();
        assert!(ContentStore::load_snapshot(&path).is_err());
    }

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
        loop {
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            if n > 1e-3 {
                return v.iter().map(|x| x / n).collect();
            }
        }
    }

    /// Brute-force scan over logical entries, f64 dots, lowest-index ties.
    fn oracle_nearest(s: &ContentStore, q: &[f32]) -> usize {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for i in 0..s.len() {
            let d: f64 = s
                .entry(i)
                .iter()
                .zip(q.iter())
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum();
            if d > best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    #[test]
    fn nearest_matches_oracle_on_large_random_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = ContentStore::new(8, 10_000).unwrap();
        let flat: Vec<f32> = (0..10_000).flat_map(|_| random_unit(&mut rng, 8)).collect();
        s.push(&flat).unwrap();
        for _ in 0..50 {
            let q = random_unit(&mut rng, 8);
            assert_eq!(s.nearest(&q).unwrap().1, oracle_nearest(&s, &q));
        }
    }

    proptest! {
        /// On unit vectors, minimizing Euclidean distance and maximizing the
        /// dot product select the same store entry.
        #[test]
        fn distance_and_dot_agree(seed in 0u64..5_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..20);
            let mut s = ContentStore::new(4, 32).unwrap();
            let flat: Vec<f32> = (0..n).flat_map(|_| random_unit(&mut rng, 4)).collect();
            s.push(&flat).unwrap();
            let q = random_unit(&mut rng, 4);
            let by_dot = s.nearest(&q).unwrap().1;
            let mut best = (f64::INFINITY, 0usize);
            for i in 0..s.len() {
                let d: f64 = s.entry(i).iter().zip(q.iter())
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
                if d < best.0 - 1e-12 {
                    best = (d, i);
                }
            }
            prop_assert_eq!(by_dot, best.1);
        }

        /// After any push sequence the survivors are exactly the last
        /// min(total, capacity) pushed columns, in order.
        #[test]
        fn contents_are_push_suffix(
            seed in 0u64..5_000,
            capacity in 1usize..12,
            total in 0usize..40,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = ContentStore::new(3, capacity).unwrap();
            let mut all: Vec<Vec<f32>> = Vec::new();
            let mut remaining = total;
            while remaining > 0 {
                let chunk = rng.gen_range(1..=remaining.min(7));
                let cols: Vec<Vec<f32>> =
                    (0..chunk).map(|_| random_unit(&mut rng, 3)).collect();
                let flat: Vec<f32> = cols.iter().flatten().copied().collect();
                s.push(&flat).unwrap();
                all.extend(cols);
                remaining -= chunk;
            }
            let keep = total.min(capacity);
            prop_assert_eq!(s.len(), keep);
            prop_assert_eq!(s.generation(), total as u64);
            for i in 0..keep {
                let want = &all[total - keep + i];
                prop_assert_eq!(s.entry(i), want.as_slice());
            }
        }
    }
}
