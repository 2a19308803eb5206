//! Embedding stores and the EMB1 binary container.
//!
//! EMB1 layout, little-endian throughout, no padding or compression:
//!
//! ```text
//! magic "EMB1" | u32 record_count | u32 dim | u16 name_len | name bytes
//! then per record: u16 id_len | id bytes | dim x f32
//! ```
//!
//! Stores are immutable after load; values survive a write/read round trip
//! bit-exactly.

use std::collections::HashMap;

use thiserror::Error;

use crate::bytesio::{ByteReader, ByteWriter};

const MAGIC: &[u8; 4] = b"EMB1";

/// One fixed-dimension vector keyed by an utterance or speaker identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub id: String,
    pub values: Vec<f32>,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// A named collection of embeddings with one uniform dimension.
///
/// Insertion order is preserved for serialization; logical equality is map
/// equality over `(id, values)`.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    source_name: String,
    dim: usize,
    entries: Vec<Embedding>,
    index: HashMap<String, usize>,
}

/// Errors raised while loading, building, or querying a store.
#[derive(Debug, Error, PartialEq)]
pub enum StoreError {
    #[error("bad magic: expected \"EMB1\"")]
    BadMagic,
    #[error("truncated header: wanted {wanted} more bytes, {available} available")]
    TruncatedHeader { wanted: usize, available: usize },
    #[error("record {index}: truncated (wanted {wanted} more bytes, {available} available)")]
    TruncatedRecord {
        index: usize,
        wanted: usize,
        available: usize,
    },
    #[error("record {index}: {extra} trailing bytes after final record (dim mismatch or corrupt container)")]
    TrailingBytes { index: usize, extra: usize },
    #[error("record {index} ('{id}'): dim mismatch, store holds {expected}-dim vectors but got {got}")]
    DimMismatch {
        index: usize,
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("record {index} ('{id}'): non-finite value at component {component}")]
    NonFinite {
        index: usize,
        id: String,
        component: usize,
    },
    #[error("record {index}: id is not valid UTF-8")]
    BadUtf8 { index: usize },
    #[error("duplicate id '{id}' at record {index}")]
    DuplicateId { index: usize, id: String },
    #[error("id '{id}' not found in store '{source_name}'")]
    MissingId { id: String, source_name: String },
    #[error("source name longer than 65535 bytes")]
    NameTooLong,
    #[error("id '{id}' longer than 65535 bytes")]
    IdTooLong { id: String },
}

impl EmbeddingStore {
    /// Create an empty store with a fixed dimension.
    pub fn new(source_name: impl Into<String>, dim: usize) -> Self {
        Self {
            source_name: source_name.into(),
            dim,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Insert an embedding, enforcing dimension uniformity, finiteness, and
    /// identifier uniqueness.
    pub fn insert(&mut self, embedding: Embedding) -> Result<(), StoreError> {
        let index = self.entries.len();
        if embedding.dim() != self.dim {
            return Err(StoreError::DimMismatch {
                index,
                id: embedding.id.clone(),
                expected: self.dim,
                got: embedding.dim(),
            });
        }
        if let Some(component) = embedding.values.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite {
                index,
                id: embedding.id.clone(),
                component,
            });
        }
        if self.index.contains_key(&embedding.id) {
            return Err(StoreError::DuplicateId {
                index,
                id: embedding.id,
            });
        }
        self.index.insert(embedding.id.clone(), index);
        self.entries.push(embedding);
        Ok(())
    }

    /// Look up an embedding by identifier.
    pub fn get(&self, id: &str) -> Result<&Embedding, StoreError> {
        self.index
            .get(id)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| StoreError::MissingId {
                id: id.to_string(),
                source_name: self.source_name.clone(),
            })
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> std::slice::Iter<'_, Embedding> {
        self.entries.iter()
    }

    /// Map equality: same name, dim, and id -> value associations, ignoring
    /// insertion order. Float comparison is bitwise.
    pub fn logical_eq(&self, other: &EmbeddingStore) -> bool {
        if self.source_name != other.source_name
            || self.dim != other.dim
            || self.len() != other.len()
        {
            return false;
        }
        self.entries.iter().all(|e| match other.get(&e.id) {
            Ok(o) => {
                e.values.len() == o.values.len()
                    && e.values
                        .iter()
                        .zip(&o.values)
                        .all(|(a, b)| a.to_bits() == b.to_bits())
            }
            Err(_) => false,
        })
    }
}

/// Serialize a store to the EMB1 container.
pub fn write_store(store: &EmbeddingStore) -> Result<Vec<u8>, StoreError> {
    if store.source_name.len() > u16::MAX as usize {
        return Err(StoreError::NameTooLong);
    }
    let mut w = ByteWriter::new();
    w.put(MAGIC);
    w.put_u32(store.len() as u32);
    w.put_u32(store.dim as u32);
    w.put_u16(store.source_name.len() as u16);
    w.put(store.source_name.as_bytes());
    for e in &store.entries {
        if e.id.len() > u16::MAX as usize {
            return Err(StoreError::IdTooLong { id: e.id.clone() });
        }
        w.put_u16(e.id.len() as u16);
        w.put(e.id.as_bytes());
        for &v in &e.values {
            w.put_f32(v);
        }
    }
    Ok(w.into_bytes())
}

/// Deserialize an EMB1 container, verifying magic, record framing, dimension
/// uniformity, and finiteness.
pub fn read_store(bytes: &[u8]) -> Result<EmbeddingStore, StoreError> {
    let mut r = ByteReader::new(bytes);
    let magic = r
        .take(4)
        .map_err(|e| StoreError::TruncatedHeader {
            wanted: e.wanted,
            available: e.available,
        })?;
    if magic != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let header = |e: crate::bytesio::ShortRead| StoreError::TruncatedHeader {
        wanted: e.wanted,
        available: e.available,
    };
    let record_count = r.read_u32().map_err(header)? as usize;
    let dim = r.read_u32().map_err(header)? as usize;
    let name_len = r.read_u16().map_err(header)? as usize;
    let name_bytes = r.take(name_len).map_err(header)?;
    let source_name =
        std::str::from_utf8(name_bytes).map_err(|_| StoreError::BadUtf8 { index: 0 })?;

    let mut store = EmbeddingStore::new(source_name, dim);
    for index in 0..record_count {
        let rec = |e: crate::bytesio::ShortRead| StoreError::TruncatedRecord {
            index,
            wanted: e.wanted,
            available: e.available,
        };
        let id_len = r.read_u16().map_err(rec)? as usize;
        let id_bytes = r.take(id_len).map_err(rec)?;
        let id = std::str::from_utf8(id_bytes)
            .map_err(|_| StoreError::BadUtf8 { index })?
            .to_string();
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            values.push(r.read_f32().map_err(rec)?);
        }
        store.insert(Embedding { id, values })?;
    }
    if r.remaining() > 0 {
        return Err(StoreError::TrailingBytes {
            index: record_count.saturating_sub(1),
            extra: r.remaining(),
        });
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store_with(entries: &[(&str, &[f32])], dim: usize) -> EmbeddingStore {
        let mut s = EmbeddingStore::new("test", dim);
        for (id, values) in entries {
            s.insert(Embedding {
                id: id.to_string(),
                values: values.to_vec(),
            })
            .unwrap();
        }
        s
    }

    #[test]
    fn empty_store_round_trips_with_declared_dim() {
        let s = EmbeddingStore::new("empty", 4);
        let loaded = read_store(&write_store(&s).unwrap()).unwrap();
        assert_eq!(loaded.dim(), 4);
        assert_eq!(loaded.len(), 0);
        assert_eq!(loaded.source_name(), "empty");
    }

    #[test]
    fn single_record_loads_back() {
        let s = store_with(&[("u1", &[1.0, 2.0])], 2);
        let loaded = read_store(&write_store(&s).unwrap()).unwrap();
        assert_eq!(loaded.get("u1").unwrap().values, vec![1.0, 2.0]);
    }

    #[test]
    fn insert_rejects_dim_mismatch_naming_record() {
        let mut s = store_with(&[("u0", &[0.0, 0.0])], 2);
        let err = s
            .insert(Embedding {
                id: "u1".into(),
                values: vec![1.0, 2.0, 3.0],
            })
            .unwrap_err();
        assert_eq!(
            err,
            StoreError::DimMismatch {
                index: 1,
                id: "u1".into(),
                expected: 2,
                got: 3
            }
        );
    }

    #[test]
    fn oversized_record_detected_as_trailing_bytes_naming_record() {
        // Container declares dim 2 but the second record carries 3 floats:
        // the reader consumes the declared framing and flags the leftovers.
        let mut w = ByteWriter::new();
        w.put(b"EMB1");
        w.put_u32(2);
        w.put_u32(2);
        w.put_u16(1);
        w.put(b"s");
        w.put_u16(2);
        w.put(b"u0");
        w.put_f32(1.0);
        w.put_f32(2.0);
        w.put_u16(2);
        w.put(b"u1");
        w.put_f32(3.0);
        w.put_f32(4.0);
        w.put_f32(5.0);
        let err = read_store(&w.into_bytes()).unwrap_err();
        assert_eq!(err, StoreError::TrailingBytes { index: 1, extra: 4 });
    }

    #[test]
    fn truncated_record_names_index() {
        let s = store_with(&[("u0", &[0.5, 0.25]), ("u1", &[1.0, -1.0])], 2);
        let bytes = write_store(&s).unwrap();
        let err = read_store(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, StoreError::TruncatedRecord { index: 1, .. }));
    }

    #[test]
    fn bad_magic_rejected() {
        let err = read_store(b"NOPE\x00\x00\x00\x00").unwrap_err();
        assert_eq!(err, StoreError::BadMagic);
    }

    #[test]
    fn non_finite_rejected_at_load_with_record_index() {
        let mut w = ByteWriter::new();
        w.put(b"EMB1");
        w.put_u32(1);
        w.put_u32(1);
        w.put_u16(1);
        w.put(b"s");
        w.put_u16(2);
        w.put(b"u0");
        w.put_f32(f32::NAN);
        let err = read_store(&w.into_bytes()).unwrap_err();
        assert!(matches!(err, StoreError::NonFinite { index: 0, component: 0, .. }));
    }

    #[test]
    fn get_missing_names_id_and_source() {
        let s = store_with(&[("u1", &[0.0])], 1);
        let err = s.get("absent").unwrap_err();
        assert_eq!(
            err.to_string(),
            "id 'absent' not found in store 'test'"
        );
    }

    #[test]
    fn get_is_stable_across_calls() {
        let s = store_with(&[("u1", &[0.25, -0.5])], 2);
        let a: Vec<u32> = s.get("u1").unwrap().values.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = s.get("u1").unwrap().values.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_vector_round_trips_exactly() {
        let s = store_with(&[("z", &[0.0, -0.0, 0.0])], 3);
        let loaded = read_store(&write_store(&s).unwrap()).unwrap();
        let v = &loaded.get("z").unwrap().values;
        assert_eq!(v[0].to_bits(), 0.0f32.to_bits());
        assert_eq!(v[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn record_order_changes_blob_not_logical_content() {
        let a = store_with(&[("u0", &[1.0]), ("u1", &[2.0])], 1);
        let b = store_with(&[("u1", &[2.0]), ("u0", &[1.0])], 1);
        let blob_a = write_store(&a).unwrap();
        let blob_b = write_store(&b).unwrap();
        assert_ne!(blob_a, blob_b);
        let ra = read_store(&blob_a).unwrap();
        let rb = read_store(&blob_b).unwrap();
        assert!(ra.logical_eq(&rb));
    }

    proptest! {
        // Bit-exact round trip on arbitrary finite f32 payloads.
        #[test]
        fn round_trip_is_bit_exact(
            dim in 1usize..6,
            ids in proptest::collection::hash_set("[a-z0-9]{1,8}", 0..12),
            seed in any::<u32>(),
        ) {
            let mut s = EmbeddingStore::new("prop", dim);
            let mut state = seed;
            for id in ids {
                let values: Vec<f32> = (0..dim)
                    .map(|_| {
                        // xorshift over the u32 space, masked to finite values
                        state ^= state << 13;
                        state ^= state >> 17;
                        state ^= state << 5;
                        let f = f32::from_bits(state);
                        if f.is_finite() { f } else { (state % 1024) as f32 }
                    })
                    .collect();
                s.insert(Embedding { id, values }).unwrap();
            }
            let loaded = read_store(&write_store(&s).unwrap()).unwrap();
            prop_assert!(loaded.logical_eq(&s));
            // order preserved too
            let before: Vec<&str> = s.iter().map(|e| e.id.as_str()).collect();
            let after: Vec<&str> = loaded.iter().map(|e| e.id.as_str()).collect();
            prop_assert_eq!(before, after);
        }
    }
}
