use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EmbedError, Modality};
use crate::provenance::Provenance;

const MAGIC: &[u8; 4] = b"MEMB";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8;

/// Unit-norm tolerance for rows of a normalised store.
pub const NORM_TOLERANCE: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub encoder: String,
    pub dimension: usize,
    pub modality: Modality,
}

/// Row-major `f32` matrix with one row per id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub ids: Vec<String>,
    data: Vec<f32>,
    pub normalized: bool,
    pub meta: StoreMeta,
    /// Ids whose text was cut to the encoder's length limit.
    pub truncated: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    ids: Vec<String>,
    encoder: String,
    dimension: usize,
    modality: Modality,
    normalized: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    truncated: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

impl EmbeddingStore {
    pub fn from_rows<R: AsRef<[f32]>>(ids: Vec<String>, rows: &[R], meta: StoreMeta) -> Result<Self, EmbedError> {
        if ids.len() != rows.len() {
            return Err(EmbedError::RowCount { ids: ids.len(), rows: rows.len() });
        }
        let mut data = Vec::with_capacity(rows.len() * meta.dimension);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != meta.dimension {
                return Err(EmbedError::RowWidth { row: i, expected: meta.dimension, found: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { ids, data, normalized: false, meta, truncated: Vec::new() })
    }

    pub fn from_flat(ids: Vec<String>, data: Vec<f32>, meta: StoreMeta) -> Result<Self, EmbedError> {
        if data.len() != ids.len() * meta.dimension {
            return Err(EmbedError::RowCount { ids: ids.len(), rows: data.len() / meta.dimension.max(1) });
        }
        Ok(Self { ids, data, normalized: false, meta, truncated: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.meta.dimension
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim().max(1))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// True when every row has unit norm within [`NORM_TOLERANCE`].
    pub fn rows_are_unit(&self) -> bool {
        self.rows().all(|r| (r.iter().map(|x| x * x).sum::<f32>().sqrt() - 1.0).abs() <= NORM_TOLERANCE)
    }
}

/// Divides each row by its Euclidean norm.
pub fn normalize_rows(store: &EmbeddingStore) -> Result<EmbeddingStore, EmbedError> {
    let mut out = store.clone();
    let d = store.dim();
    for (i, row) in out.data.chunks_exact_mut(d.max(1)).enumerate() {
        let norm = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbedError::ZeroNorm { id: store.ids[i].clone() });
        }
        row.iter_mut().for_each(|x| *x = (f64::from(*x) / norm) as f32);
    }
    out.normalized = true;
    Ok(out)
}

/// `x.emb` → `x.emb.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> EmbedError + '_ {
    move |source| EmbedError::Io { path: path.display().to_string(), source }
}

pub fn save_store(store: &EmbeddingStore, path: &Path, provenance: Option<&Provenance>) -> Result<(), EmbedError> {
    let mut bytes = Vec::with_capacity(HEADER_LEN + store.data.len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(store.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&(store.dim() as u64).to_le_bytes());
    for v in &store.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))?;
    let sidecar = Sidecar {
        ids: store.ids.clone(),
        encoder: store.meta.encoder.clone(),
        dimension: store.dim(),
        modality: store.meta.modality,
        normalized: store.normalized,
        truncated: store.truncated.clone(),
        provenance: provenance.cloned(),
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).expect("serializable sidecar");
    fs::write(&side, json).map_err(io_err(&side))
}

pub fn load_store(path: &Path) -> Result<EmbeddingStore, EmbedError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let corrupt = || EmbedError::CorruptHeader(path.display().to_string());
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(corrupt());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(4) != VERSION {
        return Err(corrupt());
    }
    let (rows, cols) = (u64_at(8) as usize, u64_at(16) as usize);
    let payload = &bytes[HEADER_LEN..];
    if rows.checked_mul(cols).and_then(|n| n.checked_mul(4)) != Some(payload.len()) {
        return Err(corrupt());
    }

    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let sc: Sidecar = serde_json::from_str(&text)
        .map_err(|e| EmbedError::Sidecar { path: side.display().to_string(), message: e.to_string() })?;
    let mismatch = |what: &str, a: usize, b: usize| EmbedError::Mismatch {
        path: path.display().to_string(),
        sidecar: format!("{what} {a}"),
        payload: format!("{what} {b}"),
    };
    if sc.dimension != cols {
        return Err(mismatch("dimension", sc.dimension, cols));
    }
    if sc.ids.len() != rows {
        return Err(mismatch("rows", sc.ids.len(), rows));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(EmbeddingStore {
        ids: sc.ids,
        data,
        normalized: sc.normalized,
        meta: StoreMeta { encoder: sc.encoder, dimension: cols, modality: sc.modality },
        truncated: sc.truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn meta(dim: usize) -> StoreMeta {
        StoreMeta { encoder: "test".into(), dimension: dim, modality: Modality::Text }
    }

    fn store(rows: &[Vec<f32>]) -> EmbeddingStore {
        let ids = (0..rows.len()).map(|i| format!("r{i}")).collect();
        EmbeddingStore::from_rows(ids, rows, meta(rows[0].len())).unwrap()
    }

    #[test]
    fn three_four_five() {
        let n = normalize_rows(&store(&[vec![3.0, 4.0]])).unwrap();
        assert_eq!(n.row(0), &[0.6, 0.8]);
        assert!(n.normalized);
    }

    #[test]
    fn zero_row_names_its_id() {
        let err = normalize_rows(&store(&[vec![1.0, 0.0], vec![0.0, 0.0]])).unwrap_err();
        assert!(matches!(err, EmbedError::ZeroNorm { id } if id == "r1"));
    }

    #[test]
    fn random_store_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f32>> = (0..5).map(|_| (0..8).map(|_| rng.random::<f32>() - 0.5).collect()).collect();
        let s = store(&rows);
        let path = dir.path().join("x.emb");
        save_store(&s, &path, None).unwrap();
        assert!(dir.path().join("x.emb.json").exists());
        let back = load_store(&path).unwrap();
        let bits = |s: &EmbeddingStore| s.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&s));
        assert_eq!(back, s);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.emb");
        save_store(&store(&vec![vec![1.0; 8]; 5]), &path, None).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_store(&path), Err(EmbedError::CorruptHeader(_))));
        fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(load_store(&path), Err(EmbedError::CorruptHeader(_))));
    }

    #[test]
    fn sidecar_dimension_must_match_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.emb");
        save_store(&store(&vec![vec![0.5; 7]; 3]), &path, None).unwrap();
        let side = sidecar_path(&path);
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&side).unwrap()).unwrap();
        v["dimension"] = 8.into();
        fs::write(&side, v.to_string()).unwrap();
        assert!(matches!(load_store(&path), Err(EmbedError::Mismatch { .. })));
    }

    proptest! {
        #[test]
        fn normalisation_is_idempotent(rows in proptest::collection::vec(
            proptest::collection::vec(-100f32..100f32, 6), 1..8)
        ) {
            prop_assume!(rows.iter().all(|r| r.iter().any(|x| x.abs() > 1e-3)));
            let once = normalize_rows(&store(&rows)).unwrap();
            prop_assert!(once.rows_are_unit());
            let twice = normalize_rows(&once).unwrap();
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-7);
            }
        }
    }
}
