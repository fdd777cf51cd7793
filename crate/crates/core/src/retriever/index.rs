//! Exact top-k premise index.
//!
//! Rows live in immutable, reference-counted segments. Cloning an index is
//! cheap and inserting appends a small segment, so a writer can build the
//! next version while readers keep searching the previous one.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{score, Retriever, SimilarityMode};
use crate::corpus::{Corpus, Premise, PremiseId};
use crate::{Error, Exec, Result};

pub const INDEX_MAGIC: &[u8; 8] = b"PREMIDX\0";
const SEARCH_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    ids: Vec<PremiseId>,
    rows: Vec<f32>,
}

impl Segment {
    pub fn ids(&self) -> &[PremiseId] {
        &self.ids
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexHeader {
    pub format_version: u32,
    pub dim: usize,
    pub count: usize,
    pub mode: SimilarityMode,
    pub encoder_fingerprint: String,
    #[serde(default)]
    pub run_config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct IdMap {
    format_version: u32,
    ids: Vec<PremiseId>,
    #[serde(default)]
    run_config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PremiseIndex {
    dim: usize,
    mode: SimilarityMode,
    fingerprint: String,
    segments: Vec<Arc<Segment>>,
    len: usize,
    pub run_config: serde_json::Value,
}

/// Descending score, then ascending id.
fn rank_order(a: &(PremiseId, f32), b: &(PremiseId, f32)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

fn top_k(mut hits: Vec<(PremiseId, f32)>, k: usize) -> Vec<(PremiseId, f32)> {
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, rank_order);
        hits.truncate(k);
    }
    hits.sort_unstable_by(rank_order);
    hits
}

impl PremiseIndex {
    pub fn new(dim: usize, mode: SimilarityMode, fingerprint: impl Into<String>) -> Self {
        PremiseIndex {
            dim,
            mode,
            fingerprint: fingerprint.into(),
            segments: Vec::new(),
            len: 0,
            run_config: serde_json::Value::Null,
        }
    }

    /// Builds an index from explicit rows.
    pub fn from_rows(dim: usize, mode: SimilarityMode, fingerprint: impl Into<String>, ids: Vec<PremiseId>, rows: Vec<f32>) -> Result<Self> {
        let mut idx = Self::new(dim, mode, fingerprint);
        idx.append(ids, rows)?;
        Ok(idx)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> SimilarityMode {
        self.mode
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segments(&self) -> &[Arc<Segment>] {
        &self.segments
    }

    /// Ids in row order.
    pub fn ids(&self) -> impl Iterator<Item = PremiseId> + '_ {
        self.segments.iter().flat_map(|s| s.ids.iter().copied())
    }

    /// `(id, row)` pairs in row order.
    pub fn rows(&self) -> impl Iterator<Item = (PremiseId, &[f32])> + '_ {
        let dim = self.dim;
        self.segments
            .iter()
            .flat_map(move |s| s.ids.iter().copied().zip(s.rows.chunks_exact(dim.max(1))))
    }

    pub fn row(&self, id: PremiseId) -> Option<&[f32]> {
        self.rows().find(|(i, _)| *i == id).map(|(_, r)| r)
    }

    /// Appends rows as a new segment.
    pub fn append(&mut self, ids: Vec<PremiseId>, rows: Vec<f32>) -> Result<()> {
        if rows.len() != ids.len() * self.dim {
            return Err(Error::InvalidArgument(format!(
                "{} values do not form {} rows of dimension {}",
                rows.len(),
                ids.len(),
                self.dim
            )));
        }
        if rows.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("index rows must be finite".into()));
        }
        if ids.is_empty() {
            return Ok(());
        }
        self.len += ids.len();
        self.segments.push(Arc::new(Segment { ids, rows }));
        Ok(())
    }

    /// Merges all segments into one.
    pub fn compact(&mut self) {
        if self.segments.len() <= 1 {
            return;
        }
        let mut ids = Vec::with_capacity(self.len);
        let mut rows = Vec::with_capacity(self.len * self.dim);
        for s in &self.segments {
            ids.extend_from_slice(&s.ids);
            rows.extend_from_slice(&s.rows);
        }
        self.segments = vec![Arc::new(Segment { ids, rows })];
    }

    /// Exact top-`k` by dot product, ties broken by ascending id. Returns
    /// `min(k, len)` hits.
    pub fn search(&self, query: &[f32], k: usize, exec: Exec) -> Result<Vec<(PremiseId, f32)>> {
        if query.len() != self.dim {
            return Err(Error::InvalidArgument(format!("query has dimension {}, index has {}", query.len(), self.dim)));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let mut partial = Vec::new();
        for seg in &self.segments {
            let n = seg.ids.len();
            let dim = self.dim;
            let chunks = exec.map_chunks(n, SEARCH_CHUNK, |range| {
                let hits = range
                    .map(|i| (seg.ids[i], score(query, &seg.rows[i * dim..(i + 1) * dim])))
                    .collect();
                top_k(hits, k)
            });
            partial.extend(chunks.into_iter().flatten());
        }
        Ok(top_k(partial, k))
    }

    fn sidecar(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".ids.json");
        PathBuf::from(s)
    }

    /// Writes `path` (magic, header length, JSON header, `f32` rows) and the
    /// id-map sidecar `path.ids.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = IndexHeader {
            format_version: crate::artifact::FORMAT_VERSION,
            dim: self.dim,
            count: self.len,
            mode: self.mode,
            encoder_fingerprint: self.fingerprint.clone(),
            run_config: self.run_config.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.len * self.dim);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for s in &self.segments {
            for x in &s.rows {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))?;
        let ids = IdMap {
            format_version: crate::artifact::FORMAT_VERSION,
            ids: self.ids().collect(),
            run_config: self.run_config.clone(),
        };
        crate::artifact::write_json(Self::sidecar(path), &ids)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..8] != INDEX_MAGIC {
            return Err(Error::Format(format!("{} is not an index file", path.display())));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(Error::Format("truncated index header".into()));
        }
        let header: IndexHeader = serde_json::from_slice(&body[..hlen])?;
        let payload = &body[hlen..];
        if payload.len() != 4 * header.count * header.dim {
            return Err(Error::Format(format!(
                "index payload has {} bytes, header promises {} rows of dimension {}",
                payload.len(),
                header.count,
                header.dim
            )));
        }
        let ids: IdMap = crate::artifact::read_json(Self::sidecar(path))?;
        if ids.ids.len() != header.count {
            return Err(Error::Format("id map length differs from index row count".into()));
        }
        let rows = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let mut idx = Self::from_rows(header.dim, header.mode, header.encoder_fingerprint, ids.ids, rows)?;
        idx.run_config = header.run_config;
        Ok(idx)
    }
}

/// Embeds every premise of `corpus` with `retriever`.
pub fn build_index(corpus: &Corpus, retriever: &Retriever, exec: Exec) -> Result<PremiseIndex> {
    let vectors = retriever.embed_premises(corpus.premises(), exec)?;
    let ids = corpus.iter().map(|p| p.id).collect();
    let rows = vectors.into_iter().flatten().collect();
    PremiseIndex::from_rows(retriever.dim(), retriever.mode, retriever.fingerprint(), ids, rows)
}

/// Adds `premise` to `corpus` and `index`. Fails without side effects on a
/// duplicate name, an embedding error, or a retriever/index mismatch.
pub fn insert_premise(corpus: &mut Corpus, index: &mut PremiseIndex, retriever: &Retriever, premise: Premise) -> Result<PremiseId> {
    if corpus.id_of(&premise.name).is_some() {
        return Err(Error::DuplicatePremise(premise.name));
    }
    if retriever.dim() != index.dim() || retriever.mode != index.mode() {
        return Err(Error::InvalidArgument("retriever does not match the index dimension or mode".into()));
    }
    let row = retriever.embed_premise(&premise)?;
    let id = corpus.push(premise)?;
    index.append(vec![id], row)?;
    Ok(id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx() -> PremiseIndex {
        PremiseIndex::from_rows(2, SimilarityMode::Conventional, "fp", vec![0, 1, 2], vec![0.9, 0.0, 0.1, 0.0, 0.5, 0.0]).unwrap()
    }

    #[test]
    fn top_one() {
        let hits = idx().search(&[1.0, 0.0], 1, Exec::Sequential).unwrap();
        assert_eq!(hits, vec![(0, 0.9)]);
    }

    #[test]
    fn ties_prefer_lower_id() {
        let i = PremiseIndex::from_rows(1, SimilarityMode::Conventional, "fp", vec![5, 2, 9], vec![0.5, 0.5, 0.5]).unwrap();
        let ids: Vec<_> = i.search(&[1.0], 3, Exec::Sequential).unwrap().into_iter().map(|h| h.0).collect();
        assert_eq!(ids, vec![2, 5, 9]);
    }

    #[test]
    fn empty_and_oversized_k() {
        let e = PremiseIndex::new(3, SimilarityMode::FineGrained, "fp");
        assert!(e.search(&[1.0, 0.0, 0.0], 4, Exec::Sequential).unwrap().is_empty());
        assert_eq!(idx().search(&[1.0, 0.0], 10, Exec::Sequential).unwrap().len(), 3);
        assert!(idx().search(&[1.0], 1, Exec::Sequential).is_err());
        assert!(idx().search(&[1.0, 0.0], 0, Exec::Sequential).is_err());
    }

    #[test]
    fn segments_search_like_one_matrix() {
        let mut a = idx();
        a.append(vec![7], vec![0.7, 0.1]).unwrap();
        let mut b = a.clone();
        b.compact();
        assert_eq!(a.segments().len(), 2);
        assert_eq!(b.segments().len(), 1);
        let q = [1.0, 1.0];
        assert_eq!(a.search(&q, 4, Exec::Sequential).unwrap(), b.search(&q, 4, Exec::Sequential).unwrap());
        assert_eq!(a.row(7), Some(&[0.7f32, 0.1][..]));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("premises.idx");
        let mut i = idx();
        i.append(vec![3], vec![0.25, -0.5]).unwrap();
        i.run_config = serde_json::json!({"k": 1});
        i.save(&p).unwrap();
        let back = PremiseIndex::load(&p).unwrap();
        assert_eq!(back.rows().collect::<Vec<_>>(), i.rows().collect::<Vec<_>>());
        assert_eq!(back.fingerprint(), "fp");
        assert_eq!(back.run_config, i.run_config);
        std::fs::write(&p, b"garbage").unwrap();
        assert!(PremiseIndex::load(&p).is_err());
    }
}
