//! Embedding index, exact cosine-distance search, and retrieval metrics.
//!
//! The index is a flat list of unit-normalized vectors searched exhaustively;
//! at the gallery sizes this crate targets, exactness matters more than
//! speed, and every ranking stays oracle-checkable. Because both the stored
//! vectors and (normalized) queries are unit length, squared Euclidean
//! distance equals twice the cosine distance, so rankings agree with the
//! distances the triplet loss was trained on.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EmbeddingVector;

const INDEX_MAGIC: [u8; 4] = *b"DRTI";
const INDEX_VERSION: u32 = 1;

/// Distance used by [`query_topk_with`]; cosine is the default everywhere.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

/// `1 - (A·B) / (|A| |B|)`, defined for non-zero vectors of equal dimension.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine distance needs equal dimensions, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let norm_a = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm_b = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_a <= 1e-12 || norm_b <= 1e-12 {
        return Err(Error::Numeric(format!(
            "cosine distance is undefined for (near-)zero vectors: norms {norm_a}, {norm_b}"
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot / (norm_a * norm_b)).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    /// Unit-normalized embedding.
    pub vector: Vec<f64>,
}

/// An ordered, immutable collection of unit vectors with unique string ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
}

impl EmbeddingIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    /// Writes the index: magic `DRTI`, version (u32 LE), dim (u32 LE), count
    /// (u64 LE), then per entry an id length (u16 LE), the UTF-8 id, and the
    /// vector as 32-bit little-endian floats.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = BufWriter::new(File::create(path)?);
        file.write_all(&INDEX_MAGIC)?;
        file.write_all(&INDEX_VERSION.to_le_bytes())?;
        file.write_all(&(self.dim as u32).to_le_bytes())?;
        file.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for entry in &self.entries {
            let id = entry.id.as_bytes();
            if id.len() > u16::MAX as usize {
                return Err(Error::Config(format!(
                    "id {:?}... is too long to serialize ({} bytes, max {})",
                    &entry.id[..32.min(entry.id.len())],
                    id.len(),
                    u16::MAX
                )));
            }
            file.write_all(&(id.len() as u16).to_le_bytes())?;
            file.write_all(id)?;
            for &v in &entry.vector {
                file.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = BufReader::new(File::open(path)?);
        let mut offset = 0u64;
        let magic = read_exact_at(&mut file, 4, &mut offset, "index magic")?;
        if magic != INDEX_MAGIC {
            return Err(Error::parse(format!("bad index magic {magic:?}"), 0));
        }
        let version_at = offset;
        let version = read_u32(&mut file, &mut offset, "index version")?;
        if version != INDEX_VERSION {
            return Err(Error::parse(
                format!("unsupported index version {version}"),
                version_at,
            ));
        }
        let dim = read_u32(&mut file, &mut offset, "embedding dimension")? as usize;
        let count_at = offset;
        let count = read_u64(&mut file, &mut offset, "entry count")?;
        let count = usize::try_from(count)
            .map_err(|_| Error::parse(format!("entry count {count} overflows"), count_at))?;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        let mut seen = BTreeSet::new();
        for i in 0..count {
            let id_len =
                u16::from_le_bytes(read_array(&mut file, &mut offset, "id length")?) as usize;
            let id_at = offset;
            let id_bytes = read_exact_at(&mut file, id_len, &mut offset, "id bytes")?;
            let id = String::from_utf8(id_bytes)
                .map_err(|_| Error::parse(format!("entry {i} id is not UTF-8"), id_at))?;
            if !seen.insert(id.clone()) {
                return Err(Error::parse(format!("duplicate id {id:?}"), id_at));
            }
            let mut vector = Vec::with_capacity(dim);
            for _ in 0..dim {
                let raw: [u8; 4] = read_array(&mut file, &mut offset, "vector value")?;
                vector.push(f32::from_le_bytes(raw) as f64);
            }
            let norm: f64 = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::parse(
                    format!("entry {id:?} has norm {norm}, expected unit length"),
                    id_at,
                ));
            }
            entries.push(IndexEntry { id, vector });
        }
        let mut probe = [0u8; 1];
        if file.read(&mut probe)? != 0 {
            return Err(Error::parse("trailing bytes after final entry", offset));
        }
        Ok(EmbeddingIndex { dim, entries })
    }
}

fn read_exact_at(
    reader: &mut impl Read,
    len: usize,
    offset: &mut u64,
    what: &str,
) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    reader
        .read_exact(&mut buf)
        .map_err(|_| Error::parse(format!("truncated while reading {what}"), *offset))?;
    *offset += len as u64;
    Ok(buf)
}

fn read_array<const N: usize>(
    reader: &mut impl Read,
    offset: &mut u64,
    what: &str,
) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    reader
        .read_exact(&mut buf)
        .map_err(|_| Error::parse(format!("truncated while reading {what}"), *offset))?;
    *offset += N as u64;
    Ok(buf)
}

fn read_u32(reader: &mut impl Read, offset: &mut u64, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(reader, offset, what)?))
}

fn read_u64(reader: &mut impl Read, offset: &mut u64, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(reader, offset, what)?))
}

/// Normalizes and collects embeddings into an index, preserving input order.
pub fn build_index(embeddings: &[EmbeddingVector]) -> Result<EmbeddingIndex> {
    let dim = embeddings.first().map_or(0, |e| e.values.len());
    let mut seen = BTreeSet::new();
    let mut entries = Vec::with_capacity(embeddings.len());
    for e in embeddings {
        if e.values.len() != dim {
            return Err(Error::Shape(format!(
                "embedding {:?} has dimension {}, index uses {dim}",
                e.id,
                e.values.len()
            )));
        }
        if !seen.insert(e.id.clone()) {
            return Err(Error::Config(format!("duplicate embedding id {:?}", e.id)));
        }
        let norm: f64 = e.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if e.zero_norm || norm <= 1e-12 {
            return Err(Error::Numeric(format!(
                "embedding {:?} has (near-)zero norm and cannot be indexed",
                e.id
            )));
        }
        entries.push(IndexEntry {
            id: e.id.clone(),
            vector: e.values.iter().map(|v| v / norm).collect(),
        });
    }
    Ok(EmbeddingIndex { dim, entries })
}

/// A ranked retrieval result, ascending by distance, ties broken by id.
#[derive(Debug, Clone, Serialize)]
pub struct QueryResult {
    pub hits: Vec<(String, f64)>,
    /// Set when fewer than the requested k entries exist; the full ranking is
    /// returned in that case.
    pub fewer_than_requested: bool,
}

/// Exact top-k by cosine distance.
pub fn query_topk(index: &EmbeddingIndex, query: &[f64], k: usize) -> Result<QueryResult> {
    query_topk_with(index, query, k, Metric::Cosine)
}

/// Exact top-k under the chosen metric. For unit-length queries the two
/// metrics produce identical rankings.
pub fn query_topk_with(
    index: &EmbeddingIndex,
    query: &[f64],
    k: usize,
    metric: Metric,
) -> Result<QueryResult> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if query.len() != index.dim {
        return Err(Error::Shape(format!(
            "query has dimension {}, index uses {}",
            query.len(),
            index.dim
        )));
    }
    let norm: f64 = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 1e-12 {
        return Err(Error::Numeric(
            "cannot query with a (near-)zero vector".into(),
        ));
    }
    let mut hits: Vec<(String, f64)> = index
        .entries
        .iter()
        .map(|entry| {
            let distance = match metric {
                Metric::Cosine => {
                    let dot: f64 = entry.vector.iter().zip(query).map(|(v, q)| v * q).sum();
                    (1.0 - dot / norm).clamp(0.0, 2.0)
                }
                Metric::Euclidean => entry
                    .vector
                    .iter()
                    .zip(query)
                    .map(|(v, q)| (v - q) * (v - q))
                    .sum::<f64>()
                    .sqrt(),
            };
            (entry.id.clone(), distance)
        })
        .collect();
    hits.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    let fewer = k > hits.len();
    hits.truncate(k);
    Ok(QueryResult {
        hits,
        fewer_than_requested: fewer,
    })
}

/// Mean precision at K plus a counter of queries that could not supply K
/// results (their precision is computed over what was available).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PrecisionAtK {
    pub value: f64,
    pub short_queries: usize,
}

/// `mean over queries of |relevant ∩ top-K| / K`.
pub fn mp_at_k(
    rankings: &[Vec<String>],
    relevant: &[BTreeSet<String>],
    k: usize,
) -> Result<PrecisionAtK> {
    if rankings.is_empty() {
        return Err(Error::Config(
            "mean precision needs at least one query".into(),
        ));
    }
    if rankings.len() != relevant.len() {
        return Err(Error::Shape(format!(
            "{} rankings but {} relevance sets",
            rankings.len(),
            relevant.len()
        )));
    }
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let mut sum = 0.0;
    let mut short_queries = 0;
    for (ranking, rel) in rankings.iter().zip(relevant) {
        let available = ranking.len().min(k);
        if available < k {
            short_queries += 1;
        }
        if available == 0 {
            continue; // counts as precision 0
        }
        let found = ranking[..available]
            .iter()
            .filter(|id| rel.contains(*id))
            .count();
        sum += found as f64 / available as f64;
    }
    Ok(PrecisionAtK {
        value: sum / rankings.len() as f64,
        short_queries,
    })
}

/// Mean over queries of how many of the query's own 4-image group appear in
/// its top 4 results (the query itself counts), a number in [0, 4].
pub fn recall_at_4(rankings: &[Vec<String>], groups: &[BTreeSet<String>]) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::Config("recall@4 needs at least one query".into()));
    }
    if rankings.len() != groups.len() {
        return Err(Error::Shape(format!(
            "{} rankings but {} groups",
            rankings.len(),
            groups.len()
        )));
    }
    let mut sum = 0.0;
    for (ranking, group) in rankings.iter().zip(groups) {
        if group.len() != 4 {
            return Err(Error::Config(format!(
                "recall@4 group must have exactly 4 members, got {}",
                group.len()
            )));
        }
        let take = ranking.len().min(4);
        sum += ranking[..take]
            .iter()
            .filter(|id| group.contains(*id))
            .count() as f64;
    }
    Ok(sum / rankings.len() as f64)
}

/// Retrieval accuracy divided by the trainable parameter count: a measure of
/// how much accuracy each parameter buys.
pub fn accuracy_density(accuracy: f64, param_count: usize) -> Result<f64> {
    if param_count == 0 {
        return Err(Error::Config(
            "accuracy density needs a positive parameter count".into(),
        ));
    }
    if !accuracy.is_finite() {
        return Err(Error::Numeric(format!(
            "accuracy must be finite, got {accuracy}"
        )));
    }
    Ok(accuracy / param_count as f64)
}

/// One row of the published accuracy-density context table: the figures as
/// reported alongside what the stated formula gives for the public parameter
/// counts. The two disagree for the baselines, which is why recomputed
/// values are shown but never asserted against the published ones.
#[derive(Debug, Clone, Serialize)]
pub struct ReferenceDensity {
    pub method: &'static str,
    pub accuracy_medium: f64,
    pub accuracy_hard: f64,
    pub param_count: Option<f64>,
    pub published_medium: f64,
    pub published_hard: f64,
    pub recomputed_medium: Option<f64>,
    pub recomputed_hard: Option<f64>,
}

/// Published full-scale baselines, for context in reports. The dilated
/// triplet model's full parameter count was never published, so its density
/// is not recomputed.
pub fn reference_densities() -> Vec<ReferenceDensity> {
    let rows = [
        (
            "resnet101-gem",
            98.1,
            89.1,
            Some(44.5e6),
            2.308e-6,
            2.096e-6,
        ),
        (
            "resnet101-rmac",
            96.9,
            86.1,
            Some(44.5e6),
            2.075e-6,
            1.843e-6,
        ),
        (
            "dilated-residual-triplet",
            94.54,
            80.23,
            None,
            3.412e-6,
            2.895e-6,
        ),
    ];
    rows.into_iter()
        .map(
            |(method, medium, hard, params, pub_m, pub_h)| ReferenceDensity {
                method,
                accuracy_medium: medium,
                accuracy_hard: hard,
                param_count: params,
                published_medium: pub_m,
                published_hard: pub_h,
                recomputed_medium: params.map(|p| medium / p),
                recomputed_hard: params.map(|p| hard / p),
            },
        )
        .collect()
}

/// Wall-clock figures; reported for context, never asserted.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct TimingInfo {
    pub embed_seconds: f64,
    pub search_seconds: f64,
}

/// Per-query precision rows for the report.
#[derive(Debug, Clone, Serialize)]
pub struct QueryPrecisionRow {
    pub id: String,
    pub p_at_1: f64,
    pub p_at_5: f64,
    pub p_at_10: f64,
}

/// Full evaluation output, serializable as JSON and renderable as text.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub mp_at_1: f64,
    pub mp_at_5: f64,
    pub mp_at_10: f64,
    /// Present only for groups-of-4 datasets.
    pub recall_at_4: Option<f64>,
    pub param_count: usize,
    /// mp@10 / param_count, mirroring how the published table is built.
    pub accuracy_density: f64,
    pub short_queries: usize,
    pub per_query: Vec<QueryPrecisionRow>,
    pub reference_densities: Vec<ReferenceDensity>,
    pub config_echo: serde_json::Value,
    pub timing: TimingInfo,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("retrieval evaluation\n");
        out.push_str("====================\n");
        out.push_str(&format!("queries:          {}\n", self.per_query.len()));
        out.push_str(&format!("mP@1:             {:.4}\n", self.mp_at_1));
        out.push_str(&format!("mP@5:             {:.4}\n", self.mp_at_5));
        out.push_str(&format!("mP@10:            {:.4}\n", self.mp_at_10));
        if let Some(r) = self.recall_at_4 {
            out.push_str(&format!("recall@4:         {r:.4}\n"));
        }
        out.push_str(&format!("parameters:       {}\n", self.param_count));
        out.push_str(&format!(
            "accuracy density: {:.4e}\n",
            self.accuracy_density
        ));
        if self.short_queries > 0 {
            out.push_str(&format!(
                "warning: {} queries had fewer results than requested\n",
                self.short_queries
            ));
        }
        out.push_str(&format!(
            "timing: embed {:.2}s, search {:.2}s (informational)\n",
            self.timing.embed_seconds, self.timing.search_seconds
        ));
        out.push_str("\npublished baselines (density = accuracy / params):\n");
        out.push_str("method                    published(m/h)        recomputed(m/h)\n");
        for row in &self.reference_densities {
            let recomputed = match (row.recomputed_medium, row.recomputed_hard) {
                (Some(m), Some(h)) => format!("{m:.3e} / {h:.3e}"),
                _ => "n/a (params unpublished)".to_string(),
            };
            out.push_str(&format!(
                "{:<25} {:.3e} / {:.3e}   {}\n",
                row.method, row.published_medium, row.published_hard, recomputed
            ));
        }
        out
    }
}
