//! Frozen text-to-embedding encoders producing `[N, L, C]` condition tensors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::corpus::PromptBatch;
use crate::error::{config_err, domain, Error, Result};
use crate::seed;

/// Null token used for padding; never produced by text.
pub const NULL_TOKEN: u32 = 0;

/// Default window for [`chunk_long_sequence`].
pub const DEFAULT_CHUNK_WINDOW: usize = 512;

/// A frozen encoder. Implementations must be deterministic and must not
/// mutate any parameters after construction.
pub trait ConditionEncoder: Send + Sync {
    fn id(&self) -> &str;

    /// Embedding width `C`.
    fn dim(&self) -> usize;

    /// Native window; per-item length `L` is always a multiple of it.
    fn window(&self) -> usize;

    /// Encodes one item into an `[L, C]` block.
    fn encode_item(&self, text: &str) -> Result<Array2<f64>>;

    /// Digest of the frozen parameters.
    fn fingerprint(&self) -> String;
}

/// Condition tensor for one prompt batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    /// `[N, L, C]`
    pub values: Array3<f64>,
    /// Provenance only. Never fed to the generator.
    pub task_id: String,
}

impl ConditionEmbedding {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.values.dim()
    }
}

/// Pads `token_ids` with [`NULL_TOKEN`] to the next multiple of `window` and
/// slices it into consecutive windows.
pub fn chunk_long_sequence(token_ids: &[u32], window: usize) -> Vec<Vec<u32>> {
    assert!(window >= 1, "window must be >= 1");
    token_ids
        .chunks(window)
        .map(|c| {
            let mut w = c.to_vec();
            w.resize(window, NULL_TOKEN);
            w
        })
        .collect()
}

/// Encodes every item of `batch` independently and stacks them along N.
/// Items whose `L` is shorter than the longest item are zero-padded along L.
pub fn encode_batch(batch: &PromptBatch, encoder: &dyn ConditionEncoder) -> Result<ConditionEmbedding> {
    if batch.is_empty() {
        return Err(domain!("cannot encode an empty prompt batch"));
    }
    let blocks = batch
        .items
        .iter()
        .map(|t| encoder.encode_item(t))
        .collect::<Result<Vec<_>>>()?;
    let l = blocks.iter().map(|b| b.nrows()).max().unwrap_or(0);
    let mut values = Array3::zeros((blocks.len(), l, encoder.dim()));
    for (i, b) in blocks.iter().enumerate() {
        values.slice_mut(s![i, ..b.nrows(), ..]).assign(b);
    }
    Ok(ConditionEmbedding {
        values,
        task_id: batch.task_id.clone(),
    })
}

/// Construction parameters shared by the built-in encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderParams {
    pub dim: usize,
    pub window: usize,
    /// Longest allowed per-item length after chunking.
    pub max_len: usize,
    pub buckets: u64,
    pub seed: u64,
}

impl Default for EncoderParams {
    fn default() -> Self {
        Self {
            dim: 64,
            window: 32,
            max_len: 384,
            buckets: 4096,
            seed: 0x5eed,
        }
    }
}

/// Hashed character n-grams through a fixed random projection. One L slot per
/// character; each slot holds the projection column of the n-gram ending at
/// that character (the n-gram window restarts at every chunk boundary).
#[derive(Debug, Clone)]
pub struct NgramHashEncoder {
    id: String,
    n: usize,
    params: EncoderParams,
}

impl NgramHashEncoder {
    pub fn new(id: impl Into<String>, n: usize, params: EncoderParams) -> Result<Self> {
        if n == 0 || params.dim == 0 || params.window == 0 || params.buckets == 0 {
            return Err(config_err!("n-gram encoder needs positive n, dim, window and buckets"));
        }
        Ok(Self {
            id: id.into(),
            n,
            params,
        })
    }

    fn bucket(&self, gram: &[u32]) -> u64 {
        let mut h = splitmix64(self.params.seed ^ (self.n as u64) << 56);
        for &t in gram {
            h = splitmix64(h ^ u64::from(t));
        }
        h % self.params.buckets
    }

    /// Projection entry in `[-1, 1)`, computed from integers only.
    fn projection(&self, bucket: u64, c: usize) -> f64 {
        let h = splitmix64(splitmix64(self.params.seed.wrapping_add(bucket)) ^ c as u64);
        ((h >> 11) as f64) * (1.0 / (1u64 << 52) as f64) - 1.0
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ConditionEncoder for NgramHashEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.params.dim
    }

    fn window(&self) -> usize {
        self.params.window
    }

    fn encode_item(&self, text: &str) -> Result<Array2<f64>> {
        if text.is_empty() {
            return Err(domain!("empty prompt"));
        }
        // Byte values shifted by one so that no character maps to the null token.
        let ids: Vec<u32> = text.bytes().map(|b| u32::from(b) + 1).collect();
        let windows = chunk_long_sequence(&ids, self.params.window);
        let l = windows.len() * self.params.window;
        if l > self.params.max_len {
            return Err(domain!(
                "item of {} chars needs length {l} > budget {}",
                text.len(),
                self.params.max_len
            ));
        }
        let mut out = Array2::zeros((l, self.params.dim));
        for (wi, w) in windows.iter().enumerate() {
            for (i, &tok) in w.iter().enumerate() {
                if tok == NULL_TOKEN {
                    continue;
                }
                let start = (i + 1).saturating_sub(self.n);
                let bucket = self.bucket(&w[start..=i]);
                let mut row = out.row_mut(wi * self.params.window + i);
                for (c, v) in row.iter_mut().enumerate() {
                    *v = self.projection(bucket, c);
                }
            }
        }
        Ok(out)
    }

    fn fingerprint(&self) -> String {
        let desc = serde_json::json!({ "id": self.id, "n": self.n, "params": self.params });
        seed::content_hash(desc.to_string().as_bytes())
    }
}

type Builder = Box<dyn Fn(&EncoderParams) -> Result<Box<dyn ConditionEncoder>> + Send + Sync>;

/// Encoders keyed by id. External encoders register under their own id and
/// are then selectable from run configs.
pub struct EncoderRegistry {
    builders: BTreeMap<String, Builder>,
}

impl Default for EncoderRegistry {
    fn default() -> Self {
        let mut r = Self {
            builders: BTreeMap::new(),
        };
        r.register("ngram-hash", |p| {
            Ok(Box::new(NgramHashEncoder::new("ngram-hash", 3, p.clone())?))
        });
        r.register("unigram-hash", |p| {
            Ok(Box::new(NgramHashEncoder::new("unigram-hash", 1, p.clone())?))
        });
        r
    }
}

impl EncoderRegistry {
    pub fn register<F>(&mut self, id: &str, builder: F)
    where
        F: Fn(&EncoderParams) -> Result<Box<dyn ConditionEncoder>> + Send + Sync + 'static,
    {
        self.builders.insert(id.to_string(), Box::new(builder));
    }

    pub fn build(&self, id: &str, params: &EncoderParams) -> Result<Box<dyn ConditionEncoder>> {
        let b = self.builders.get(id).ok_or_else(|| {
            config_err!(
                "unknown encoder '{id}' (known: {})",
                self.ids().collect::<Vec<_>>().join(", ")
            )
        })?;
        b(params)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.builders.keys().map(String::as_str)
    }
}

/// On-disk embedding cache keyed by encoder fingerprint and batch content.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    dir: PathBuf,
}

impl EmbeddingCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn key(encoder: &dyn ConditionEncoder, batch: &PromptBatch) -> String {
        let mut bytes = encoder.fingerprint().into_bytes();
        for item in &batch.items {
            bytes.extend_from_slice(&(item.len() as u64).to_le_bytes());
            bytes.extend_from_slice(item.as_bytes());
        }
        seed::content_hash(&bytes)
    }

    fn path(&self, encoder: &dyn ConditionEncoder, key: &str) -> PathBuf {
        self.dir.join(encoder.id()).join(format!("{key}.emb"))
    }

    pub fn get_or_encode(
        &self,
        batch: &PromptBatch,
        encoder: &dyn ConditionEncoder,
    ) -> Result<ConditionEmbedding> {
        let key = Self::key(encoder, batch);
        let path = self.path(encoder, &key);
        if path.exists() {
            let values = read_array3(&path)?;
            return Ok(ConditionEmbedding {
                values,
                task_id: batch.task_id.clone(),
            });
        }
        let emb = encode_batch(batch, encoder)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_array3(&path, &emb.values)?;
        Ok(emb)
    }
}

fn write_array3(path: &Path, a: &Array3<f64>) -> Result<()> {
    let (n, l, c) = a.dim();
    let mut bytes = Vec::with_capacity(24 + a.len() * 8);
    for d in [n, l, c] {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in a.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_array3(path: &Path) -> Result<Array3<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Format {
        path: path.into(),
        detail: "truncated embedding".into(),
    };
    if bytes.len() < 24 {
        return Err(bad());
    }
    let dim = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap()) as usize;
    let (n, l, c) = (dim(0), dim(1), dim(2));
    let body = &bytes[24..];
    if body.len() != n * l * c * 8 {
        return Err(bad());
    }
    let vals = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Array3::from_shape_vec((n, l, c), vals).map_err(|_| bad())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ConditionSource;

    fn batch(items: &[&str]) -> PromptBatch {
        PromptBatch {
            task_id: "t".into(),
            items: items.iter().map(|s| s.to_string()).collect(),
            indices: (0..items.len()).collect(),
            condition_source: ConditionSource::PromptOnly,
        }
    }

    fn enc() -> Box<dyn ConditionEncoder> {
        EncoderRegistry::default()
            .build("ngram-hash", &EncoderParams::default())
            .unwrap()
    }

    #[test]
    fn chunking() {
        let w = chunk_long_sequence(&vec![1; 900], 512);
        assert_eq!(w.len(), 2);
        assert_eq!(w.iter().map(Vec::len).sum::<usize>(), 1024);
        assert!(w[1][388..].iter().all(|&t| t == NULL_TOKEN));
        assert_eq!(chunk_long_sequence(&vec![1; 512], 512).len(), 1);
        assert!(chunk_long_sequence(&[], 512).is_empty());
    }

    #[test]
    fn repeated_prompt_gives_identical_rows() {
        let e = encode_batch(&batch(&["copy: abc", "copy: abc"]), enc().as_ref()).unwrap();
        assert_eq!(e.values.slice(s![0, .., ..]), e.values.slice(s![1, .., ..]));
    }

    #[test]
    fn items_do_not_leak() {
        let e = enc();
        let a = encode_batch(&batch(&["copy: abc", "sort: 123", "upper: xyz"]), e.as_ref()).unwrap();
        let b = encode_batch(&batch(&["copy: abc", "sort: 999", "upper: xyz"]), e.as_ref()).unwrap();
        assert_eq!(a.values.slice(s![0, .., ..]), b.values.slice(s![0, .., ..]));
        assert_eq!(a.values.slice(s![2, .., ..]), b.values.slice(s![2, .., ..]));
        assert_ne!(a.values.slice(s![1, .., ..]), b.values.slice(s![1, .., ..]));
    }

    #[test]
    fn length_is_window_multiple_and_budget_enforced() {
        let e = enc();
        assert_eq!(e.encode_item("copy: abc").unwrap().dim(), (32, 64));
        assert_eq!(e.encode_item(&"a".repeat(33)).unwrap().nrows(), 64);
        assert!(matches!(e.encode_item(&"a".repeat(385)), Err(Error::Domain(_))));
        assert!(matches!(e.encode_item(""), Err(Error::Domain(_))));
    }

    #[test]
    fn registry_rejects_unknown_ids() {
        let r = EncoderRegistry::default();
        assert!(matches!(
            r.build("sentence-bert", &EncoderParams::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::new(dir.path());
        let e = enc();
        let b = batch(&["copy: abc", "sort: 123"]);
        let first = cache.get_or_encode(&b, e.as_ref()).unwrap();
        let second = cache.get_or_encode(&b, e.as_ref()).unwrap();
        assert_eq!(first, second);
    }
}
