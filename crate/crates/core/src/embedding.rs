//! ZNRK embedding files and the hash-based mock embedder.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! magic   "ZNRK"          4 bytes
//! version u32 = 1
//! dim     u32
//! count   u64
//! count × { id_len u16, id (UTF-8, id_len bytes), dim × f32 }
//! ```

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::ConditioningMode;

pub const MAGIC: [u8; 4] = *b"ZNRK";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

/// Stored vectors must be unit norm within this tolerance.
pub const STORED_NORM_TOLERANCE: f64 = 1e-5;
/// Drift up to this is re-normalized on load with a warning; beyond it is an error.
pub const MAX_NORM_DRIFT: f64 = 1e-3;
/// Vectors already this close to unit norm are written unchanged.
const WRITE_NORM_SLACK: f64 = 1e-6;

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

fn rescale(v: &[f32], n: f64) -> Vec<f32> {
    v.iter().map(|&x| (f64::from(x) / n) as f32).collect()
}

/// Serialize `(id, vector)` entries, L2-normalizing each vector.
pub fn write_embeddings<S, V>(entries: &[(S, V)], dim: usize) -> Result<Vec<u8>>
where
    S: AsRef<str>,
    V: AsRef<[f32]>,
{
    if dim == 0 || dim > u32::MAX as usize {
        return Err(Error::DimensionMismatch { expected: 1, got: dim });
    }
    let mut seen = std::collections::HashSet::with_capacity(entries.len());
    let mut out = Vec::with_capacity(HEADER_LEN + entries.len() * (dim * 4 + 16));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());

    for (id, vector) in entries {
        let (id, vector) = (id.as_ref(), vector.as_ref());
        if vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: vector.len(),
            });
        }
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::InvalidRecord(format!("id longer than {} bytes", u16::MAX)))?;
        let n = norm(vector);
        if !n.is_finite() || n == 0.0 {
            return Err(Error::ZeroVector(id.to_string()));
        }
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        if (n - 1.0).abs() <= WRITE_NORM_SLACK {
            for x in vector {
                out.extend_from_slice(&x.to_le_bytes());
            }
        } else {
            for x in rescale(vector, n) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Vectors loaded from a ZNRK file, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    by_id: HashMap<String, usize>,
    renormalized: usize,
}

impl EmbeddingSet {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.by_id
            .get(id)
            .map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .zip(self.data.chunks_exact(self.dim))
            .map(|(id, v)| (id.as_str(), v))
    }

    /// Number of vectors whose norm drifted and were re-normalized on load.
    pub fn renormalized(&self) -> usize {
        self.renormalized
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::TruncatedFile(format!(
                "need {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Parse a ZNRK file.
pub fn read_embeddings(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u32::from_le_bytes(cur.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = u32::from_le_bytes(cur.take(4, "dim")?.try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(cur.take(8, "count")?.try_into().unwrap());
    if dim == 0 {
        return Err(Error::DimensionMismatch { expected: 1, got: 0 });
    }
    // the smallest possible record is 2 + dim*4 bytes
    let min_record = 2 + dim as u64 * 4;
    if count.saturating_mul(min_record) > (bytes.len() - HEADER_LEN) as u64 {
        return Err(Error::TruncatedFile(format!(
            "header declares {count} records of dim {dim}"
        )));
    }
    let count = count as usize;

    let mut set = EmbeddingSet {
        dim,
        ids: Vec::with_capacity(count),
        data: Vec::with_capacity(count * dim),
        by_id: HashMap::with_capacity(count),
        renormalized: 0,
    };
    for _ in 0..count {
        let id_len = u16::from_le_bytes(cur.take(2, "id length")?.try_into().unwrap()) as usize;
        let id = std::str::from_utf8(cur.take(id_len, "id")?)
            .map_err(|e| Error::InvalidRecord(format!("id is not UTF-8: {e}")))?
            .to_string();
        let raw = cur.take(dim * 4, "vector")?;
        let mut v: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let n = norm(&v);
        let drift = (n - 1.0).abs();
        if drift.is_nan() || drift > STORED_NORM_TOLERANCE {
            if drift <= MAX_NORM_DRIFT {
                log::warn!("vector {id:?} has norm {n}; re-normalizing");
                v = rescale(&v, n);
                set.renormalized += 1;
            } else {
                return Err(Error::NotNormalized { id, norm: n });
            }
        }
        if set.by_id.insert(id.clone(), set.ids.len()).is_some() {
            return Err(Error::DuplicateId(id));
        }
        set.ids.push(id);
        set.data.extend_from_slice(&v);
    }
    if cur.pos != bytes.len() {
        return Err(Error::InvalidRecord(format!(
            "{} trailing bytes after last record",
            bytes.len() - cur.pos
        )));
    }
    Ok(set)
}

/// Weight of the context vector relative to the span vector.
pub const CONTEXT_WEIGHT: f64 = 0.25;

const SPAN_SALT: u64 = 0x5350_414e;
const CONTEXT_SALT: u64 = 0x4354_5854;
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Deterministic stand-in for a contextual span encoder.
///
/// Span text is feature-hashed from lowercase character 3-grams (with
/// boundary padding), then optionally perturbed by a differently salted hash
/// of the context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn embed(&self, span_text: &str, context_text: &str, mode: ConditioningMode) -> Result<Vec<f32>> {
        if self.dim == 0 {
            return Err(Error::DimensionMismatch { expected: 1, got: 0 });
        }
        let v = match mode {
            ConditioningMode::EntityAlone => {
                if span_text.is_empty() {
                    return Err(Error::EmptyInput);
                }
                self.hashed(span_text, SPAN_SALT)
            }
            ConditioningMode::EntityInFullContext => {
                if span_text.is_empty() {
                    return Err(Error::EmptyInput);
                }
                let mut v = unit(self.hashed(span_text, SPAN_SALT));
                if !context_text.is_empty() {
                    let c = unit(self.hashed(context_text, CONTEXT_SALT));
                    for (a, b) in v.iter_mut().zip(c) {
                        *a += CONTEXT_WEIGHT * b;
                    }
                }
                v
            }
            ConditioningMode::FullSpan => {
                if context_text.is_empty() {
                    return Err(Error::EmptyInput);
                }
                self.hashed(context_text, SPAN_SALT)
            }
        };
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::ZeroVector(span_text.to_string()));
        }
        Ok(v.iter().map(|x| (x / n) as f32).collect())
    }

    fn hashed(&self, text: &str, salt: u64) -> Vec<f64> {
        let chars: Vec<char> = std::iter::once('\u{2}')
            .chain(text.chars().flat_map(char::to_lowercase))
            .chain(std::iter::once('\u{3}'))
            .collect();
        let mut v = vec![0.0; self.dim];
        for gram in chars.windows(3) {
            let h = self.gram_hash(gram, salt);
            let slot = (h % self.dim as u64) as usize;
            v[slot] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        v
    }

    fn gram_hash(&self, gram: &[char], salt: u64) -> u64 {
        let mut h = FNV_OFFSET ^ self.seed.wrapping_mul(FNV_PRIME) ^ salt;
        for &c in gram {
            for b in (c as u32).to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(FNV_PRIME);
            }
        }
        // murmur3 finalizer spreads the low bits used for the slot
        h ^= h >> 33;
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h ^= h >> 33;
        h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
        h ^ (h >> 33)
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / n).collect()
}

pub fn mock_embed(
    span_text: &str,
    context_text: &str,
    mode: ConditioningMode,
    dim: usize,
    seed: u64,
) -> Result<Vec<f32>> {
    MockEmbedder::new(dim, seed).embed(span_text, context_text, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
    }

    #[test]
    fn header_only_file_is_20_bytes() {
        let bytes = write_embeddings::<&str, Vec<f32>>(&[], 4).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..4], b"ZNRK");
        let set = read_embeddings(&bytes).unwrap();
        assert_eq!(set.dim(), 4);
        assert!(set.is_empty());
    }

    #[test]
    fn normalizes_on_write() {
        let bytes = write_embeddings(&[("a", vec![3.0f32, 4.0])], 2).unwrap();
        let set = read_embeddings(&bytes).unwrap();
        assert_eq!(set.get("a").unwrap(), &[0.6f32, 0.8]);
    }

    #[test]
    fn write_errors() {
        assert_eq!(
            write_embeddings(&[("a", vec![0.0f32, 0.0])], 2),
            Err(Error::ZeroVector("a".into()))
        );
        assert_eq!(
            write_embeddings(&[("a", vec![1.0f32])], 2),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        );
        assert_eq!(
            write_embeddings(&[("a", vec![1.0f32]), ("a", vec![1.0])], 1),
            Err(Error::DuplicateId("a".into()))
        );
        assert!(write_embeddings(&[("a", vec![f32::NAN])], 1).is_err());
    }

    #[test]
    fn read_errors() {
        let good = write_embeddings(&[("abc", vec![1.0f32, 0.0, 0.0])], 3).unwrap();
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert_eq!(read_embeddings(&bad), Err(Error::BadMagic(*b"XXXX")));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert_eq!(read_embeddings(&v2), Err(Error::UnsupportedVersion(2)));
        for cut in [3, 19, good.len() - 1, good.len() - 8] {
            assert!(
                matches!(read_embeddings(&good[..cut]), Err(Error::TruncatedFile(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn loader_renormalizes_small_drift_and_rejects_large() {
        let mut bytes = write_embeddings(&[("a", vec![1.0f32, 0.0])], 2).unwrap();
        let at = HEADER_LEN + 2 + 1;
        bytes[at..at + 4].copy_from_slice(&1.0005f32.to_le_bytes());
        let set = read_embeddings(&bytes).unwrap();
        assert_eq!(set.renormalized(), 1);
        assert!((norm(set.get("a").unwrap()) - 1.0).abs() < 1e-6);

        bytes[at..at + 4].copy_from_slice(&1.01f32.to_le_bytes());
        assert!(matches!(read_embeddings(&bytes), Err(Error::NotNormalized { .. })));
    }

    #[test]
    fn mock_is_deterministic_and_unit() {
        let e = MockEmbedder::new(64, 9);
        for mode in ConditioningMode::ALL {
            let a = e.embed("Ted Howard", "Where was Ted Howard born?", mode).unwrap();
            let b = e.embed("Ted Howard", "Where was Ted Howard born?", mode).unwrap();
            assert_eq!(a, b);
            assert!((norm(&a) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn entity_alone_ignores_context() {
        let e = MockEmbedder::new(64, 0);
        let a = e.embed("Ted Howard", "Where was Ted Howard born?", ConditioningMode::EntityAlone).unwrap();
        let b = e.embed("Ted Howard", "Who employed Ted Howard?", ConditioningMode::EntityAlone).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn context_separates_modes() {
        let e = MockEmbedder::new(64, 0);
        let ctx = "Where was Ted Howard born?";
        let alone = e.embed("Ted Howard", ctx, ConditioningMode::EntityAlone).unwrap();
        let in_ctx = e.embed("Ted Howard", ctx, ConditioningMode::EntityInFullContext).unwrap();
        let c = cos(&alone, &in_ctx);
        assert!(c < 1.0 - 1e-3 && c > 0.9, "cos {c}");
    }

    #[test]
    fn mock_empty_input() {
        let e = MockEmbedder::new(8, 0);
        assert_eq!(e.embed("", "ctx", ConditioningMode::EntityAlone), Err(Error::EmptyInput));
        assert_eq!(e.embed("", "ctx", ConditioningMode::EntityInFullContext), Err(Error::EmptyInput));
        assert_eq!(e.embed("x", "", ConditioningMode::FullSpan), Err(Error::EmptyInput));
        assert!(e.embed("x", "", ConditioningMode::EntityInFullContext).is_ok());
    }
}
