//! Deterministic featurization: hashed character trigrams for text, a
//! mean-pooled 8x8 RGB grid for images, and a JSONL-backed embedding cache so
//! desk-scale runs can skip pixel decoding entirely.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

use crate::hashing::{checksum_chunks, fnv1a_str};
use crate::twin_data::ImageRef;
use crate::{Error, Result};

/// Cells per image axis; features are cell-mean RGB values.
pub const IMAGE_GRID: usize = 8;
/// Raw image feature length before folding: 8 * 8 cells * 3 channels.
pub const IMAGE_RAW_LEN: usize = IMAGE_GRID * IMAGE_GRID * 3;
/// Smallest usable feature dimension.
pub const MIN_FEATURE_DIM: usize = 16;

/// A unit-norm feature vector, or an all-zero vector with the flag set.
/// Zero vectors are legal output (blank images, sub-trigram text) and the
/// caller decides whether to exclude them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub is_zero: bool,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

fn check_dim(feature_dim: usize) -> Result<()> {
    if feature_dim < MIN_FEATURE_DIM {
        return Err(Error::BadConfig(format!(
            "feature_dim must be at least {MIN_FEATURE_DIM}, got {feature_dim}"
        )));
    }
    Ok(())
}

/// L2-normalize in place; returns the original norm. Zero stays zero.
pub fn l2_normalize(values: &mut [f64]) -> f64 {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in values.iter_mut() {
            *v /= norm;
        }
    }
    norm
}

fn finish(mut values: Vec<f64>) -> FeatureVector {
    let norm = l2_normalize(&mut values);
    FeatureVector {
        is_zero: norm == 0.0,
        values,
    }
}

/// Hash case-folded character trigrams into `feature_dim` buckets and
/// L2-normalize the counts. Same string, same vector, on any platform.
pub fn text_features(text: &str, feature_dim: usize) -> Result<FeatureVector> {
    check_dim(feature_dim)?;
    if text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let folded = text.to_lowercase();
    let chars: Vec<char> = folded.chars().collect();
    let mut values = vec![0.0f64; feature_dim];
    let mut buf = String::with_capacity(12);
    for window in chars.windows(3) {
        buf.clear();
        buf.extend(window);
        let bucket = (fnv1a_str(&buf) % feature_dim as u64) as usize;
        values[bucket] += 1.0;
    }
    Ok(finish(values))
}

/// Fold or pad a raw vector into `feature_dim` buckets (index mod dim).
fn fold_into(raw: &[f64], feature_dim: usize) -> Vec<f64> {
    let mut values = vec![0.0f64; feature_dim];
    for (i, v) in raw.iter().enumerate() {
        values[i % feature_dim] += v;
    }
    values
}

fn synthetic_seed(reference: &str) -> Option<u64> {
    let hex = reference.strip_prefix("feat:")?;
    if hex.len() != 16 || !hex.chars().all(|c| c.is_ascii_hexdigit()) {
        return None;
    }
    u64::from_str_radix(hex, 16).ok()
}

/// Expand a 16-hex-digit `feat:` key into a deterministic unit vector.
fn expand_synthetic(seed: u64, feature_dim: usize) -> FeatureVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..feature_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    finish(values)
}

fn decode_pixels(path: &str, feature_dim: usize) -> Result<FeatureVector> {
    let img = image::open(path)
        .map_err(|e| Error::UnreadableImage {
            reference: path.to_string(),
            detail: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::UnreadableImage {
            reference: path.to_string(),
            detail: "zero-sized image".into(),
        });
    }
    let mut raw = vec![0.0f64; IMAGE_RAW_LEN];
    for cy in 0..IMAGE_GRID {
        let y0 = cy * h / IMAGE_GRID;
        let y1 = ((cy + 1) * h / IMAGE_GRID).max(y0 + 1).min(h.max(y0 + 1));
        for cx in 0..IMAGE_GRID {
            let x0 = cx * w / IMAGE_GRID;
            let x1 = ((cx + 1) * w / IMAGE_GRID).max(x0 + 1).min(w.max(x0 + 1));
            let mut sum = [0.0f64; 3];
            let mut count = 0.0f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = img.get_pixel((x.min(w - 1)) as u32, (y.min(h - 1)) as u32);
                    sum[0] += f64::from(p.0[0]);
                    sum[1] += f64::from(p.0[1]);
                    sum[2] += f64::from(p.0[2]);
                    count += 1.0;
                }
            }
            let base = (cy * IMAGE_GRID + cx) * 3;
            for ch in 0..3 {
                raw[base + ch] = sum[ch] / count / 255.0;
            }
        }
    }
    Ok(finish(fold_into(&raw, feature_dim)))
}

/// Resolve an image reference to features. Resolution order: an exact cache
/// hit wins, then 16-hex `feat:` keys expand deterministically, then the
/// reference is decoded as a raster file.
pub fn image_features(
    reference: &ImageRef,
    feature_dim: usize,
    cache: Option<&EmbeddingCache>,
) -> Result<FeatureVector> {
    check_dim(feature_dim)?;
    if let Some(cache) = cache {
        if let Some(values) = cache.get(reference.as_str()) {
            if values.len() != feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: feature_dim,
                    got: values.len(),
                    context: format!("cache entry `{reference}`"),
                });
            }
            return Ok(finish(values.to_vec()));
        }
    }
    if let Some(seed) = synthetic_seed(reference.as_str()) {
        return Ok(expand_synthetic(seed, feature_dim));
    }
    if reference.is_feature_key() {
        return Err(Error::UnreadableImage {
            reference: reference.as_str().to_string(),
            detail: "feature key not present in the embedding cache".into(),
        });
    }
    decode_pixels(reference.as_str(), feature_dim)
}

/// Precomputed feature vectors keyed by image reference. The file format is
/// a JSON header line `{"dim": ..., "count": ...}` followed by one
/// `{"key", "values"}` JSON line per entry, sorted by key.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn new(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(EmbeddingCache {
            dim,
            entries: BTreeMap::new(),
        })
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

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn insert(&mut self, key: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: values.len(),
                context: "cache insert".into(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation(
                "cache vectors must be finite".into(),
            ));
        }
        self.entries.insert(key.into(), values);
        Ok(())
    }

    /// Order-sensitive checksum over keys and raw f64 bytes.
    pub fn checksum(&self) -> u64 {
        let mut bytes: Vec<u8> = Vec::new();
        for (key, values) in &self.entries {
            bytes.extend_from_slice(key.as_bytes());
            bytes.push(0);
            for v in values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        checksum_chunks(std::iter::once(bytes.as_slice()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = std::io::BufWriter::new(file);
        let header = serde_json::json!({"dim": self.dim, "count": self.entries.len()});
        let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
        writeln!(w, "{header}").map_err(io_err)?;
        for (key, values) in &self.entries {
            let line = serde_json::json!({"key": key, "values": values});
            writeln!(w, "{line}").map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::MalformedJson {
                context: format!("{} header", path.display()),
                detail: "file is empty".into(),
            })?
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let header: Value =
            serde_json::from_str(&header_line).map_err(|e| Error::MalformedJson {
                context: format!("{} header", path.display()),
                detail: e.to_string(),
            })?;
        let dim = header
            .get("dim")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::MissingField("dim".into()))? as usize;
        let count = header
            .get("count")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::MissingField("count".into()))? as usize;
        let mut cache = EmbeddingCache::new(dim)?;
        for (idx, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: Value = serde_json::from_str(&line).map_err(|e| Error::MalformedJson {
                context: format!("{} entry {}", path.display(), idx + 1),
                detail: e.to_string(),
            })?;
            let key = entry
                .get("key")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::MissingField("key".into()))?;
            let values: Vec<f64> = entry
                .get("values")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::MissingField("values".into()))?
                .iter()
                .map(|v| {
                    v.as_f64().ok_or_else(|| Error::MalformedJson {
                        context: format!("{} entry {}", path.display(), idx + 1),
                        detail: "non-numeric value".into(),
                    })
                })
                .collect::<Result<_>>()?;
            cache.insert(key.to_string(), values)?;
        }
        if cache.len() != count {
            return Err(Error::InvariantViolation(format!(
                "cache {} declares {count} entries but holds {}",
                path.display(),
                cache.len()
            )));
        }
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn single_trigram_lands_in_one_bucket() {
        let fv = text_features("aaa", 16).unwrap();
        assert!(!fv.is_zero);
        let nonzero: Vec<f64> = fv.values.iter().copied().filter(|v| *v != 0.0).collect();
        assert_eq!(nonzero, vec![1.0]);
    }

    #[test]
    fn case_folding_merges_variants() {
        let a = text_features("Red Thread", 2048).unwrap();
        let b = text_features("red thread", 2048).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_text_is_an_error() {
        assert!(matches!(text_features("", 64), Err(Error::EmptyText)));
        assert!(matches!(text_features("   ", 64), Err(Error::EmptyText)));
    }

    #[test]
    fn sub_trigram_text_is_zero_flagged() {
        let fv = text_features("ab", 64).unwrap();
        assert!(fv.is_zero);
        assert!(fv.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn distinct_phrases_stay_dissimilar() {
        let a = text_features("red thread", 2048).unwrap();
        let b = text_features("alchemy furnace", 2048).unwrap();
        assert!(cosine(&a.values, &b.values) < 0.5);
    }

    #[test]
    fn tiny_feature_dim_rejected() {
        assert!(matches!(
            text_features("anything", 8),
            Err(Error::BadConfig(_))
        ));
    }

    #[test]
    fn synthetic_keys_expand_deterministically() {
        let r = ImageRef::new("feat:00000000000000ff").unwrap();
        let a = image_features(&r, 64, None).unwrap();
        let b = image_features(&r, 64, None).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_zero);
        let norm: f64 = a.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_hex_feature_key_requires_cache() {
        let r = ImageRef::new("feat:fixture-key").unwrap();
        assert!(matches!(
            image_features(&r, 64, None),
            Err(Error::UnreadableImage { .. })
        ));
        let mut cache = EmbeddingCache::new(64).unwrap();
        let mut v = vec![0.0; 64];
        v[3] = 2.0;
        cache.insert("feat:fixture-key", v).unwrap();
        let fv = image_features(&r, 64, Some(&cache)).unwrap();
        assert!((fv.values[3] - 1.0).abs() < 1e-12); // normalized on the way out
    }

    #[test]
    fn cache_hit_takes_priority_over_decoding() {
        let mut cache = EmbeddingCache::new(32).unwrap();
        let mut v = vec![0.0; 32];
        v[0] = 1.0;
        cache.insert("no/such/file.png", v.clone()).unwrap();
        let r = ImageRef::new("no/such/file.png").unwrap();
        let fv = image_features(&r, 32, Some(&cache)).unwrap();
        assert_eq!(fv.values, v);
    }

    #[test]
    fn cache_entry_dimension_mismatch_is_an_error() {
        let mut cache = EmbeddingCache::new(32).unwrap();
        cache.insert("k", vec![1.0; 32]).unwrap();
        let r = ImageRef::new("k").unwrap();
        assert!(matches!(
            image_features(&r, 64, Some(&cache)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn solid_black_image_is_zero_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("black.png");
        let img = image::RgbImage::from_pixel(64, 64, image::Rgb([0, 0, 0]));
        img.save(&path).unwrap();
        let r = ImageRef::new(path.to_str().unwrap()).unwrap();
        let fv = image_features(&r, 2048, None).unwrap();
        assert!(fv.is_zero);
    }

    #[test]
    fn gradient_image_features_are_unit_norm_and_padded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grad.png");
        let img = image::RgbImage::from_fn(64, 64, |x, y| {
            image::Rgb([(x * 4) as u8, (y * 4) as u8, 128])
        });
        img.save(&path).unwrap();
        let r = ImageRef::new(path.to_str().unwrap()).unwrap();
        let fv = image_features(&r, 2048, None).unwrap();
        assert!(!fv.is_zero);
        let norm: f64 = fv.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        // beyond the 192 raw slots everything is padding
        assert!(fv.values[IMAGE_RAW_LEN..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn small_dims_fold_instead_of_pad() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let img = image::RgbImage::from_pixel(16, 16, image::Rgb([100, 100, 100]));
        img.save(&path).unwrap();
        let r = ImageRef::new(path.to_str().unwrap()).unwrap();
        let fv = image_features(&r, 16, None).unwrap();
        assert!(!fv.is_zero);
        assert!(fv.values.iter().all(|v| *v != 0.0));
    }

    #[test]
    fn missing_image_file_is_unreadable() {
        let r = ImageRef::new("definitely/not/here.png").unwrap();
        assert!(matches!(
            image_features(&r, 64, None),
            Err(Error::UnreadableImage { .. })
        ));
    }

    #[test]
    fn cache_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let mut cache = EmbeddingCache::new(16).unwrap();
        let mut v = vec![0.0; 16];
        v[0] = 0.1 + 0.2; // deliberately non-representable decimal
        v[5] = -1.0 / 3.0;
        cache.insert("feat:a", v).unwrap();
        cache.insert("feat:b", vec![0.25; 16]).unwrap();
        cache.save(&path).unwrap();
        let loaded = EmbeddingCache::load(&path).unwrap();
        assert_eq!(loaded, cache);
        assert_eq!(loaded.checksum(), cache.checksum());
    }

    #[test]
    fn cache_count_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        std::fs::write(
            &path,
            "{\"dim\":16,\"count\":2}\n{\"key\":\"a\",\"values\":[0.0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,1]}\n",
        )
        .unwrap();
        assert!(matches!(
            EmbeddingCache::load(&path),
            Err(Error::InvariantViolation(_))
        ));
    }

    #[test]
    fn cache_checksum_tracks_content() {
        let mut a = EmbeddingCache::new(16).unwrap();
        let b = EmbeddingCache::new(16).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        a.insert("k", vec![1.0; 16]).unwrap();
        assert_ne!(a.checksum(), b.checksum());
    }

    proptest! {
        #[test]
        fn text_features_unit_or_zero(s in "[a-z ]{3,40}", dim in 16usize..256) {
            if s.trim().is_empty() { return Ok(()); }
            let fv = text_features(&s, dim).unwrap();
            let norm: f64 = fv.values.iter().map(|v| v * v).sum::<f64>().sqrt();
            if fv.is_zero {
                prop_assert_eq!(norm, 0.0);
            } else {
                prop_assert!((norm - 1.0).abs() < 1e-9);
            }
        }
    }
}
