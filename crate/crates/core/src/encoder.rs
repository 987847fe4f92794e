//! Frozen random linear encoders with low-rank trainable adapters. The
//! projection is `v = (W + (alpha/r) * B * A) x` followed by L2
//! normalization; only A and B ever receive gradient updates unless full
//! fine-tuning is explicitly requested.
//!
//! All parameter tensors are held in f64 for arithmetic but snapped to
//! f32-representable values, so checkpoints (stored as f32) round-trip
//! bit-for-bit.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::featurize::{self, FeatureVector};
use crate::hashing::{checksum_chunks, derive_seed};
use crate::twin_data::ImageRef;
use crate::{Error, Result};

/// Pre-normalization norms below this are degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Snap every entry to the nearest f32, keeping f64 storage.
pub fn quantize_f32(arr: &mut Array2<f64>) {
    arr.mapv_inplace(|v| v as f32 as f64);
}

/// Seeded Gaussian init, snapped to f32-representable values.
pub(crate) fn gaussian_matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    });
    quantize_f32(&mut m);
    m
}

fn checksum_array(arr: &Array2<f64>) -> u64 {
    let bytes: Vec<u8> = arr.iter().flat_map(|v| v.to_le_bytes()).collect();
    checksum_chunks(std::iter::once(bytes.as_slice()))
}

/// A linear map W in R^{d x F}, frozen by default.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearEncoder {
    weight: Array2<f64>,
    frozen: bool,
}

impl LinearEncoder {
    /// Seeded init with entries drawn from N(0, 1/F); rows then have norm
    /// close to 1.
    pub fn init(embed_dim: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if embed_dim == 0 || feature_dim == 0 {
            return Err(Error::BadConfig("encoder dims must be positive".into()));
        }
        let scale = 1.0 / (feature_dim as f64).sqrt();
        Ok(LinearEncoder {
            weight: gaussian_matrix(embed_dim, feature_dim, scale, seed),
            frozen: true,
        })
    }

    pub fn from_weight(weight: Array2<f64>, frozen: bool) -> Self {
        LinearEncoder { weight, frozen }
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    /// Mutable access for full fine-tuning; refuses while frozen.
    pub fn weight_mut(&mut self) -> Result<&mut Array2<f64>> {
        if self.frozen {
            return Err(Error::InvariantViolation(
                "encoder is frozen; unfreeze before mutating".into(),
            ));
        }
        Ok(&mut self.weight)
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.ncols()
    }

    /// Order-sensitive checksum of the weight bytes; unchanged weights hash
    /// identically across a whole training run.
    pub fn checksum(&self) -> u64 {
        checksum_array(&self.weight)
    }
}

/// Initialize the image/text encoder pair from one base seed.
pub fn init_encoders(
    embed_dim: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<(LinearEncoder, LinearEncoder)> {
    let image = LinearEncoder::init(embed_dim, feature_dim, derive_seed(seed, "image_w"))?;
    let text = LinearEncoder::init(embed_dim, feature_dim, derive_seed(seed, "text_w"))?;
    Ok((image, text))
}

/// Low-rank update: delta W = (alpha / r) * B * A with A in R^{r x F}
/// (Gaussian at init) and B in R^{d x r} (zero at init, making the adapter an
/// exact identity until trained).
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    rank: usize,
    alpha: f64,
}

impl LoraAdapter {
    pub fn init(
        embed_dim: usize,
        feature_dim: usize,
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 || rank > embed_dim.min(feature_dim) {
            return Err(Error::BadConfig(format!(
                "rank must be in 1..={}, got {rank}",
                embed_dim.min(feature_dim)
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::BadConfig(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        let scale = 1.0 / (feature_dim as f64).sqrt();
        Ok(LoraAdapter {
            a: gaussian_matrix(rank, feature_dim, scale, seed),
            b: Array2::zeros((embed_dim, rank)),
            rank,
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Densify the update: (alpha/r) * B * A.
    pub fn delta(&self) -> Array2<f64> {
        let mut d = self.b.dot(&self.a);
        d.mapv_inplace(|v| v * self.scaling());
        d
    }

    fn check_shapes(&self, enc: &LinearEncoder) -> Result<()> {
        if self.a.ncols() != enc.feature_dim() || self.b.nrows() != enc.embed_dim() {
            return Err(Error::ShapeMismatch(format!(
                "adapter ({}x{}, {}x{}) does not fit encoder {}x{}",
                self.b.nrows(),
                self.rank,
                self.rank,
                self.a.ncols(),
                enc.embed_dim(),
                enc.feature_dim()
            )));
        }
        Ok(())
    }
}

/// Fold an adapter into a fresh encoder holding W + (alpha/r) B A.
///
/// Not idempotent: merging an adapter into an already-merged encoder applies
/// the update a second time. Merge once, from the base weights.
pub fn lora_merge(enc: &LinearEncoder, adapter: &LoraAdapter) -> Result<LinearEncoder> {
    adapter.check_shapes(enc)?;
    let weight = enc.weight() + &adapter.delta();
    Ok(LinearEncoder {
        weight,
        frozen: true,
    })
}

/// Forward-pass intermediates kept around for the backward pass.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Unit-norm embedding.
    pub y: Array1<f64>,
    /// Pre-normalization norm of v.
    pub prenorm: f64,
    /// A x, present when an adapter participated.
    pub ax: Option<Array1<f64>>,
}

/// Project and normalize one feature vector.
pub fn encode_detailed(
    x: &[f64],
    enc: &LinearEncoder,
    adapter: Option<&LoraAdapter>,
) -> Result<Encoded> {
    if x.len() != enc.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: enc.feature_dim(),
            got: x.len(),
            context: "encode input".into(),
        });
    }
    let x = ndarray::ArrayView1::from(x);
    let mut v = enc.weight().dot(&x);
    let ax = match adapter {
        Some(ad) => {
            ad.check_shapes(enc)?;
            let ax = ad.a.dot(&x);
            let bax = ad.b.dot(&ax);
            v.zip_mut_with(&bax, |vi, di| *vi += ad.scaling() * di);
            Some(ax)
        }
        None => None,
    };
    let prenorm = v.dot(&v).sqrt();
    if !prenorm.is_finite() || prenorm < DEGENERATE_NORM {
        return Err(Error::DegenerateOutput { norm: prenorm });
    }
    let y = v.mapv(|vi| vi / prenorm);
    Ok(Encoded { y, prenorm, ax })
}

/// Project and normalize, discarding intermediates.
pub fn encode(
    x: &[f64],
    enc: &LinearEncoder,
    adapter: Option<&LoraAdapter>,
) -> Result<Array1<f64>> {
    encode_detailed(x, enc, adapter).map(|e| e.y)
}

/// An encoder pair plus optional adapters: everything needed to embed raw
/// text and image references into the shared space.
#[derive(Debug, Clone)]
pub struct Model {
    pub image_encoder: LinearEncoder,
    pub text_encoder: LinearEncoder,
    pub image_adapter: Option<LoraAdapter>,
    pub text_adapter: Option<LoraAdapter>,
}

impl Model {
    pub fn feature_dim(&self) -> usize {
        self.image_encoder.feature_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.image_encoder.embed_dim()
    }

    /// Featurize then encode text; the same path serves captions and concept
    /// names.
    pub fn embed_text(&self, text: &str) -> Result<Array1<f64>> {
        let fv = featurize::text_features(text, self.feature_dim())?;
        encode(&fv.values, &self.text_encoder, self.text_adapter.as_ref())
    }

    pub fn embed_text_features(&self, fv: &FeatureVector) -> Result<Array1<f64>> {
        encode(&fv.values, &self.text_encoder, self.text_adapter.as_ref())
    }

    pub fn embed_image(
        &self,
        reference: &ImageRef,
        cache: Option<&featurize::EmbeddingCache>,
    ) -> Result<Array1<f64>> {
        let fv = featurize::image_features(reference, self.feature_dim(), cache)?;
        encode(&fv.values, &self.image_encoder, self.image_adapter.as_ref())
    }

    pub fn embed_image_features(&self, fv: &FeatureVector) -> Result<Array1<f64>> {
        encode(&fv.values, &self.image_encoder, self.image_adapter.as_ref())
    }

    /// Fold adapters into the encoders and drop them.
    pub fn merged(&self) -> Result<Model> {
        let image_encoder = match &self.image_adapter {
            Some(ad) => lora_merge(&self.image_encoder, ad)?,
            None => self.image_encoder.clone(),
        };
        let text_encoder = match &self.text_adapter {
            Some(ad) => lora_merge(&self.text_encoder, ad)?,
            None => self.text_encoder.clone(),
        };
        Ok(Model {
            image_encoder,
            text_encoder,
            image_adapter: None,
            text_adapter: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_unit_features(dim: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        crate::featurize::l2_normalize(&mut v);
        v
    }

    #[test]
    fn zero_init_adapter_is_bitwise_identity() {
        let enc = LinearEncoder::init(8, 64, 11).unwrap();
        let adapter = LoraAdapter::init(8, 64, 4, 4.0, 12).unwrap();
        let x = random_unit_features(64, 13);
        let plain = encode(&x, &enc, None).unwrap();
        let adapted = encode(&x, &enc, Some(&adapter)).unwrap();
        assert_eq!(plain.as_slice().unwrap(), adapted.as_slice().unwrap());
    }

    #[test]
    fn adapted_encode_matches_dense_construction() {
        let enc = LinearEncoder::init(8, 64, 21).unwrap();
        let mut adapter = LoraAdapter::init(8, 64, 4, 4.0, 22).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        adapter.b.mapv_inplace(|_| rng.random::<f64>() - 0.5);
        let x = random_unit_features(64, 24);

        let via_adapter = encode(&x, &enc, Some(&adapter)).unwrap();
        let dense = LinearEncoder::from_weight(enc.weight() + &adapter.delta(), true);
        let via_dense = encode(&x, &dense, None).unwrap();
        for (a, b) in via_adapter.iter().zip(via_dense.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn merge_equals_adapted_encoding() {
        let enc = LinearEncoder::init(16, 128, 31).unwrap();
        let mut adapter = LoraAdapter::init(16, 128, 4, 4.0, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        adapter.b.mapv_inplace(|_| 0.3 * (rng.random::<f64>() - 0.5));
        let merged = lora_merge(&enc, &adapter).unwrap();
        for trial in 0..20 {
            let x = random_unit_features(128, 100 + trial);
            let a = encode(&x, &enc, Some(&adapter)).unwrap();
            let b = encode(&x, &merged, None).unwrap();
            for (ai, bi) in a.iter().zip(b.iter()) {
                assert!((ai - bi).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn merge_is_not_idempotent() {
        let enc = LinearEncoder::init(8, 64, 41).unwrap();
        let mut adapter = LoraAdapter::init(8, 64, 2, 2.0, 42).unwrap();
        adapter.b.fill(0.1);
        let once = lora_merge(&enc, &adapter).unwrap();
        let twice = lora_merge(&once, &adapter).unwrap();
        assert_ne!(once.weight(), twice.weight());
    }

    #[test]
    fn rank_bounds_enforced() {
        assert!(LoraAdapter::init(8, 64, 0, 1.0, 1).is_err());
        assert!(LoraAdapter::init(8, 64, 9, 9.0, 1).is_err());
        assert!(LoraAdapter::init(8, 64, 8, 8.0, 1).is_ok());
    }

    #[test]
    fn init_rows_have_near_unit_norm() {
        let enc = LinearEncoder::init(8, 2048, 7).unwrap();
        for row in enc.weight().rows() {
            let norm = row.dot(&row).sqrt();
            assert!((norm - 1.0).abs() < 0.2, "row norm {norm}");
        }
    }

    #[test]
    fn encoder_pair_differs_and_is_seeded() {
        let (img_a, txt_a) = init_encoders(8, 64, 5).unwrap();
        let (img_b, _) = init_encoders(8, 64, 5).unwrap();
        let (img_c, _) = init_encoders(8, 64, 6).unwrap();
        assert_eq!(img_a.weight(), img_b.weight());
        assert_ne!(img_a.weight(), txt_a.weight());
        assert_ne!(img_a.weight(), img_c.weight());
    }

    #[test]
    fn weights_are_f32_representable() {
        let enc = LinearEncoder::init(8, 64, 9).unwrap();
        for &v in enc.weight().iter() {
            assert_eq!(v, v as f32 as f64);
        }
    }

    #[test]
    fn zero_input_is_degenerate() {
        let enc = LinearEncoder::init(8, 64, 1).unwrap();
        let x = vec![0.0; 64];
        assert!(matches!(
            encode(&x, &enc, None),
            Err(Error::DegenerateOutput { .. })
        ));
    }

    #[test]
    fn encode_output_is_unit_norm() {
        let enc = LinearEncoder::init(8, 64, 2).unwrap();
        for trial in 0..10 {
            let x = random_unit_features(64, 200 + trial);
            let y = encode(&x, &enc, None).unwrap();
            assert!((y.dot(&y).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_weight_checksum_is_stable() {
        let mut enc = LinearEncoder::init(8, 64, 3).unwrap();
        let before = enc.checksum();
        let x = random_unit_features(64, 4);
        let _ = encode(&x, &enc, None).unwrap();
        assert_eq!(enc.checksum(), before);
        assert!(enc.weight_mut().is_err());
        enc.set_frozen(false);
        enc.weight_mut().unwrap()[[0, 0]] += 1.0;
        assert_ne!(enc.checksum(), before);
    }

    #[test]
    fn shape_mismatch_reported() {
        let enc = LinearEncoder::init(8, 64, 1).unwrap();
        let adapter = LoraAdapter::init(8, 32, 4, 4.0, 2).unwrap();
        assert!(matches!(
            lora_merge(&enc, &adapter),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
