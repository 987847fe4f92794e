//! The contrastive loss family: symmetric InfoNCE over caption-image pairs
//! (`clip`), the hard-negative extension with twin captions in the
//! denominator (`negclip`), the two-sided twin composition (`tripletclip`),
//! and the concept-anchored objective that mixes a caption branch with a
//! concept branch (`cultureclip`). Values and analytic gradients come from
//! the same pass; no autodiff anywhere.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Fixed softmax temperature used by every run unless overridden.
pub const DEFAULT_TAU: f64 = 0.07;
/// Caption-branch weight for the concept-anchored objective.
pub const DEFAULT_LAMBDA_CAPTION: f64 = 0.3;
/// Concept-branch weight for the concept-anchored objective.
pub const DEFAULT_LAMBDA_CONCEPT: f64 = 0.7;

/// Temperature and branch weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_caption: f64,
    pub lambda_concept: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: DEFAULT_TAU,
            lambda_caption: DEFAULT_LAMBDA_CAPTION,
            lambda_concept: DEFAULT_LAMBDA_CONCEPT,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::NonPositiveTau(self.tau));
        }
        if self.lambda_caption < 0.0 || self.lambda_concept < 0.0 {
            return Err(Error::BadConfig(
                "branch weights must be nonnegative".into(),
            ));
        }
        if self.lambda_caption + self.lambda_concept <= 0.0 {
            return Err(Error::BadConfig(
                "at least one branch weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// The six embedding roles a twin-card batch provides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    ImagePos,
    ImageNeg,
    TextPos,
    TextNeg,
    ConceptPos,
    ConceptNeg,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::ImagePos,
        Role::ImageNeg,
        Role::TextPos,
        Role::TextNeg,
        Role::ConceptPos,
        Role::ConceptNeg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::ImagePos => "image_pos",
            Role::ImageNeg => "image_neg",
            Role::TextPos => "text_pos",
            Role::TextNeg => "text_neg",
            Role::ConceptPos => "concept_pos",
            Role::ConceptNeg => "concept_neg",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which loss a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[value(name = "clip")]
    Clip,
    #[value(name = "negclip")]
    NegClip,
    #[value(name = "tripletclip")]
    TripletClip,
    #[value(name = "cultureclip")]
    CultureClip,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Clip => "clip",
            LossKind::NegClip => "negclip",
            LossKind::TripletClip => "tripletclip",
            LossKind::CultureClip => "cultureclip",
        }
    }

    /// The roles this loss reads (and produces gradients for).
    pub fn roles(self) -> &'static [Role] {
        match self {
            LossKind::Clip => &[Role::ImagePos, Role::TextPos],
            LossKind::NegClip => &[Role::ImagePos, Role::TextPos, Role::TextNeg],
            LossKind::TripletClip => &[
                Role::ImagePos,
                Role::ImageNeg,
                Role::TextPos,
                Role::TextNeg,
            ],
            LossKind::CultureClip => &Role::ALL,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// N x d embeddings for all six roles of a batch of twin cards.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub image_pos: Array2<f64>,
    pub image_neg: Array2<f64>,
    pub text_pos: Array2<f64>,
    pub text_neg: Array2<f64>,
    pub concept_pos: Array2<f64>,
    pub concept_neg: Array2<f64>,
}

impl EmbeddingBatch {
    /// Validate shape agreement and row norms (construction-time only; loss
    /// functions accept raw perturbed rows for finite-difference checks).
    pub fn new(
        image_pos: Array2<f64>,
        image_neg: Array2<f64>,
        text_pos: Array2<f64>,
        text_neg: Array2<f64>,
        concept_pos: Array2<f64>,
        concept_neg: Array2<f64>,
    ) -> Result<Self> {
        let batch = EmbeddingBatch {
            image_pos,
            image_neg,
            text_pos,
            text_neg,
            concept_pos,
            concept_neg,
        };
        let (n, d) = (batch.n(), batch.dim());
        if n == 0 {
            return Err(Error::InvariantViolation("embedding batch is empty".into()));
        }
        for role in Role::ALL {
            let m = batch.role(role);
            if m.nrows() != n || m.ncols() != d {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: m.nrows(),
                    context: format!("rows of role {role}"),
                });
            }
            for (i, row) in m.rows().into_iter().enumerate() {
                let norm = row.dot(&row).sqrt();
                if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::InvariantViolation(format!(
                        "role {role} row {i} has norm {norm}, expected unit"
                    )));
                }
            }
        }
        Ok(batch)
    }

    /// Assemble from a role-keyed map; every role must be present.
    pub fn from_role_map(mut map: BTreeMap<Role, Array2<f64>>) -> Result<Self> {
        let mut take = |role: Role| {
            map.remove(&role)
                .ok_or_else(|| Error::MissingRole(role.as_str().into()))
        };
        let image_pos = take(Role::ImagePos)?;
        let image_neg = take(Role::ImageNeg)?;
        let text_pos = take(Role::TextPos)?;
        let text_neg = take(Role::TextNeg)?;
        let concept_pos = take(Role::ConceptPos)?;
        let concept_neg = take(Role::ConceptNeg)?;
        EmbeddingBatch::new(
            image_pos,
            image_neg,
            text_pos,
            text_neg,
            concept_pos,
            concept_neg,
        )
    }

    pub fn n(&self) -> usize {
        self.image_pos.nrows()
    }

    pub fn dim(&self) -> usize {
        self.image_pos.ncols()
    }

    pub fn role(&self, role: Role) -> &Array2<f64> {
        match role {
            Role::ImagePos => &self.image_pos,
            Role::ImageNeg => &self.image_neg,
            Role::TextPos => &self.text_pos,
            Role::TextNeg => &self.text_neg,
            Role::ConceptPos => &self.concept_pos,
            Role::ConceptNeg => &self.concept_neg,
        }
    }

    pub fn role_mut(&mut self, role: Role) -> &mut Array2<f64> {
        match role {
            Role::ImagePos => &mut self.image_pos,
            Role::ImageNeg => &mut self.image_neg,
            Role::TextPos => &mut self.text_pos,
            Role::TextNeg => &mut self.text_neg,
            Role::ConceptPos => &mut self.concept_pos,
            Role::ConceptNeg => &mut self.concept_neg,
        }
    }
}

/// Loss value plus per-role gradients w.r.t. the input embeddings.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grads: BTreeMap<Role, Array2<f64>>,
}

/// Pairwise dot products, one row per row of `a`. The summation order is
/// pinned (ascending k) so transposed calls are bitwise symmetric.
pub fn similarity(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.ncols(),
            got: b.ncols(),
            context: "similarity embedding width".into(),
        });
    }
    let (n, m, d) = (a.nrows(), b.nrows(), a.ncols());
    let mut s = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for k in 0..d {
                acc += a[[i, k]] * b[[j, k]];
            }
            s[[i, j]] = acc;
        }
    }
    Ok(s)
}

/// Row softmax with per-row max subtraction.
pub fn row_softmax(scaled: &Array2<f64>) -> Array2<f64> {
    let mut out = scaled.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Per-row log-sum-exp with max subtraction.
fn row_lse(scaled: &Array2<f64>) -> Vec<f64> {
    scaled
        .rows()
        .into_iter()
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            max + sum.ln()
        })
        .collect()
}

fn check_matched(n: usize, other: &Array2<f64>, what: &str) -> Result<()> {
    if other.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: other.nrows(),
            context: format!("batch rows of {what}"),
        });
    }
    if n == 0 {
        return Err(Error::InvariantViolation("loss batch is empty".into()));
    }
    Ok(())
}

/// Symmetric InfoNCE: mean row cross-entropy (image to text) plus mean column
/// cross-entropy (text to image), each against the diagonal.
pub fn clip_loss(psi_image: &Array2<f64>, psi_text: &Array2<f64>, tau: f64) -> Result<LossOutput> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTau(tau));
    }
    check_matched(psi_image.nrows(), psi_text, "text")?;
    let n = psi_image.nrows();
    let s = similarity(psi_image, psi_text)?;
    let scaled = s.mapv(|v| v / tau);

    let p = row_softmax(&scaled); // image -> text, row-stochastic
    let q_t = row_softmax(&scaled.t().to_owned()); // text -> image, rows index texts
    let row_terms = row_lse(&scaled);
    let col_terms = row_lse(&scaled.t().to_owned());

    // the two directional sums are accumulated separately and added once, so
    // swapping the operands (which transposes S) gives a bitwise-equal value
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for i in 0..n {
        i2t += row_terms[i] - scaled[[i, i]];
        t2i += col_terms[i] - scaled[[i, i]];
    }
    let value = (i2t + t2i) / n as f64;

    // dL/dS = (P + Q - 2I) / (N tau), with Q = column softmax
    let mut ds = Array2::zeros((n, n));
    let coef = 1.0 / (n as f64 * tau);
    for i in 0..n {
        for j in 0..n {
            let mut v = p[[i, j]] + q_t[[j, i]];
            if i == j {
                v -= 2.0;
            }
            ds[[i, j]] = v * coef;
        }
    }
    let g_image = ds.dot(psi_text);
    let g_text = ds.t().dot(psi_image);

    let mut grads = BTreeMap::new();
    grads.insert(Role::ImagePos, g_image);
    grads.insert(Role::TextPos, g_text);
    Ok(LossOutput { value, grads })
}

/// Value and positional gradients for one hard-negative InfoNCE direction
/// pair: rows rank the matching text against N in-batch positives plus N
/// twin negatives (treated uniformly in the denominator), columns are plain
/// text-to-image InfoNCE over the positives.
struct NegClipParts {
    value: f64,
    g_image: Array2<f64>,
    g_text_pos: Array2<f64>,
    g_text_neg: Array2<f64>,
}

fn negclip_parts(
    psi_image: &Array2<f64>,
    psi_text_pos: &Array2<f64>,
    psi_text_neg: &Array2<f64>,
    tau: f64,
) -> Result<NegClipParts> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTau(tau));
    }
    let n = psi_image.nrows();
    check_matched(n, psi_text_pos, "text positives")?;
    check_matched(n, psi_text_neg, "text negatives")?;

    let s_pos = similarity(psi_image, psi_text_pos)?;
    let s_neg = similarity(psi_image, psi_text_neg)?;

    // extended candidate matrix [S+ | S-] scaled by 1/tau
    let mut ext = Array2::zeros((n, 2 * n));
    for i in 0..n {
        for j in 0..n {
            ext[[i, j]] = s_pos[[i, j]] / tau;
            ext[[i, n + j]] = s_neg[[i, j]] / tau;
        }
    }
    let p_ext = row_softmax(&ext);
    let ext_lse = row_lse(&ext);

    let scaled_pos = s_pos.mapv(|v| v / tau);
    let q_t = row_softmax(&scaled_pos.t().to_owned());
    let col_terms = row_lse(&scaled_pos.t().to_owned());

    let mut value = 0.0;
    for i in 0..n {
        value += ext_lse[i] - scaled_pos[[i, i]]; // image -> text with negatives
        value += col_terms[i] - scaled_pos[[i, i]]; // text -> image, positives only
    }
    value /= n as f64;

    let coef = 1.0 / (n as f64 * tau);
    // dL/dS+ = (P_ext[:, :N] + Q - 2I) coef ; dL/dS- = P_ext[:, N:] coef
    let mut ds_pos = Array2::zeros((n, n));
    let mut ds_neg = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut v = p_ext[[i, j]] + q_t[[j, i]];
            if i == j {
                v -= 2.0;
            }
            ds_pos[[i, j]] = v * coef;
            ds_neg[[i, j]] = p_ext[[i, n + j]] * coef;
        }
    }
    let g_image = ds_pos.dot(psi_text_pos) + ds_neg.dot(psi_text_neg);
    let g_text_pos = ds_pos.t().dot(psi_image);
    let g_text_neg = ds_neg.t().dot(psi_image);
    Ok(NegClipParts {
        value,
        g_image,
        g_text_pos,
        g_text_neg,
    })
}

/// Hard-negative InfoNCE for the positive sides of a batch.
pub fn negclip_loss(
    psi_image: &Array2<f64>,
    psi_text_pos: &Array2<f64>,
    psi_text_neg: &Array2<f64>,
    tau: f64,
) -> Result<LossOutput> {
    let parts = negclip_parts(psi_image, psi_text_pos, psi_text_neg, tau)?;
    let mut grads = BTreeMap::new();
    grads.insert(Role::ImagePos, parts.g_image);
    grads.insert(Role::TextPos, parts.g_text_pos);
    grads.insert(Role::TextNeg, parts.g_text_neg);
    Ok(LossOutput {
        value: parts.value,
        grads,
    })
}

/// Two-sided twin objective: hard-negative InfoNCE applied from the positive
/// side and again from the negative side with the roles exchanged.
pub fn tripletclip_loss(
    psi_image_pos: &Array2<f64>,
    psi_image_neg: &Array2<f64>,
    psi_text_pos: &Array2<f64>,
    psi_text_neg: &Array2<f64>,
    tau: f64,
) -> Result<LossOutput> {
    let fwd = negclip_parts(psi_image_pos, psi_text_pos, psi_text_neg, tau)?;
    let rev = negclip_parts(psi_image_neg, psi_text_neg, psi_text_pos, tau)?;
    let mut grads = BTreeMap::new();
    grads.insert(Role::ImagePos, fwd.g_image);
    grads.insert(Role::ImageNeg, rev.g_image);
    grads.insert(Role::TextPos, fwd.g_text_pos + rev.g_text_neg);
    grads.insert(Role::TextNeg, fwd.g_text_neg + rev.g_text_pos);
    Ok(LossOutput {
        value: fwd.value + rev.value,
        grads,
    })
}

/// Concept-anchored objective: a caption branch (two-sided hard-negative
/// InfoNCE over captions) and a concept branch (the same structure over
/// concept-name embeddings), mixed by the branch weights.
pub fn cultureclip_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let lt = cfg.lambda_caption;
    let lc = cfg.lambda_concept;
    let cap_fwd = negclip_parts(&batch.image_pos, &batch.text_pos, &batch.text_neg, cfg.tau)?;
    let cap_rev = negclip_parts(&batch.image_neg, &batch.text_neg, &batch.text_pos, cfg.tau)?;
    let con_fwd = negclip_parts(
        &batch.image_pos,
        &batch.concept_pos,
        &batch.concept_neg,
        cfg.tau,
    )?;
    let con_rev = negclip_parts(
        &batch.image_neg,
        &batch.concept_neg,
        &batch.concept_pos,
        cfg.tau,
    )?;

    let value = lt * (cap_fwd.value + cap_rev.value) + lc * (con_fwd.value + con_rev.value);

    let scale = |m: Array2<f64>, w: f64| m.mapv(|v| v * w);
    let mut grads = BTreeMap::new();
    grads.insert(
        Role::ImagePos,
        scale(cap_fwd.g_image, lt) + scale(con_fwd.g_image, lc),
    );
    grads.insert(
        Role::ImageNeg,
        scale(cap_rev.g_image, lt) + scale(con_rev.g_image, lc),
    );
    grads.insert(
        Role::TextPos,
        scale(cap_fwd.g_text_pos + cap_rev.g_text_neg, lt),
    );
    grads.insert(
        Role::TextNeg,
        scale(cap_fwd.g_text_neg + cap_rev.g_text_pos, lt),
    );
    grads.insert(
        Role::ConceptPos,
        scale(con_fwd.g_text_pos + con_rev.g_text_neg, lc),
    );
    grads.insert(
        Role::ConceptNeg,
        scale(con_fwd.g_text_neg + con_rev.g_text_pos, lc),
    );
    Ok(LossOutput { value, grads })
}

/// Dispatch a loss over the batch roles it consumes.
pub fn compute_loss(kind: LossKind, batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    match kind {
        LossKind::Clip => clip_loss(&batch.image_pos, &batch.text_pos, cfg.tau),
        LossKind::NegClip => negclip_loss(&batch.image_pos, &batch.text_pos, &batch.text_neg, cfg.tau),
        LossKind::TripletClip => tripletclip_loss(
            &batch.image_pos,
            &batch.image_neg,
            &batch.text_pos,
            &batch.text_neg,
            cfg.tau,
        ),
        LossKind::CultureClip => cultureclip_loss(batch, cfg),
    }
}

/// Central finite differences over every embedding coordinate of every role
/// the loss reads, against the analytic gradients. Returns the max relative
/// error, with the denominator floored so near-zero gradients stay
/// meaningful.
pub fn grad_check(
    kind: LossKind,
    batch: &EmbeddingBatch,
    cfg: &LossConfig,
    eps: f64,
) -> Result<f64> {
    let analytic = compute_loss(kind, batch, cfg)?;
    let mut work = batch.clone();
    let mut max_rel = 0.0f64;
    for &role in kind.roles() {
        let g = &analytic.grads[&role];
        let (n, d) = (g.nrows(), g.ncols());
        for i in 0..n {
            for j in 0..d {
                let orig = work.role(role)[[i, j]];
                work.role_mut(role)[[i, j]] = orig + eps;
                let fp = compute_loss(kind, &work, cfg)?.value;
                work.role_mut(role)[[i, j]] = orig - eps;
                let fm = compute_loss(kind, &work, cfg)?.value;
                work.role_mut(role)[[i, j]] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                let a = g[[i, j]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                max_rel = max_rel.max(rel);
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn random_unit_rows(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::from_shape_fn((n, d), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        for mut row in m.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        m
    }

    pub(crate) fn random_batch(n: usize, d: usize, seed: u64) -> EmbeddingBatch {
        EmbeddingBatch::new(
            random_unit_rows(n, d, seed),
            random_unit_rows(n, d, seed + 1),
            random_unit_rows(n, d, seed + 2),
            random_unit_rows(n, d, seed + 3),
            random_unit_rows(n, d, seed + 4),
            random_unit_rows(n, d, seed + 5),
        )
        .unwrap()
    }

    #[test]
    fn clip_identity_similarities() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let out = clip_loss(&e, &e, 1.0).unwrap();
        let expected = 2.0 * (-1.0f64).exp().ln_1p(); // 2 ln(1 + e^-1)
        assert!((out.value - expected).abs() < 1e-12);
        assert!((out.value - 0.6265233750364456).abs() < 1e-9);
    }

    #[test]
    fn clip_identical_embeddings_gives_log_n() {
        let e = array![[0.6, 0.8], [0.6, 0.8]];
        for tau in [0.07, 0.5, 1.0] {
            let out = clip_loss(&e, &e, tau).unwrap();
            assert!((out.value - 2.0 * 2.0f64.ln()).abs() < 1e-12, "tau {tau}");
        }
    }

    #[test]
    fn clip_single_pair_is_zero_with_zero_grads() {
        let i = array![[1.0, 0.0]];
        let t = array![[0.0, 1.0]];
        let out = clip_loss(&i, &t, 0.07).unwrap();
        assert_eq!(out.value, 0.0);
        for g in out.grads.values() {
            assert!(g.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn negclip_equal_candidates_single_pair() {
        let i = array![[1.0, 0.0]];
        let t = array![[1.0, 0.0]];
        let out = negclip_loss(&i, &t, &t.clone(), 1.0).unwrap();
        assert!((out.value - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn negclip_separated_single_pair() {
        let i = array![[1.0, 0.0]];
        let tp = array![[1.0, 0.0]];
        let tn = array![[-1.0, 0.0]];
        let out = negclip_loss(&i, &tp, &tn, 1.0).unwrap();
        let expected = (-2.0f64).exp().ln_1p(); // ln(1 + e^-2)
        assert!((out.value - expected).abs() < 1e-12);
        assert!((out.value - 0.1269280110429726).abs() < 1e-9);
    }

    #[test]
    fn negclip_dominates_clip() {
        for seed in 0..20 {
            let i = random_unit_rows(6, 8, 900 + seed);
            let tp = random_unit_rows(6, 8, 950 + seed);
            let tn = random_unit_rows(6, 8, 990 + seed);
            let base = clip_loss(&i, &tp, 0.07).unwrap().value;
            let hard = negclip_loss(&i, &tp, &tn, 0.07).unwrap().value;
            assert!(hard >= base, "seed {seed}: {hard} < {base}");
        }
    }

    #[test]
    fn clip_is_transpose_symmetric_bitwise() {
        for seed in 0..10 {
            let a = random_unit_rows(5, 8, 700 + seed);
            let b = random_unit_rows(5, 8, 770 + seed);
            let ab = clip_loss(&a, &b, 0.07).unwrap().value;
            let ba = clip_loss(&b, &a, 0.07).unwrap().value;
            assert_eq!(ab.to_bits(), ba.to_bits());
        }
    }

    #[test]
    fn twin_swap_leaves_symmetric_losses_unchanged() {
        let batch = random_batch(5, 8, 321);
        let swapped = EmbeddingBatch {
            image_pos: batch.image_neg.clone(),
            image_neg: batch.image_pos.clone(),
            text_pos: batch.text_neg.clone(),
            text_neg: batch.text_pos.clone(),
            concept_pos: batch.concept_neg.clone(),
            concept_neg: batch.concept_pos.clone(),
        };
        let cfg = LossConfig::default();
        let tri_a = compute_loss(LossKind::TripletClip, &batch, &cfg).unwrap().value;
        let tri_b = compute_loss(LossKind::TripletClip, &swapped, &cfg)
            .unwrap()
            .value;
        assert!((tri_a - tri_b).abs() < 1e-12);
        let cc_a = compute_loss(LossKind::CultureClip, &batch, &cfg).unwrap().value;
        let cc_b = compute_loss(LossKind::CultureClip, &swapped, &cfg)
            .unwrap()
            .value;
        assert!((cc_a - cc_b).abs() < 1e-12);
    }

    #[test]
    fn all_losses_nonnegative() {
        let cfg = LossConfig::default();
        for seed in 0..10 {
            let batch = random_batch(4, 8, 5000 + seed);
            for kind in [
                LossKind::Clip,
                LossKind::NegClip,
                LossKind::TripletClip,
                LossKind::CultureClip,
            ] {
                let v = compute_loss(kind, &batch, &cfg).unwrap().value;
                assert!(v >= 0.0, "{kind} value {v} negative");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = LossConfig::default();
        for kind in [
            LossKind::Clip,
            LossKind::NegClip,
            LossKind::TripletClip,
            LossKind::CultureClip,
        ] {
            let batch = random_batch(3, 5, 77);
            let err = grad_check(kind, &batch, &cfg, 1e-5).unwrap();
            assert!(err < 1e-4, "{kind} grad error {err}");
        }
    }

    #[test]
    fn lambda_weights_mix_linearly() {
        let batch = random_batch(4, 6, 99);
        let caption_only = LossConfig {
            tau: 0.07,
            lambda_caption: 1.0,
            lambda_concept: 0.0,
        };
        let concept_only = LossConfig {
            tau: 0.07,
            lambda_caption: 0.0,
            lambda_concept: 1.0,
        };
        let mixed = LossConfig {
            tau: 0.07,
            lambda_caption: 0.3,
            lambda_concept: 0.7,
        };
        let v_cap = cultureclip_loss(&batch, &caption_only).unwrap().value;
        let v_con = cultureclip_loss(&batch, &concept_only).unwrap().value;
        let v_mix = cultureclip_loss(&batch, &mixed).unwrap().value;
        assert!((v_mix - (0.3 * v_cap + 0.7 * v_con)).abs() < 1e-12);
    }

    #[test]
    fn tau_must_be_positive() {
        let e = array![[1.0, 0.0]];
        assert!(matches!(
            clip_loss(&e, &e, 0.0),
            Err(Error::NonPositiveTau(_))
        ));
        assert!(matches!(
            clip_loss(&e, &e, -0.5),
            Err(Error::NonPositiveTau(_))
        ));
    }

    #[test]
    fn mismatched_rows_rejected() {
        let a = random_unit_rows(3, 4, 1);
        let b = random_unit_rows(2, 4, 2);
        assert!(matches!(
            clip_loss(&a, &b, 0.07),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn mismatched_width_rejected() {
        let a = random_unit_rows(3, 4, 1);
        let b = random_unit_rows(3, 6, 2);
        assert!(similarity(&a, &b).is_err());
    }

    #[test]
    fn role_map_requires_all_roles() {
        let mut map = BTreeMap::new();
        map.insert(Role::ImagePos, random_unit_rows(2, 4, 1));
        match EmbeddingBatch::from_role_map(map) {
            Err(Error::MissingRole(r)) => assert_eq!(r, "image_neg"),
            other => panic!("expected MissingRole, got {other:?}"),
        }
    }

    #[test]
    fn batch_rejects_non_unit_rows() {
        let mut m = random_unit_rows(2, 4, 1);
        m[[0, 0]] += 0.5;
        let u = random_unit_rows(2, 4, 2);
        assert!(EmbeddingBatch::new(
            m,
            u.clone(),
            u.clone(),
            u.clone(),
            u.clone(),
            u.clone()
        )
        .is_err());
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_stochastic(seed in 0u64..500, n in 1usize..8, scale in 0.1f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Array2::from_shape_fn((n, n + 2), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            });
            let p = row_softmax(&logits);
            for row in p.rows() {
                let sum: f64 = row.sum();
                proptest::prop_assert!((sum - 1.0).abs() < 1e-9);
                proptest::prop_assert!(row.iter().all(|v| *v >= 0.0));
            }
        }

        #[test]
        fn temperature_preserves_row_ranking(seed in 0u64..200) {
            let i = random_unit_rows(4, 6, seed);
            let t = random_unit_rows(4, 6, seed + 1000);
            let s = similarity(&i, &t).unwrap();
            let argmax = |m: &Array2<f64>| -> Vec<usize> {
                m.rows()
                    .into_iter()
                    .map(|r| {
                        r.iter()
                            .enumerate()
                            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                            .unwrap()
                            .0
                    })
                    .collect()
            };
            let base = argmax(&s);
            for tau in [0.05, 0.5, 5.0] {
                let p = row_softmax(&s.mapv(|v| v / tau));
                proptest::prop_assert_eq!(&argmax(&p), &base);
            }
        }
    }
}
