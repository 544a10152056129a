//! Toy differentiable encoders.
//!
//! The image encoder is the identity on pre-extracted features followed by
//! L2 normalization (the image branch carries no parameters). Text encoders
//! are a token-embedding mean pool, a single linear projection and an L2
//! norm; small enough that the backward pass is hand-derivable, rich enough
//! that every loss term has a nonzero gradient path.
//!
//! The "no" text encoder is a trainable deep copy of the frozen standard
//! encoder. In learnable mode it prepends `P` learnable prompt token
//! vectors to the class-text token embeddings before pooling.

use crate::numkernel::{self, EmbeddingMatrix, Matrix, NumError};
use crate::prompt::TokenSequence;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("token id {id} out of range for embedding table with {rows} rows")]
    BadTokenId { id: usize, rows: usize },
    #[error("learnable mode requires at least one no-prompt token")]
    MissingNoPromptTokens,
    #[error(transparent)]
    Num(#[from] NumError),
}

/// How the "no" text input is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    /// The full negated string is tokenized and encoded like standard text.
    Handcrafted,
    /// Learnable prompt tokens are prepended to the class-text embeddings.
    Learnable,
}

/// Tensor dimensions for an encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    /// Embedding table rows (vocabulary capacity).
    pub vocab_rows: usize,
    /// Token embedding width.
    pub token_dim: usize,
    /// Output feature dimension.
    pub feature_dim: usize,
    /// Number of learnable no-prompt tokens.
    pub no_prompt_len: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims { vocab_rows: 256, token_dim: 16, feature_dim: 16, no_prompt_len: 4 }
    }
}

/// Which tensors a training step may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainableMask {
    pub embedding_table: bool,
    pub projection: bool,
    pub no_prompt_tokens: bool,
    pub log_tau: bool,
}

impl TrainableMask {
    pub const FROZEN: TrainableMask = TrainableMask {
        embedding_table: false,
        projection: false,
        no_prompt_tokens: false,
        log_tau: false,
    };
    pub const ALL: TrainableMask = TrainableMask {
        embedding_table: true,
        projection: true,
        no_prompt_tokens: true,
        log_tau: true,
    };
}

pub const DEFAULT_LOG_TAU: f64 = -2.659_260_036_932_778; // ln(0.07)

/// Parameters of one text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// Token embedding table, vocab_rows x token_dim.
    pub embedding_table: Matrix,
    /// Linear projection, token_dim x feature_dim.
    pub projection: Matrix,
    /// Learnable no-prompt token vectors, no_prompt_len x token_dim.
    /// Zero rows on encoders that never run in learnable mode.
    pub no_prompt_tokens: Matrix,
    /// Temperature is exp(log_tau), always positive.
    pub log_tau: f64,
    pub trainable: TrainableMask,
}

impl EncoderParams {
    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            vocab_rows: self.embedding_table.rows(),
            token_dim: self.embedding_table.cols(),
            feature_dim: self.projection.cols(),
            no_prompt_len: self.no_prompt_tokens.rows(),
        }
    }

    /// Frozen encoder with all-zero tensors; a blank slate for constructions.
    pub fn zeros(dims: EncoderDims) -> Self {
        EncoderParams {
            embedding_table: Matrix::zeros(dims.vocab_rows, dims.token_dim),
            projection: Matrix::zeros(dims.token_dim, dims.feature_dim),
            no_prompt_tokens: Matrix::zeros(0, dims.token_dim),
            log_tau: DEFAULT_LOG_TAU,
            trainable: TrainableMask::FROZEN,
        }
    }

    /// Seeded Gaussian parameters; used by gradient-check fixtures.
    pub fn random(seed: u64, dims: EncoderDims) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |m: &mut Matrix, scale: f64| {
            for v in m.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = scale * z;
            }
        };
        let mut embedding = Matrix::zeros(dims.vocab_rows, dims.token_dim);
        let mut projection = Matrix::zeros(dims.token_dim, dims.feature_dim);
        let mut sigma = Matrix::zeros(dims.no_prompt_len, dims.token_dim);
        fill(&mut embedding, 0.5);
        fill(&mut projection, 1.0 / (dims.token_dim as f64).sqrt());
        fill(&mut sigma, 0.5);
        EncoderParams {
            embedding_table: embedding,
            projection,
            no_prompt_tokens: sigma,
            log_tau: DEFAULT_LOG_TAU,
            trainable: TrainableMask::ALL,
        }
    }

    /// Builds a frozen standard encoder whose class-prompt features land on
    /// the given anchor directions, standing in for a pre-trained text
    /// encoder at desk scale. Rows of the embedding table for class-name
    /// tokens are set to the anchor (truncated or zero-padded to the token
    /// width); all other words embed to zero, so mean pooling followed by
    /// the identity-like projection and L2 norm reproduces the anchor for
    /// any prompt wrapped around the class name.
    pub fn standard_from_class_anchors(
        class_token_ids: &[Vec<usize>],
        anchors: &[Vec<f64>],
        dims: EncoderDims,
    ) -> Result<Self, EncoderError> {
        let mut params = EncoderParams::zeros(dims);
        for (t, d) in (0..dims.token_dim.min(dims.feature_dim)).map(|i| (i, i)) {
            params.projection.set(t, d, 1.0);
        }
        for (ids, anchor) in class_token_ids.iter().zip(anchors) {
            for &id in ids {
                if id >= dims.vocab_rows {
                    return Err(EncoderError::BadTokenId { id, rows: dims.vocab_rows });
                }
                let row = params.embedding_table.row_mut(id);
                for (k, slot) in row.iter_mut().enumerate() {
                    *slot = if k < anchor.len() { anchor[k] } else { 0.0 };
                }
            }
        }
        Ok(params)
    }
}

/// Unit-normalized per-class means of feature banks; the anchor directions
/// a pre-trained encoder would assign to each class at desk scale.
pub fn class_anchors(banks: &[EmbeddingMatrix]) -> Result<Vec<Vec<f64>>, EncoderError> {
    banks
        .iter()
        .map(|bank| {
            let dim = bank.dim();
            let mut mean = vec![0.0; dim];
            for i in 0..bank.rows() {
                for (acc, v) in mean.iter_mut().zip(bank.row(i)) {
                    *acc += v;
                }
            }
            for v in mean.iter_mut() {
                *v /= bank.rows() as f64;
            }
            Ok(numkernel::l2_normalize(&mean)?)
        })
        .collect()
}

/// Forward-pass result with the intermediates the backward pass needs.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Unit-norm feature, length feature_dim.
    pub feature: Vec<f64>,
    /// Mean of contributing token vectors, length token_dim.
    pub pooled: Vec<f64>,
    /// pooled x projection before normalization, length feature_dim.
    pub prenorm: Vec<f64>,
    /// Token ids that contributed to the pool, in order.
    pub token_ids: Vec<usize>,
    /// Whether the learnable no-prompt rows were part of the pool.
    pub used_no_prompts: bool,
}

impl EncoderOutput {
    /// Number of vectors averaged in the pool.
    pub fn pool_count(&self, params: &EncoderParams) -> usize {
        self.token_ids.len()
            + if self.used_no_prompts { params.no_prompt_tokens.rows() } else { 0 }
    }
}

/// The image branch: L2 normalization of a pre-extracted feature vector.
pub fn encode_image(x: &[f64]) -> Result<Vec<f64>, EncoderError> {
    Ok(numkernel::l2_normalize(x)?)
}

/// Standard text forward pass: mean of token embeddings, projected,
/// normalized.
pub fn encode_text(
    tokens: &TokenSequence,
    params: &EncoderParams,
) -> Result<EncoderOutput, EncoderError> {
    forward(tokens, params, false)
}

/// "No" text forward pass. Handcrafted mode is exactly [`encode_text`] on
/// the negated string; learnable mode pools the no-prompt rows together
/// with the class-text token embeddings.
pub fn encode_no_text(
    tokens: &TokenSequence,
    params: &EncoderParams,
    mode: PromptMode,
) -> Result<EncoderOutput, EncoderError> {
    match mode {
        PromptMode::Handcrafted => forward(tokens, params, false),
        PromptMode::Learnable => {
            if params.no_prompt_tokens.rows() == 0 {
                return Err(EncoderError::MissingNoPromptTokens);
            }
            forward(tokens, params, true)
        }
    }
}

fn forward(
    tokens: &TokenSequence,
    params: &EncoderParams,
    with_no_prompts: bool,
) -> Result<EncoderOutput, EncoderError> {
    let table = &params.embedding_table;
    for &id in &tokens.ids {
        if id >= table.rows() {
            return Err(EncoderError::BadTokenId { id, rows: table.rows() });
        }
    }
    let token_dim = table.cols();
    let mut pooled = vec![0.0; token_dim];
    let mut count = 0usize;
    if with_no_prompts {
        for p in 0..params.no_prompt_tokens.rows() {
            for (acc, v) in pooled.iter_mut().zip(params.no_prompt_tokens.row(p)) {
                *acc += v;
            }
            count += 1;
        }
    }
    for &id in &tokens.ids {
        for (acc, v) in pooled.iter_mut().zip(table.row(id)) {
            *acc += v;
        }
        count += 1;
    }
    for v in pooled.iter_mut() {
        *v /= count as f64;
    }
    let mut prenorm = vec![0.0; params.projection.cols()];
    for (t, pv) in pooled.iter().enumerate() {
        for (d, out) in prenorm.iter_mut().enumerate() {
            *out += pv * params.projection.get(t, d);
        }
    }
    let feature = numkernel::l2_normalize(&prenorm)?;
    Ok(EncoderOutput {
        feature,
        pooled,
        prenorm,
        token_ids: tokens.ids.clone(),
        used_no_prompts: with_no_prompts,
    })
}

/// Deep-copies the standard encoder into a trainable "no" encoder. The
/// learnable prompt tokens are initialized to the mean of the handcrafted
/// negative-keyword embeddings; log_tau is shared by value.
pub fn init_no_encoder(
    standard: &EncoderParams,
    negative_keyword_ids: &[usize],
    no_prompt_len: usize,
) -> EncoderParams {
    let token_dim = standard.embedding_table.cols();
    let mut seed_row = vec![0.0; token_dim];
    if !negative_keyword_ids.is_empty() {
        for &id in negative_keyword_ids {
            let row = standard.embedding_table.row(id.min(standard.embedding_table.rows() - 1));
            for (acc, v) in seed_row.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for v in seed_row.iter_mut() {
            *v /= negative_keyword_ids.len() as f64;
        }
    }
    let mut sigma = Matrix::zeros(no_prompt_len, token_dim);
    for p in 0..no_prompt_len {
        sigma.row_mut(p).copy_from_slice(&seed_row);
    }
    EncoderParams {
        embedding_table: standard.embedding_table.clone(),
        projection: standard.projection.clone(),
        no_prompt_tokens: sigma,
        log_tau: standard.log_tau,
        trainable: TrainableMask::ALL,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::norm;

    fn identity_params(vocab_rows: usize, dim: usize) -> EncoderParams {
        let dims = EncoderDims {
            vocab_rows,
            token_dim: dim,
            feature_dim: dim,
            no_prompt_len: 0,
        };
        let mut p = EncoderParams::zeros(dims);
        for i in 0..dim {
            p.projection.set(i, i, 1.0);
        }
        p
    }

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence { ids: ids.to_vec() }
    }

    #[test]
    fn image_encoder_normalizes() {
        let f = encode_image(&[3.0, 4.0]).unwrap();
        assert!((f[0] - 0.6).abs() < 1e-15 && (f[1] - 0.8).abs() < 1e-15);
        let u = encode_image(&[1.0, 0.0]).unwrap();
        assert_eq!(u, vec![1.0, 0.0]);
        assert!(matches!(
            encode_image(&[0.0, 0.0]),
            Err(EncoderError::Num(NumError::ZeroVector))
        ));
    }

    #[test]
    fn single_token_identity_projection() {
        let mut p = identity_params(4, 3);
        p.embedding_table.row_mut(2).copy_from_slice(&[3.0, 0.0, 4.0]);
        let out = encode_text(&seq(&[2]), &p).unwrap();
        assert!((out.feature[0] - 0.6).abs() < 1e-15);
        assert!((out.feature[2] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn repeated_token_mean_idempotent() {
        let mut p = identity_params(4, 3);
        p.embedding_table.row_mut(1).copy_from_slice(&[0.2, -1.0, 0.5]);
        let one = encode_text(&seq(&[1]), &p).unwrap();
        let two = encode_text(&seq(&[1, 1]), &p).unwrap();
        for (a, b) in one.feature.iter().zip(&two.feature) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn two_token_mean_definition() {
        let mut p = identity_params(4, 2);
        p.embedding_table.row_mut(0).copy_from_slice(&[1.0, 0.0]);
        p.embedding_table.row_mut(1).copy_from_slice(&[0.0, 1.0]);
        let out = encode_text(&seq(&[0, 1]), &p).unwrap();
        let expect = numkernel::l2_normalize(&[0.5, 0.5]).unwrap();
        assert_eq!(out.feature, expect);
        assert_eq!(out.pooled, vec![0.5, 0.5]);
    }

    #[test]
    fn bad_token_id_rejected() {
        let p = identity_params(2, 2);
        assert_eq!(
            encode_text(&seq(&[5]), &p).unwrap_err(),
            EncoderError::BadTokenId { id: 5, rows: 2 }
        );
    }

    #[test]
    fn learnable_equals_prefixed_tokens() {
        // P=1 with sigma equal to the embedding of token 3 ("without")
        let mut p = identity_params(8, 4);
        for (i, row) in [
            [0.3, 0.1, -0.2, 0.0],
            [0.0, 0.9, 0.0, 0.1],
            [-0.5, 0.2, 0.7, 0.3],
            [0.4, -0.4, 0.25, 0.6],
        ]
        .iter()
        .enumerate()
        {
            p.embedding_table.row_mut(i).copy_from_slice(row);
        }
        let mut learnable = p.clone();
        learnable.no_prompt_tokens = Matrix::zeros(1, 4);
        learnable
            .no_prompt_tokens
            .row_mut(0)
            .copy_from_slice(p.embedding_table.row(3));

        let class_tokens = seq(&[0, 1]);
        let via_sigma =
            encode_no_text(&class_tokens, &learnable, PromptMode::Learnable).unwrap();
        let via_tokens = encode_text(&seq(&[3, 0, 1]), &p).unwrap();
        for (a, b) in via_sigma.feature.iter().zip(&via_tokens.feature) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn handcrafted_delegates_to_encode_text() {
        let p = EncoderParams::random(3, EncoderDims::default());
        let t = seq(&[1, 2, 3, 4]);
        let a = encode_no_text(&t, &p, PromptMode::Handcrafted).unwrap();
        let b = encode_text(&t, &p).unwrap();
        assert_eq!(a.feature, b.feature);
    }

    #[test]
    fn learnable_without_prompt_rows_errors() {
        let p = identity_params(4, 2); // no_prompt_len = 0
        assert_eq!(
            encode_no_text(&seq(&[0]), &p, PromptMode::Learnable).unwrap_err(),
            EncoderError::MissingNoPromptTokens
        );
    }

    #[test]
    fn init_copies_and_marks_trainable() {
        let std_params = EncoderParams::random(7, EncoderDims::default());
        let std_frozen = EncoderParams { trainable: TrainableMask::FROZEN, ..std_params };
        let no_params = init_no_encoder(&std_frozen, &[5, 9], 4);

        assert_eq!(no_params.embedding_table, std_frozen.embedding_table);
        assert_eq!(no_params.projection, std_frozen.projection);
        assert_eq!(no_params.log_tau, std_frozen.log_tau);
        assert!(no_params.trainable.embedding_table);
        assert!(no_params.trainable.projection);
        assert!(no_params.trainable.no_prompt_tokens);
        assert!(no_params.trainable.log_tau);
        assert_eq!(std_frozen.trainable, TrainableMask::FROZEN);

        // before any training step the handcrafted no branch equals the
        // standard branch on the same tokens
        let t = seq(&[2, 5, 9]);
        let a = encode_no_text(&t, &no_params, PromptMode::Handcrafted).unwrap();
        let b = encode_text(&t, &std_frozen).unwrap();
        assert_eq!(a.feature, b.feature);
    }

    #[test]
    fn sigma_init_is_keyword_mean() {
        let std_params = EncoderParams::random(11, EncoderDims::default());
        let ids = [3usize, 17, 42];
        let no_params = init_no_encoder(&std_params, &ids, 2);
        let dim = std_params.embedding_table.cols();
        for k in 0..dim {
            let mean: f64 =
                ids.iter().map(|&i| std_params.embedding_table.get(i, k)).sum::<f64>() / 3.0;
            for p in 0..2 {
                assert!((no_params.no_prompt_tokens.get(p, k) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn outputs_are_unit_norm() {
        let p = EncoderParams::random(13, EncoderDims::default());
        for s in 0..20u64 {
            let t = seq(&[(s as usize) % 256, (3 * s as usize + 1) % 256]);
            let out = encode_text(&t, &p).unwrap();
            assert!((norm(&out.feature) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn anchor_construction_reproduces_anchor() {
        let dims = EncoderDims { vocab_rows: 16, token_dim: 4, feature_dim: 4, no_prompt_len: 0 };
        let anchor = numkernel::l2_normalize(&[0.5, -0.5, 0.5, 0.5]).unwrap();
        let p = EncoderParams::standard_from_class_anchors(
            &[vec![7]],
            std::slice::from_ref(&anchor),
            dims,
        )
        .unwrap();
        // template words embed to zero, so any prompt around the class
        // token lands on the anchor
        let out = encode_text(&seq(&[0, 0, 7]), &p).unwrap();
        for (a, b) in out.feature.iter().zip(&anchor) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
