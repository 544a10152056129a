//! Training losses, analytic gradients and the gradient-descent loop.
//!
//! The image-text binary-opposite loss (ITBO) trains a binary softmax
//! between the standard and "no" text branch per image: the diagonal pair
//! (an image with its own "no" text) is reversed-matched and pushed toward
//! p_no = 0, every off-diagonal pair is matched-yet-unrelated and pushed
//! toward p_no = 1. The text semantic-opposite loss (TSO) pushes each
//! standard/"no" feature pair toward antipodal directions; its per-sample
//! value 2 - ||g - g_no|| reaches 0 exactly at opposite directions and 2
//! at identical ones.
//!
//! The backward pass is hand-derived and checked against central finite
//! differences; see [`grad_check`].

use crate::encoder::{
    self, EncoderOutput, EncoderParams, PromptMode,
};
use crate::numkernel::{
    self, dot, log_sigmoid, norm, similarity_matrix, stable_sigmoid, EmbeddingMatrix, Matrix,
    NumError,
};
use crate::prompt::TokenSequence;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("mini-batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("index ({i}, {j}) out of range for batch of {n}")]
    IndexOutOfRange { i: usize, j: usize, n: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("finite-difference step {0} outside [1e-7, 1e-2]")]
    BadEps(f64),
    #[error("learning rate must be finite and nonnegative, got {0}")]
    BadLearningRate(f64),
    #[error("training diverged: total loss {0} exceeds 1e3")]
    Divergence(f64),
    #[error(transparent)]
    Encoder(#[from] encoder::EncoderError),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// One training mini-batch: N images paired with their standard and "no"
/// token sequences. In learnable mode `no_tokens` holds the class-text
/// tokens that the learnable prompt rows are prepended to.
#[derive(Debug, Clone)]
pub struct MiniBatch {
    pub image_features: EmbeddingMatrix,
    pub std_tokens: Vec<TokenSequence>,
    pub no_tokens: Vec<TokenSequence>,
    pub no_mode: PromptMode,
}

#[allow(clippy::len_without_is_empty)] // the constructor enforces N >= 2
impl MiniBatch {
    pub fn new(
        image_features: EmbeddingMatrix,
        std_tokens: Vec<TokenSequence>,
        no_tokens: Vec<TokenSequence>,
        no_mode: PromptMode,
    ) -> Result<Self, LossError> {
        let n = image_features.rows();
        if n < 2 {
            return Err(LossError::BatchTooSmall(n));
        }
        if std_tokens.len() != n || no_tokens.len() != n {
            return Err(LossError::ShapeMismatch(format!(
                "{} image rows vs {} std / {} no token sequences",
                n,
                std_tokens.len(),
                no_tokens.len()
            )));
        }
        Ok(MiniBatch { image_features, std_tokens, no_tokens, no_mode })
    }

    /// Batch size N; the constructor enforces N >= 2.
    pub fn len(&self) -> usize {
        self.image_features.rows()
    }
}

/// Loss values for one batch. `total` is always the exact f64 sum
/// `itbo + tso`. `underflow_clamped` reports that some log argument fell
/// below 1e-300 and was clamped instead of producing -inf.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub itbo: f64,
    pub tso: f64,
    pub total: f64,
    pub underflow_clamped: bool,
}

/// Gradients for the trainable tensors of the "no" encoder. Frozen
/// standard-encoder tensors are deliberately absent.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub embedding_table: Matrix,
    pub projection: Matrix,
    pub no_prompt_tokens: Matrix,
    pub log_tau: f64,
}

impl GradientSet {
    fn zeros(params: &EncoderParams) -> Self {
        GradientSet {
            embedding_table: Matrix::zeros(
                params.embedding_table.rows(),
                params.embedding_table.cols(),
            ),
            projection: Matrix::zeros(params.projection.rows(), params.projection.cols()),
            no_prompt_tokens: Matrix::zeros(
                params.no_prompt_tokens.rows(),
                params.no_prompt_tokens.cols(),
            ),
            log_tau: 0.0,
        }
    }
}

/// Match-ness between image i and "no" text j: 0 when reversed-matched
/// (same index), 1 when matched yet unrelated.
pub fn matchness(i: usize, j: usize, n: usize) -> Result<u8, LossError> {
    if i >= n || j >= n {
        return Err(LossError::IndexOutOfRange { i, j, n });
    }
    Ok(if i == j { 0 } else { 1 })
}

/// Matched probability of the "no" branch: a binary softmax between the
/// standard and "no" similarity, computed as a stable sigmoid of the
/// temperature-scaled gap.
pub fn p_no(f: &[f64], g: &[f64], g_no: &[f64], tau: f64) -> Result<f64, LossError> {
    if !(tau > 0.0) {
        return Err(LossError::NonPositiveTau(tau));
    }
    if f.len() != g.len() || f.len() != g_no.len() {
        return Err(LossError::ShapeMismatch(format!(
            "f:{} g:{} g_no:{}",
            f.len(),
            g.len(),
            g_no.len()
        )));
    }
    Ok(stable_sigmoid((dot(f, g_no) - dot(f, g)) / tau))
}

// log arguments below this are clamped; keeps saturated sigmoids from
// collapsing the loss to -inf at tiny temperatures
const LOG_FLOOR_ARG: f64 = 1e-300;

fn clamped_log_sigmoid(x: f64, floor_log: f64) -> (f64, bool) {
    let v = log_sigmoid(x);
    if v < floor_log {
        (floor_log, true)
    } else {
        (v, false)
    }
}

/// ITBO loss over precomputed similarity tables sim_std[i][j] = <f_i, g_j>
/// and sim_no[i][j] = <f_i, g_no_j>. Returns the loss value and whether any
/// log argument was clamped.
pub fn itbo_loss(sim_std: &Matrix, sim_no: &Matrix, tau: f64) -> Result<(f64, bool), LossError> {
    let n = sim_std.rows();
    if n < 2 {
        return Err(LossError::BatchTooSmall(n));
    }
    if sim_std.rows() != sim_no.rows()
        || sim_std.cols() != sim_no.cols()
        || sim_std.cols() != n
    {
        return Err(LossError::ShapeMismatch(format!(
            "sim_std {}x{} vs sim_no {}x{}",
            sim_std.rows(),
            sim_std.cols(),
            sim_no.rows(),
            sim_no.cols()
        )));
    }
    if !(tau > 0.0) {
        return Err(LossError::NonPositiveTau(tau));
    }
    let floor_log = LOG_FLOOR_ARG.ln();
    let nf = n as f64;
    let mut diag = 0.0;
    let mut off = 0.0;
    let mut clamped = false;
    for i in 0..n {
        for j in 0..n {
            let a = (sim_no.get(i, j) - sim_std.get(i, j)) / tau;
            if i == j {
                // log(1 - p) = log sigmoid(-a)
                let (v, c) = clamped_log_sigmoid(-a, floor_log);
                diag += v;
                clamped |= c;
            } else {
                let (v, c) = clamped_log_sigmoid(a, floor_log);
                off += v;
                clamped |= c;
            }
        }
    }
    Ok((-diag / nf - off / (nf * (nf - 1.0)), clamped))
}

/// TSO loss in per-sample form: mean over pairs of 2 - ||g_i - g_no_i||.
/// Zero exactly when every pair is antipodal, two when identical.
pub fn tso_loss(g: &EmbeddingMatrix, g_no: &EmbeddingMatrix) -> Result<f64, LossError> {
    if g.rows() != g_no.rows() || g.dim() != g_no.dim() {
        return Err(LossError::ShapeMismatch(format!(
            "g {}x{} vs g_no {}x{}",
            g.rows(),
            g.dim(),
            g_no.rows(),
            g_no.dim()
        )));
    }
    let mut acc = 0.0;
    for i in 0..g.rows() {
        let d: f64 = g
            .row(i)
            .iter()
            .zip(g_no.row(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        acc += 2.0 - d;
    }
    Ok(acc / g.rows() as f64)
}

struct ForwardPass {
    no_outputs: Vec<EncoderOutput>,
    g: EmbeddingMatrix,
    g_no: EmbeddingMatrix,
    sim_std: Matrix,
    sim_no: Matrix,
}

fn run_forward(
    batch: &MiniBatch,
    std_params: &EncoderParams,
    no_params: &EncoderParams,
) -> Result<ForwardPass, LossError> {
    let n = batch.len();
    let dim = std_params.projection.cols();
    let mut no_outputs = Vec::with_capacity(n);
    let mut g_data = Vec::with_capacity(n * dim);
    let mut g_no_data = Vec::with_capacity(n * dim);
    for i in 0..n {
        let s = encoder::encode_text(&batch.std_tokens[i], std_params)?;
        let o = encoder::encode_no_text(&batch.no_tokens[i], no_params, batch.no_mode)?;
        g_data.extend_from_slice(&s.feature);
        g_no_data.extend_from_slice(&o.feature);
        no_outputs.push(o);
    }
    let g = EmbeddingMatrix::from_unit_rows(n, dim, g_data)?;
    let g_no = EmbeddingMatrix::from_unit_rows(n, dim, g_no_data)?;
    let sim_std = similarity_matrix(&batch.image_features, &g)?;
    let sim_no = similarity_matrix(&batch.image_features, &g_no)?;
    Ok(ForwardPass { no_outputs, g, g_no, sim_std, sim_no })
}

/// Runs the forward passes and returns ITBO + TSO for the batch.
pub fn total_loss(
    batch: &MiniBatch,
    std_params: &EncoderParams,
    no_params: &EncoderParams,
) -> Result<LossBreakdown, LossError> {
    let fwd = run_forward(batch, std_params, no_params)?;
    let (itbo, clamped) = itbo_loss(&fwd.sim_std, &fwd.sim_no, no_params.tau())?;
    let tso = tso_loss(&fwd.g, &fwd.g_no)?;
    Ok(LossBreakdown { itbo, tso, total: itbo + tso, underflow_clamped: clamped })
}

/// Analytic gradients of the total loss with respect to the trainable
/// tensors of the "no" encoder. The normalization Jacobian
/// (I - g g^T) / ||z|| is applied when backing out of each unit feature.
pub fn backward(
    batch: &MiniBatch,
    std_params: &EncoderParams,
    no_params: &EncoderParams,
) -> Result<GradientSet, LossError> {
    let fwd = run_forward(batch, std_params, no_params)?;
    let n = batch.len();
    let nf = n as f64;
    let tau = no_params.tau();
    let dim = no_params.projection.cols();
    let floor_log = LOG_FLOOR_ARG.ln();

    let mut grads = GradientSet::zeros(no_params);

    // dL/da for every (i, j); a_ij = (sim_no - sim_std) / tau.
    // Diagonal term  -(1/N) log sigmoid(-a)      => dL/da =  p / N
    // Off-diagonal  -(1/(N(N-1))) log sigmoid(a) => dL/da = -(1-p)/(N(N-1))
    // Terms that hit the underflow clamp are constant, so their gradient
    // is zero.
    let mut dl_da = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let a = (fwd.sim_no.get(i, j) - fwd.sim_std.get(i, j)) / tau;
            let p = stable_sigmoid(a);
            let (coef, active) = if i == j {
                (p / nf, log_sigmoid(-a) >= floor_log)
            } else {
                (-(1.0 - p) / (nf * (nf - 1.0)), log_sigmoid(a) >= floor_log)
            };
            if active {
                dl_da.set(i, j, coef);
                grads.log_tau += coef * (-a);
            }
        }
    }

    // Per "no" feature j: ITBO pushes along sum_i dl_da[i][j] * f_i / tau,
    // TSO along (g_j - g_no_j) / (N ||g_j - g_no_j||).
    for j in 0..n {
        let mut grad_feature = vec![0.0; dim];
        for i in 0..n {
            let c = dl_da.get(i, j) / tau;
            if c != 0.0 {
                for (acc, fv) in grad_feature.iter_mut().zip(batch.image_features.row(i)) {
                    *acc += c * fv;
                }
            }
        }
        let diff: Vec<f64> =
            fwd.g.row(j).iter().zip(fwd.g_no.row(j)).map(|(a, b)| a - b).collect();
        let r = norm(&diff);
        if r > 1e-12 {
            for (acc, dv) in grad_feature.iter_mut().zip(&diff) {
                *acc += dv / (r * nf);
            }
        }
        accumulate_feature_grad(&fwd.no_outputs[j], no_params, &grad_feature, &mut grads);
    }
    Ok(grads)
}

/// Backpropagates a gradient on the unit feature through normalization,
/// projection and mean pooling into the parameter gradients.
fn accumulate_feature_grad(
    out: &EncoderOutput,
    params: &EncoderParams,
    grad_feature: &[f64],
    grads: &mut GradientSet,
) {
    let z_norm = norm(&out.prenorm);
    let g_dot = dot(grad_feature, &out.feature);
    let grad_z: Vec<f64> = grad_feature
        .iter()
        .zip(&out.feature)
        .map(|(gf, gu)| (gf - g_dot * gu) / z_norm)
        .collect();

    // projection: d(z_d)/d(W_td) = pooled_t
    for (t, pv) in out.pooled.iter().enumerate() {
        for (d, gz) in grad_z.iter().enumerate() {
            let cur = grads.projection.get(t, d);
            grads.projection.set(t, d, cur + pv * gz);
        }
    }

    // pooled mean: every contributor shares grad_u / count
    let token_dim = params.embedding_table.cols();
    let mut grad_u = vec![0.0; token_dim];
    for (t, gu) in grad_u.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (d, gz) in grad_z.iter().enumerate() {
            acc += params.projection.get(t, d) * gz;
        }
        *gu = acc;
    }
    let count = out.pool_count(params) as f64;
    if out.used_no_prompts {
        for p in 0..params.no_prompt_tokens.rows() {
            let row = grads.no_prompt_tokens.row_mut(p);
            for (slot, gu) in row.iter_mut().zip(&grad_u) {
                *slot += gu / count;
            }
        }
    }
    for &id in &out.token_ids {
        let row = grads.embedding_table.row_mut(id);
        for (slot, gu) in row.iter_mut().zip(&grad_u) {
            *slot += gu / count;
        }
    }
}

/// Compares [`backward`] against central finite differences on every
/// trainable coordinate. Returns the worst relative error
/// |a - n| / max(|a|, |n|, 1e-12).
pub fn grad_check(
    batch: &MiniBatch,
    std_params: &EncoderParams,
    no_params: &EncoderParams,
    eps: f64,
) -> Result<f64, LossError> {
    if !(1e-7..=1e-2).contains(&eps) {
        return Err(LossError::BadEps(eps));
    }
    let analytic = backward(batch, std_params, no_params)?;
    let mut worst: f64 = 0.0;

    let mut check = |a: f64, n: f64| {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-12);
        if rel > worst {
            worst = rel;
        }
    };

    let eval = |p: &EncoderParams| -> Result<f64, LossError> {
        Ok(total_loss(batch, std_params, p)?.total)
    };

    for (tensor, pick_analytic) in [
        (TensorKind::EmbeddingTable, &analytic.embedding_table as &Matrix),
        (TensorKind::Projection, &analytic.projection),
        (TensorKind::NoPromptTokens, &analytic.no_prompt_tokens),
    ] {
        let len = pick_analytic.data().len();
        for idx in 0..len {
            let mut plus = no_params.clone();
            let mut minus = no_params.clone();
            *tensor.data_mut(&mut plus).get_mut(idx).unwrap() += eps;
            *tensor.data_mut(&mut minus).get_mut(idx).unwrap() -= eps;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            check(pick_analytic.data()[idx], numeric);
        }
    }
    {
        let mut plus = no_params.clone();
        let mut minus = no_params.clone();
        plus.log_tau += eps;
        minus.log_tau -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        check(analytic.log_tau, numeric);
    }
    Ok(worst)
}

#[derive(Clone, Copy)]
enum TensorKind {
    EmbeddingTable,
    Projection,
    NoPromptTokens,
}

impl TensorKind {
    fn data_mut<'a>(&self, p: &'a mut EncoderParams) -> &'a mut [f64] {
        match self {
            TensorKind::EmbeddingTable => p.embedding_table.data_mut(),
            TensorKind::Projection => p.projection.data_mut(),
            TensorKind::NoPromptTokens => p.no_prompt_tokens.data_mut(),
        }
    }
}

/// Per-epoch mean losses recorded by [`train`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub itbo: f64,
    pub tso: f64,
    pub total: f64,
}

/// Plain gradient descent on the trainable tensors of the "no" encoder.
/// Batch order is reshuffled every epoch by a generator seeded from
/// `seed`, so runs are deterministic. Returns the trained parameters and
/// the per-epoch loss trace.
pub fn train(
    corpus: &[MiniBatch],
    std_params: &EncoderParams,
    no_params: &EncoderParams,
    lr: f64,
    epochs: usize,
    seed: u64,
) -> Result<(EncoderParams, Vec<EpochLoss>), LossError> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(LossError::BadLearningRate(lr));
    }
    if corpus.is_empty() {
        return Err(LossError::BatchTooSmall(0));
    }
    let mut params = no_params.clone();
    let mut trace = Vec::with_capacity(epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut sum_itbo = 0.0;
        let mut sum_tso = 0.0;
        let mut sum_total = 0.0;
        for &b in &order {
            let batch = &corpus[b];
            let loss = total_loss(batch, std_params, &params)?;
            if loss.total > 1e3 {
                return Err(LossError::Divergence(loss.total));
            }
            sum_itbo += loss.itbo;
            sum_tso += loss.tso;
            sum_total += loss.total;
            let grads = backward(batch, std_params, &params)?;
            apply_step(&mut params, &grads, lr);
        }
        let m = corpus.len() as f64;
        trace.push(EpochLoss {
            epoch,
            itbo: sum_itbo / m,
            tso: sum_tso / m,
            total: sum_total / m,
        });
    }
    Ok((params, trace))
}

fn apply_step(params: &mut EncoderParams, grads: &GradientSet, lr: f64) {
    if params.trainable.embedding_table {
        for (p, g) in params
            .embedding_table
            .data_mut()
            .iter_mut()
            .zip(grads.embedding_table.data())
        {
            *p -= lr * g;
        }
    }
    if params.trainable.projection {
        for (p, g) in params.projection.data_mut().iter_mut().zip(grads.projection.data()) {
            *p -= lr * g;
        }
    }
    if params.trainable.no_prompt_tokens {
        for (p, g) in params
            .no_prompt_tokens
            .data_mut()
            .iter_mut()
            .zip(grads.no_prompt_tokens.data())
        {
            *p -= lr * g;
        }
    }
    if params.trainable.log_tau {
        params.log_tau -= lr * grads.log_tau;
    }
}

/// Seeded random batch plus random standard/"no" parameters; shared by the
/// gradcheck subcommand and the test suites.
pub fn random_fixture(
    seed: u64,
    dims: encoder::EncoderDims,
    batch_size: usize,
) -> (MiniBatch, EncoderParams, EncoderParams) {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(seed));
    let std_params = EncoderParams {
        trainable: encoder::TrainableMask::FROZEN,
        ..EncoderParams::random(seed.wrapping_add(1), dims)
    };
    let no_params = EncoderParams::random(seed.wrapping_add(2), dims);

    let dim = dims.feature_dim;
    let mut rows = Vec::with_capacity(batch_size * dim);
    for _ in 0..batch_size {
        let raw: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        rows.extend(numkernel::l2_normalize(&raw).expect("gaussian draw is nonzero"));
    }
    let image_features =
        EmbeddingMatrix::from_unit_rows(batch_size, dim, rows).expect("unit rows");

    let tok = |rng: &mut ChaCha8Rng| -> TokenSequence {
        let len = rng.random_range(3..6);
        TokenSequence { ids: (0..len).map(|_| rng.random_range(0..dims.vocab_rows)).collect() }
    };
    let std_tokens: Vec<TokenSequence> = (0..batch_size).map(|_| tok(&mut rng)).collect();
    let no_tokens: Vec<TokenSequence> = (0..batch_size).map(|_| tok(&mut rng)).collect();
    let batch = MiniBatch::new(image_features, std_tokens, no_tokens, PromptMode::Learnable)
        .expect("batch size >= 2");
    (batch, std_params, no_params)
}
