//! Zero-shot inference: ID class probabilities, the threshold-free CTW and
//! ATD rules, and the MSP / MaxLogit / energy / ReAct / ODIN baselines.
//!
//! All scoring functions are pure; a [`ClassTextBank`] is immutable after
//! construction, so samples can be scored from any number of threads.

use crate::encoder::{self, EncoderParams, PromptMode};
use crate::losses;
use crate::numkernel::{self, dot, stable_softmax, EmbeddingMatrix, NumError};
use crate::prompt::{self, PromptPool, Vocabulary};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("feature dimension {got} does not match bank dimension {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("duplicate class name {0:?}")]
    DuplicateClass(String),
    #[error("bank needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("temperature T must be positive, got {0}")]
    NonPositiveT(f64),
    #[error("perturbation epsilon must be nonnegative, got {0}")]
    NegativeEpsilon(f64),
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("prompt error: {0}")]
    Prompt(#[from] prompt::PromptError),
    #[error("encoder error: {0}")]
    Encoder(#[from] encoder::EncoderError),
    #[error("loss error: {0}")]
    Loss(#[from] losses::LossError),
}

/// Per-class standard and "no" text features plus the shared temperature.
#[derive(Debug, Clone)]
pub struct ClassTextBank {
    pub class_names: Vec<String>,
    pub standard: EmbeddingMatrix,
    pub negation: EmbeddingMatrix,
    pub tau: f64,
}

impl ClassTextBank {
    pub fn new(
        class_names: Vec<String>,
        standard: EmbeddingMatrix,
        negation: EmbeddingMatrix,
        tau: f64,
    ) -> Result<Self, DetectError> {
        if class_names.len() < 2 {
            return Err(DetectError::TooFewClasses(class_names.len()));
        }
        for (i, a) in class_names.iter().enumerate() {
            if class_names[..i].contains(a) {
                return Err(DetectError::DuplicateClass(a.clone()));
            }
        }
        if standard.rows() != class_names.len() || negation.rows() != class_names.len() {
            return Err(DetectError::DimMismatch {
                got: standard.rows().min(negation.rows()),
                want: class_names.len(),
            });
        }
        if standard.dim() != negation.dim() {
            return Err(DetectError::DimMismatch { got: negation.dim(), want: standard.dim() });
        }
        if !(tau > 0.0) {
            return Err(DetectError::NonPositiveT(tau));
        }
        Ok(ClassTextBank { class_names, standard, negation, tau })
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.standard.dim()
    }

    fn check_dim(&self, f: &[f64]) -> Result<(), DetectError> {
        if f.len() != self.dim() {
            return Err(DetectError::DimMismatch { got: f.len(), want: self.dim() });
        }
        Ok(())
    }

    fn standard_sims(&self, f: &[f64]) -> Vec<f64> {
        (0..self.classes()).map(|k| dot(f, self.standard.row(k))).collect()
    }
}

/// Scoring method identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Msp,
    MaxLogit,
    Energy,
    React,
    Odin,
    Ctw,
    Atd,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Msp,
        Method::MaxLogit,
        Method::Energy,
        Method::React,
        Method::Odin,
        Method::Ctw,
        Method::Atd,
    ];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Msp => "msp",
            Method::MaxLogit => "maxlogit",
            Method::Energy => "energy",
            Method::React => "react",
            Method::Odin => "odin",
            Method::Ctw => "ctw",
            Method::Atd => "atd",
        };
        f.write_str(s)
    }
}

impl FromStr for Method {
    type Err = DetectError;
    fn from_str(s: &str) -> Result<Self, DetectError> {
        match s.trim().to_lowercase().as_str() {
            "msp" => Ok(Method::Msp),
            "maxlogit" => Ok(Method::MaxLogit),
            "energy" => Ok(Method::Energy),
            "react" => Ok(Method::React),
            "odin" => Ok(Method::Odin),
            "ctw" => Ok(Method::Ctw),
            "atd" => Ok(Method::Atd),
            other => Err(DetectError::UnknownMethod(other.to_string())),
        }
    }
}

/// Which probabilities ATD compares the unknown-class mass against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AtdCompare {
    /// Compare against the original softmax probabilities, as written.
    #[default]
    Original,
    /// Compare against the rescaled (1 - p_no) * p values.
    Rescaled,
}

/// One scored sample. `is_id` is present only for the threshold-free
/// methods (CTW, ATD); `p_unknown` only for ATD.
#[derive(Debug, Clone)]
pub struct DetectionResult {
    pub method: Method,
    pub idness: f64,
    pub is_id: Option<bool>,
    pub per_class_probs: Option<Vec<f64>>,
    pub p_unknown: Option<f64>,
}

/// Softmax over standard-text similarities at the bank temperature.
pub fn id_probabilities(f: &[f64], bank: &ClassTextBank) -> Result<Vec<f64>, DetectError> {
    bank.check_dim(f)?;
    Ok(stable_softmax(&bank.standard_sims(f), bank.tau)?)
}

fn argmax_lowest_tie(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

/// Competing-to-win: the "no" branch of the argmax class votes against the
/// prediction. Ties at p_no = 0.5 resolve to ID.
pub fn ctw(f: &[f64], bank: &ClassTextBank) -> Result<DetectionResult, DetectError> {
    let probs = id_probabilities(f, bank)?;
    let j = argmax_lowest_tie(&probs);
    let pno = losses::p_no(f, bank.standard.row(j), bank.negation.row(j), bank.tau)?;
    Ok(DetectionResult {
        method: Method::Ctw,
        idness: 1.0 - pno,
        is_id: Some(1.0 - pno >= pno),
        per_class_probs: Some(probs),
        p_unknown: None,
    })
}

/// Core of agreeing-to-differ over already-computed probability vectors.
/// Builds the (C+1)-way distribution {(1 - p_no_j) p_j} with the unknown
/// class absorbing the remainder.
pub fn atd_from_probs(
    probs: &[f64],
    pno: &[f64],
    compare: AtdCompare,
) -> Result<DetectionResult, DetectError> {
    if probs.len() != pno.len() {
        return Err(DetectError::DimMismatch { got: pno.len(), want: probs.len() });
    }
    let adjusted: Vec<f64> = probs.iter().zip(pno).map(|(p, q)| (1.0 - q) * p).collect();
    let covered: f64 = adjusted.iter().sum();
    let p_unknown = 1.0 - covered;
    let is_id = match compare {
        AtdCompare::Original => p_unknown <= probs[argmax_lowest_tie(probs)],
        AtdCompare::Rescaled => p_unknown <= adjusted[argmax_lowest_tie(&adjusted)],
    };
    let mut dist = adjusted;
    dist.push(p_unknown);
    Ok(DetectionResult {
        method: Method::Atd,
        idness: 1.0 - p_unknown,
        is_id: Some(is_id),
        per_class_probs: Some(dist),
        p_unknown: Some(p_unknown),
    })
}

/// Agreeing-to-differ with the comparison rule written in the original
/// formulation (unknown mass vs the original class probabilities).
pub fn atd(f: &[f64], bank: &ClassTextBank) -> Result<DetectionResult, DetectError> {
    atd_with_compare(f, bank, AtdCompare::Original)
}

pub fn atd_with_compare(
    f: &[f64],
    bank: &ClassTextBank,
    compare: AtdCompare,
) -> Result<DetectionResult, DetectError> {
    let probs = id_probabilities(f, bank)?;
    let pno: Vec<f64> = (0..bank.classes())
        .map(|k| losses::p_no(f, bank.standard.row(k), bank.negation.row(k), bank.tau))
        .collect::<Result<_, _>>()?;
    atd_from_probs(&probs, &pno, compare)
}

/// Maximum softmax probability.
pub fn msp(f: &[f64], bank: &ClassTextBank) -> Result<DetectionResult, DetectError> {
    let probs = id_probabilities(f, bank)?;
    let idness = probs[argmax_lowest_tie(&probs)];
    Ok(DetectionResult {
        method: Method::Msp,
        idness,
        is_id: None,
        per_class_probs: Some(probs),
        p_unknown: None,
    })
}

/// Maximum temperature-scaled logit.
pub fn maxlogit(f: &[f64], bank: &ClassTextBank) -> Result<DetectionResult, DetectError> {
    bank.check_dim(f)?;
    let sims = bank.standard_sims(f);
    let idness = sims[argmax_lowest_tie(&sims)] / bank.tau;
    Ok(DetectionResult {
        method: Method::MaxLogit,
        idness,
        is_id: None,
        per_class_probs: None,
        p_unknown: None,
    })
}

/// Energy score: T * logsumexp(similarities / (tau * T)).
pub fn energy(f: &[f64], bank: &ClassTextBank, t: f64) -> Result<DetectionResult, DetectError> {
    if !(t > 0.0) {
        return Err(DetectError::NonPositiveT(t));
    }
    bank.check_dim(f)?;
    let scaled: Vec<f64> = bank.standard_sims(f).iter().map(|s| s / (bank.tau * t)).collect();
    let idness = t * numkernel::logsumexp(&scaled)?;
    Ok(DetectionResult {
        method: Method::Energy,
        idness,
        is_id: None,
        per_class_probs: None,
        p_unknown: None,
    })
}

/// ReAct: clamp activations above `clamp`, renormalize, then energy score.
/// When nothing clamps the input is used as-is so an infinite clamp is
/// bit-for-bit the energy score.
pub fn react(
    f: &[f64],
    bank: &ClassTextBank,
    clamp: f64,
    t: f64,
) -> Result<DetectionResult, DetectError> {
    bank.check_dim(f)?;
    let mut clipped: Vec<f64> = f.to_vec();
    let mut any = false;
    for v in clipped.iter_mut() {
        if *v > clamp {
            *v = clamp;
            any = true;
        }
    }
    let scored = if any { numkernel::l2_normalize(&clipped)? } else { clipped };
    let mut r = energy(&scored, bank, t)?;
    r.method = Method::React;
    Ok(r)
}

/// ODIN: a closed-form input perturbation ascending the max-class
/// log-probability, then max softmax at temperature `t_odin`. Logits are
/// linear in the feature, so the gradient is (g_jmax - sum_k p_k g_k)
/// divided by the temperature scale.
pub fn odin(
    f: &[f64],
    bank: &ClassTextBank,
    t_odin: f64,
    epsilon: f64,
) -> Result<DetectionResult, DetectError> {
    if !(t_odin > 0.0) {
        return Err(DetectError::NonPositiveT(t_odin));
    }
    if epsilon < 0.0 {
        return Err(DetectError::NegativeEpsilon(epsilon));
    }
    bank.check_dim(f)?;
    let scale = bank.tau * t_odin;
    let score_at = |x: &[f64]| -> Result<Vec<f64>, DetectError> {
        Ok(stable_softmax(&bank.standard_sims(x), scale)?)
    };
    if epsilon == 0.0 {
        let probs = score_at(f)?;
        let idness = probs[argmax_lowest_tie(&probs)];
        return Ok(DetectionResult {
            method: Method::Odin,
            idness,
            is_id: None,
            per_class_probs: Some(probs),
            p_unknown: None,
        });
    }
    let probs = score_at(f)?;
    let j = argmax_lowest_tie(&probs);
    let mut grad = vec![0.0; f.len()];
    for (d, g) in grad.iter_mut().enumerate() {
        let mut weighted = 0.0;
        for (k, p) in probs.iter().enumerate() {
            weighted += p * bank.standard.row(k)[d];
        }
        *g = (bank.standard.row(j)[d] - weighted) / scale;
    }
    let perturbed: Vec<f64> =
        f.iter().zip(&grad).map(|(x, g)| x + epsilon * sign(*g)).collect();
    let f2 = numkernel::l2_normalize(&perturbed)?;
    let probs2 = score_at(&f2)?;
    let idness = probs2[argmax_lowest_tie(&probs2)];
    Ok(DetectionResult {
        method: Method::Odin,
        idness,
        is_id: None,
        per_class_probs: Some(probs2),
        p_unknown: None,
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Builds the class text bank: per class, expand the prompt pools, encode
/// every prompt with the matching encoder and ensemble into one unit
/// feature. The temperature comes from the "no" encoder.
///
/// In learnable mode the "no" branch encodes the standard templates with
/// the learnable prompt rows prepended (the negation wording lives in the
/// learned tokens); in handcrafted mode it encodes the negation templates.
#[allow(clippy::too_many_arguments)]
pub fn build_bank(
    class_names: &[String],
    std_pool: &PromptPool,
    no_pool: &PromptPool,
    std_params: &EncoderParams,
    no_params: &EncoderParams,
    vocab: &Vocabulary,
    mode: PromptMode,
) -> Result<ClassTextBank, DetectError> {
    for (i, a) in class_names.iter().enumerate() {
        if class_names[..i].contains(a) {
            return Err(DetectError::DuplicateClass(a.clone()));
        }
    }
    let dim = std_params.projection.cols();
    let mut std_data = Vec::with_capacity(class_names.len() * dim);
    let mut no_data = Vec::with_capacity(class_names.len() * dim);
    for name in class_names {
        let std_prompts = prompt::expand_prompts(name, std_pool)?;
        let mut rows = Vec::with_capacity(std_prompts.len() * dim);
        for p in &std_prompts {
            let tokens = prompt::tokenize(p, vocab)?;
            rows.extend(encoder::encode_text(&tokens, std_params)?.feature);
        }
        let stacked = EmbeddingMatrix::from_unit_rows(std_prompts.len(), dim, rows)?;
        std_data.extend(prompt::ensemble_features(&stacked)?);

        let no_prompts = match mode {
            PromptMode::Handcrafted => prompt::expand_prompts(name, no_pool)?,
            PromptMode::Learnable => prompt::expand_prompts(name, std_pool)?,
        };
        let mut rows = Vec::with_capacity(no_prompts.len() * dim);
        for p in &no_prompts {
            let tokens = prompt::tokenize(p, vocab)?;
            rows.extend(encoder::encode_no_text(&tokens, no_params, mode)?.feature);
        }
        let stacked = EmbeddingMatrix::from_unit_rows(no_prompts.len(), dim, rows)?;
        no_data.extend(prompt::ensemble_features(&stacked)?);
    }
    let standard = EmbeddingMatrix::from_unit_rows(class_names.len(), dim, std_data)?;
    let negation = EmbeddingMatrix::from_unit_rows(class_names.len(), dim, no_data)?;
    ClassTextBank::new(class_names.to_vec(), standard, negation, no_params.tau())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank2(tau: f64) -> ClassTextBank {
        // two orthogonal classes in 2-D, negations antipodal
        ClassTextBank::new(
            vec!["alpha".into(), "beta".into()],
            EmbeddingMatrix::from_unit_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            EmbeddingMatrix::from_unit_rows(2, 2, vec![-1.0, 0.0, 0.0, -1.0]).unwrap(),
            tau,
        )
        .unwrap()
    }

    fn bank3() -> ClassTextBank {
        ClassTextBank::new(
            vec!["a".into(), "b".into(), "c".into()],
            EmbeddingMatrix::from_unit_rows(
                3,
                3,
                vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            )
            .unwrap(),
            EmbeddingMatrix::from_unit_rows(
                3,
                3,
                vec![-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0],
            )
            .unwrap(),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn id_probs_symmetry_and_sum() {
        let bank = bank2(1.0);
        let f = numkernel::l2_normalize(&[1.0, 1.0]).unwrap();
        let p = id_probabilities(&f, &bank).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn id_probs_analytic_three_way() {
        // similarities [ln 2, 0, 0] at tau 1 -> [0.5, 0.25, 0.25]
        let bank = bank3();
        let ln2 = 2.0f64.ln();
        // non-unit probe is fine for the formula; bypass dim check by
        // constructing a vector whose dots give the wanted logits
        let f = vec![ln2, 0.0, 0.0];
        let p = stable_softmax(
            &(0..3).map(|k| dot(&f, bank.standard.row(k))).collect::<Vec<_>>(),
            1.0,
        )
        .unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
        assert!((p[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn id_probs_dim_mismatch() {
        let bank = bank2(1.0);
        assert!(matches!(
            id_probabilities(&[1.0, 0.0, 0.0], &bank),
            Err(DetectError::DimMismatch { got: 3, want: 2 })
        ));
    }

    #[test]
    fn ctw_threshold_cases() {
        // bank with antipodal negation: p_no = sigmoid(-2 <f, g_j> / tau)
        let bank = bank2(1.0);
        let f = [1.0, 0.0];
        let r = ctw(&f, &bank).unwrap();
        // argmax class 0, gap = -2 -> p_no = sigmoid(-2) ~ 0.1192
        let pno = numkernel::stable_sigmoid(-2.0);
        assert!((r.idness - (1.0 - pno)).abs() < 1e-12);
        assert_eq!(r.is_id, Some(true));
        assert!(r.p_unknown.is_none());
    }

    #[test]
    fn ctw_tie_resolves_to_id() {
        // orthogonal feature: p_no = 0.5 exactly at the argmax class
        let bank = ClassTextBank::new(
            vec!["a".into(), "b".into()],
            EmbeddingMatrix::from_unit_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            EmbeddingMatrix::from_unit_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            1.0,
        )
        .unwrap();
        let f = [0.6, 0.8];
        let r = ctw(&f, &bank).unwrap();
        assert_eq!(r.idness, 0.5);
        assert_eq!(r.is_id, Some(true));
    }

    #[test]
    fn ctw_high_pno_is_ood() {
        let bank = bank2(1.0);
        let f = [-1.0, 0.0];
        // argmax is class 1 (sim 0 beats -1); p_no at class 1 = 0.5 -> ID
        // probe deeper: antipodal to class 0 with slight tilt to make
        // class 0 argmax and p_no large
        let f2 = numkernel::l2_normalize(&[-1.0, -1.1]).unwrap();
        let r2 = ctw(&f2, &bank).unwrap();
        assert_eq!(r2.is_id, Some(false));
        assert!(r2.idness < 0.5);
        let _ = f;
    }

    #[test]
    fn atd_from_probs_derived_example() {
        let r = atd_from_probs(&[0.7, 0.3], &[0.2, 0.6], AtdCompare::Original).unwrap();
        assert!((r.p_unknown.unwrap() - 0.32).abs() < 1e-15);
        assert_eq!(r.is_id, Some(true)); // 0.32 <= 0.7
        assert!((r.idness - 0.68).abs() < 1e-15);
        let dist = r.per_class_probs.unwrap();
        assert_eq!(dist.len(), 3);
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn atd_half_everywhere() {
        let r = atd_from_probs(&[0.25; 4], &[0.5; 4], AtdCompare::Original).unwrap();
        assert!((r.p_unknown.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(r.is_id, Some(0.5 <= 0.25));
    }

    #[test]
    fn atd_extremes() {
        let probs = [0.4, 0.35, 0.25];
        let r0 = atd_from_probs(&probs, &[0.0; 3], AtdCompare::Original).unwrap();
        assert!(r0.p_unknown.unwrap().abs() < 1e-12);
        let r1 = atd_from_probs(&probs, &[1.0; 3], AtdCompare::Original).unwrap();
        assert!((r1.p_unknown.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn atd_compare_modes_can_differ() {
        // rescaling can move the argmax below the unknown mass
        let probs = [0.5, 0.5];
        let pno = [0.9, 0.9];
        let orig = atd_from_probs(&probs, &pno, AtdCompare::Original).unwrap();
        let resc = atd_from_probs(&probs, &pno, AtdCompare::Rescaled).unwrap();
        // p_unknown = 1 - 0.1 = 0.9; original compares 0.9 <= 0.5 (false),
        // rescaled compares 0.9 <= 0.05 (false) — both OOD here
        assert_eq!(orig.is_id, Some(false));
        assert_eq!(resc.is_id, Some(false));
        // a case where they differ: moderate pno
        let orig2 = atd_from_probs(&[0.6, 0.4], &[0.5, 0.5], AtdCompare::Original).unwrap();
        let resc2 = atd_from_probs(&[0.6, 0.4], &[0.5, 0.5], AtdCompare::Rescaled).unwrap();
        // p_unknown = 0.5; original: 0.5 <= 0.6 true; rescaled: 0.5 <= 0.3 false
        assert_eq!(orig2.is_id, Some(true));
        assert_eq!(resc2.is_id, Some(false));
    }

    #[test]
    fn msp_uniform_and_peak() {
        let bank = bank3();
        let f = numkernel::l2_normalize(&[1.0, 1.0, 1.0]).unwrap();
        let r = msp(&f, &bank).unwrap();
        assert!((r.idness - 1.0 / 3.0).abs() < 1e-12);

        let f_peak = [1.0, 0.0, 0.0];
        let r_peak = msp(&f_peak, &bank).unwrap();
        assert!(r_peak.idness > r.idness);
    }

    #[test]
    fn maxlogit_shift_and_scale() {
        let bank = bank2(1.0);
        let f = [0.9, 0.1];
        let r = maxlogit(&f, &bank).unwrap();
        assert!((r.idness - 0.9).abs() < 1e-15);
        let bank_half = bank2(0.5);
        let r2 = maxlogit(&f, &bank_half).unwrap();
        assert!((r2.idness - 1.8).abs() < 1e-15);
    }

    #[test]
    fn energy_equal_logits() {
        // sims/tau = [0, 0] -> ln 2
        let bank = bank2(1.0);
        let f = numkernel::l2_normalize(&[1.0, 1.0]).unwrap();
        let sims = bank.standard_sims(&f);
        let expect = numkernel::logsumexp(&sims.iter().map(|s| s / 1.0).collect::<Vec<_>>())
            .unwrap();
        let r = energy(&f, &bank, 1.0).unwrap();
        assert_eq!(r.idness, expect);
        assert!(matches!(energy(&f, &bank, 0.0), Err(DetectError::NonPositiveT(_))));
    }

    #[test]
    fn energy_approaches_maxlogit_for_dominant_logit() {
        let bank = bank2(0.02);
        let f = [1.0, 0.0];
        let e = energy(&f, &bank, 1.0).unwrap().idness;
        let m = maxlogit(&f, &bank).unwrap().idness;
        assert!((e - m).abs() / m.abs() < 1e-8);
    }

    #[test]
    fn react_infinite_clamp_is_energy_bitwise() {
        let bank = bank2(0.07);
        let f = numkernel::l2_normalize(&[0.3, -0.9]).unwrap();
        let e = energy(&f, &bank, 1.0).unwrap();
        let r = react(&f, &bank, f64::INFINITY, 1.0).unwrap();
        assert_eq!(r.idness, e.idness);
    }

    #[test]
    fn react_clamps_and_renormalizes() {
        let bank = bank2(1.0);
        // pre-norm [2, 0.1] clamped at 1 -> [1, 0.1] renormalized
        let f = [2.0, 0.1];
        let r = react(&f, &bank, 1.0, 1.0).unwrap();
        let expect_f = numkernel::l2_normalize(&[1.0, 0.1]).unwrap();
        let expect = energy(&expect_f, &bank, 1.0).unwrap();
        assert_eq!(r.idness, expect.idness);
    }

    #[test]
    fn react_percentile_noop_when_below() {
        // clamp above every activation leaves the score unchanged
        let bank = bank2(0.07);
        let f = numkernel::l2_normalize(&[0.5, 0.5]).unwrap();
        let r = react(&f, &bank, 0.9, 1.0).unwrap();
        let e = energy(&f, &bank, 1.0).unwrap();
        assert_eq!(r.idness, e.idness);
    }

    #[test]
    fn odin_zero_eps_unit_t_is_msp_bitwise() {
        let bank = bank2(0.07);
        for raw in [[0.2, 0.9], [-0.4, 0.3], [0.8, -0.1]] {
            let f = numkernel::l2_normalize(&raw).unwrap();
            let a = odin(&f, &bank, 1.0, 0.0).unwrap();
            let b = msp(&f, &bank).unwrap();
            assert_eq!(a.idness, b.idness);
        }
    }

    #[test]
    fn odin_high_temperature_flattens() {
        let bank = bank2(1.0);
        let f = [1.0, 0.0];
        let r = odin(&f, &bank, 1000.0, 0.0).unwrap();
        assert!((r.idness - 0.5).abs() < 1e-3);
    }

    #[test]
    fn odin_perturbation_ascends_max_probability() {
        // seeded fixture: perturbation increases the argmax-class
        // probability relative to msp at the same temperature
        let bank = bank2(1.0);
        let f = numkernel::l2_normalize(&[0.8, 0.6]).unwrap();
        let with_eps = odin(&f, &bank, 1.0, 0.01).unwrap();
        let without = odin(&f, &bank, 1.0, 0.0).unwrap();
        assert!(
            with_eps.idness >= without.idness,
            "{} < {}",
            with_eps.idness,
            without.idness
        );
    }

    #[test]
    fn odin_rejects_bad_params() {
        let bank = bank2(1.0);
        assert!(matches!(odin(&[1.0, 0.0], &bank, 0.0, 0.0), Err(DetectError::NonPositiveT(_))));
        assert!(matches!(
            odin(&[1.0, 0.0], &bank, 1.0, -0.1),
            Err(DetectError::NegativeEpsilon(_))
        ));
    }

    #[test]
    fn scalar_scores_permutation_invariant() {
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let std_rows = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let no_rows: Vec<f64> = std_rows.iter().map(|v| -v).collect();
        let bank = ClassTextBank::new(
            names.clone(),
            EmbeddingMatrix::from_unit_rows(3, 3, std_rows.clone()).unwrap(),
            EmbeddingMatrix::from_unit_rows(3, 3, no_rows.clone()).unwrap(),
            0.3,
        )
        .unwrap();
        // permute classes (rotate by one)
        let perm_std: Vec<f64> =
            [&std_rows[3..6], &std_rows[6..9], &std_rows[0..3]].concat();
        let perm_no: Vec<f64> = [&no_rows[3..6], &no_rows[6..9], &no_rows[0..3]].concat();
        let bank_p = ClassTextBank::new(
            vec!["b".into(), "c".into(), "a".into()],
            EmbeddingMatrix::from_unit_rows(3, 3, perm_std).unwrap(),
            EmbeddingMatrix::from_unit_rows(3, 3, perm_no).unwrap(),
            0.3,
        )
        .unwrap();
        let f = numkernel::l2_normalize(&[0.7, 0.2, -0.4]).unwrap();
        for (a, b) in [
            (msp(&f, &bank).unwrap(), msp(&f, &bank_p).unwrap()),
            (maxlogit(&f, &bank).unwrap(), maxlogit(&f, &bank_p).unwrap()),
            (energy(&f, &bank, 1.0).unwrap(), energy(&f, &bank_p, 1.0).unwrap()),
        ] {
            assert!((a.idness - b.idness).abs() < 1e-12);
        }
    }

    #[test]
    fn bank_rejects_duplicates_and_small() {
        let m = EmbeddingMatrix::from_unit_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            ClassTextBank::new(vec!["x".into(), "x".into()], m.clone(), m.clone(), 1.0),
            Err(DetectError::DuplicateClass(_))
        ));
        let one = EmbeddingMatrix::from_unit_rows(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            ClassTextBank::new(vec!["x".into()], one.clone(), one, 1.0),
            Err(DetectError::TooFewClasses(1))
        ));
    }

    #[test]
    fn maxlogit_shift_linearity() {
        // identity-axis bank rows make the similarities equal the probe
        // coordinates, so shifting the probe shifts every logit by c/tau
        let bank = bank2(1.0);
        let base = maxlogit(&[0.9, 0.1], &bank).unwrap().idness;
        let c = 0.37;
        let shifted = maxlogit(&[0.9 + c, 0.1 + c], &bank).unwrap().idness;
        assert!((shifted - (base + c)).abs() < 1e-15);
    }

    #[test]
    fn build_bank_single_template_and_permutation() {
        use crate::encoder::{EncoderDims, EncoderParams};
        use crate::prompt::{Polarity, PromptPool, Vocabulary};
        let vocab = Vocabulary::from_words(["a", "photo", "of", "without", "cat", "dog"]);
        let dims = EncoderDims {
            vocab_rows: vocab.size(),
            token_dim: 6,
            feature_dim: 6,
            no_prompt_len: 0,
        };
        let std_params = EncoderParams::random(21, dims);
        let no_params = EncoderParams::random(22, dims);
        let std_pool =
            PromptPool::new(vec!["a photo of {}".into()], Polarity::Standard).unwrap();
        let no_pool =
            PromptPool::new(vec!["a photo without {}".into()], Polarity::Negation).unwrap();
        let names = vec!["cat".to_string(), "dog".to_string()];
        let bank = build_bank(
            &names,
            &std_pool,
            &no_pool,
            &std_params,
            &no_params,
            &vocab,
            crate::encoder::PromptMode::Handcrafted,
        )
        .unwrap();
        // single-template pools: bank rows equal the single encoded prompt
        let tokens = crate::prompt::tokenize("a photo of cat", &vocab).unwrap();
        let direct = crate::encoder::encode_text(&tokens, &std_params).unwrap();
        assert_eq!(bank.standard.row(0), &direct.feature[..]);
        let no_tokens = crate::prompt::tokenize("a photo without dog", &vocab).unwrap();
        let direct_no = crate::encoder::encode_no_text(
            &no_tokens,
            &no_params,
            crate::encoder::PromptMode::Handcrafted,
        )
        .unwrap();
        assert_eq!(bank.negation.row(1), &direct_no.feature[..]);

        // permuting class order permutes bank rows identically
        let swapped_names = vec!["dog".to_string(), "cat".to_string()];
        let bank2 = build_bank(
            &swapped_names,
            &std_pool,
            &no_pool,
            &std_params,
            &no_params,
            &vocab,
            crate::encoder::PromptMode::Handcrafted,
        )
        .unwrap();
        assert_eq!(bank2.standard.row(0), bank.standard.row(1));
        assert_eq!(bank2.standard.row(1), bank.standard.row(0));
        assert_eq!(bank2.negation.row(0), bank.negation.row(1));

        // duplicate class names rejected
        let dup = vec!["cat".to_string(), "cat".to_string()];
        assert!(matches!(
            build_bank(
                &dup,
                &std_pool,
                &no_pool,
                &std_params,
                &no_params,
                &vocab,
                crate::encoder::PromptMode::Handcrafted,
            ),
            Err(DetectError::DuplicateClass(_))
        ));
    }

    #[test]
    fn atd_distribution_sums_to_one_randomized() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let c = rng.random_range(2..6);
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let pno: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
            let r = atd_from_probs(&probs, &pno, AtdCompare::Original).unwrap();
            let total: f64 = r.per_class_probs.unwrap().iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
