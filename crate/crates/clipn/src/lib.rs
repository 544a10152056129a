//! Out-of-distribution detection over unit-norm embedding vectors.
//!
//! The pipeline trains a "no" text encoder against a frozen standard
//! encoder using an image-text binary-opposite loss and a text
//! semantic-opposite loss, then scores samples with the threshold-free
//! CTW and ATD rules alongside classic baselines (MSP, MaxLogit, energy,
//! ReAct, ODIN). Evaluation reports AUROC and FPR95.
//!
//! Modules:
//! - [`numkernel`]: stable softmax/logsumexp/normalization primitives
//! - [`prompt`]: prompt pools, tokenizer, prompt-ensemble features
//! - [`encoder`]: toy frozen/trainable text encoders over token embeddings
//! - [`losses`]: ITBO + TSO losses, analytic backward, gradient check, training
//! - [`detect`]: CTW, ATD and baseline scoring against a class text bank
//! - [`metric`]: AUROC, FPR@TPR, kernel density estimation
//! - [`store`]: embedding file format, manifest, synthetic benchmark generator
//! - [`cli`]: subcommands wiring everything into reproducible runs

// `!(x > 0.0)` is the NaN-rejecting form of positivity checks; `x <= 0.0`
// would let NaN through
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod detect;
pub mod encoder;
pub mod losses;
pub mod metric;
pub mod numkernel;
pub mod prompt;
pub mod store;
