//! Group-relative policy optimization for a toy discrete autoregressive image
//! generator.
//!
//! The pipeline: [`tokenizer`] maps images to codebook tokens, [`policy`] is
//! a small causal transformer over those tokens, [`guidance`] mixes
//! conditional and unconditional logits, [`rewards`] scores decoded images,
//! [`grpo`] turns grouped rewards into policy updates, and [`metrics`]
//! evaluates samples. [`domain`] defines the toy image classes and their
//! exact oracle; [`config`], [`checkpoint`] and [`run`] wire everything into
//! reproducible runs.

pub mod checkpoint;
pub mod config;
pub mod domain;
pub mod grpo;
pub mod guidance;
pub mod metrics;
pub mod policy;
pub mod rewards;
pub mod run;
pub mod tensor;
pub mod tokenizer;
