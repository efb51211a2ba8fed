//! A desk-scale laboratory for studying backdoor attacks on contrastive
//! sentence encoders: synthetic corpora, a tiny transformer encoder with
//! hand-written backprop, poisoning, contrastive training, evaluation,
//! transfer probes and representation analysis.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod corpus;
pub mod eval;
pub mod nn;
pub mod poison;
pub mod rng;
pub mod transfer;
