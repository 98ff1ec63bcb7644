//! Joint modelling of sentences and constituency parses with Transformer
//! language models.
//!
//! The crate is `no_std` (with `alloc`) and contains only computation: the
//! generative transition system, vocabularies, a small autodiff engine, the
//! model variants, word-synchronous beam search, evaluation arithmetic and
//! synthetic grammars. File formats and the command line live in the `synlm`
//! crate.

#![no_std]

extern crate alloc;

pub mod beam;
pub mod check;
pub mod eval;
pub mod model;
pub mod optim;
pub mod synthdata;
pub mod tensor;
pub mod transitions;
pub mod tree;
pub mod vocab;
