//! Type and name recovery for decompiled functions with a transformer
//! encoder-decoder and a data-layout soft mask.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod predict;
pub mod service;
pub mod synthetic;
pub mod training;
pub mod typelib;

pub use error::{Error, Result};
