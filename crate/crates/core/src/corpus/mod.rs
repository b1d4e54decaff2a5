//! Corpus ingestion, tokenization and dataset construction.

pub mod bpe;
pub mod encode;
pub mod layout;
pub mod literals;
pub mod names;
pub mod pipeline;
pub mod raw;
pub mod split;

pub use bpe::{train_bpe, SubwordVocab};
pub use encode::{body_hash, encode_function, Encoder, ProcessedFunction, VariableRecord};
pub use layout::{layout_tokens, parse_layout_tokens, LayoutVocab};
pub use literals::normalize_literals;
pub use names::NameVocab;
pub use pipeline::{preprocess, preprocess_functions, read_split, DatasetManifest, PreprocessConfig, Vocabularies};
pub use raw::{label_components, read_corpus, RawFunction, RawVariable};
pub use split::{mark_function_in_training, split_per_binary, Split, SplitManifest};
