//! End-to-end preprocessing: raw corpus in, dataset directory out.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracing::info;

use crate::error::{Error, Result};
use crate::io;
use crate::typelib::{parse_canonical, ScalarTable, TypeEntry, TypeLibrary, COMPONENT};

use super::bpe::{train_bpe, SubwordVocab};
use super::encode::{Encoder, ProcessedFunction};
use super::layout::LayoutVocab;
use super::literals::normalize_literals;
use super::names::NameVocab;
use super::raw::{label_components, needs_prediction, read_corpus, RawFunction};
use super::split::{mark_function_in_training, split_per_binary, Split, SplitManifest};

pub const TYPELIB_FILE: &str = "typelib.jsonl";
pub const SUBWORDS_FILE: &str = "subwords.json";
pub const NAMES_FILE: &str = "names.json";
pub const LAYOUTS_FILE: &str = "layouts.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn split_file(split: Split) -> String {
    format!("{}.jsonl", split.name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub seed: u64,
    pub ratios: [f64; 3],
    /// Alphabet plus merges; specials are added on top.
    pub subword_vocab_size: usize,
    pub name_vocab_size: usize,
    pub max_seq_length: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            seed: 0,
            ratios: [0.8, 0.1, 0.1],
            subword_vocab_size: 2000,
            name_vocab_size: 10_000,
            max_seq_length: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: SplitManifest,
    pub config: PreprocessConfig,
    pub counts: BTreeMap<String, usize>,
    /// sha256 of every artifact, keyed by file name.
    pub hashes: BTreeMap<String, String>,
}

/// Everything the model side needs from a dataset directory.
#[derive(Debug, Clone)]
pub struct Vocabularies {
    pub types: TypeLibrary,
    pub subwords: SubwordVocab,
    pub names: NameVocab,
    pub layouts: LayoutVocab,
}

impl Vocabularies {
    pub fn load(dir: &Path) -> Result<Self> {
        let types = TypeLibrary::read(&dir.join(TYPELIB_FILE))?;
        let sub_path = dir.join(SUBWORDS_FILE);
        let text = std::fs::read_to_string(&sub_path).map_err(|e| io::not_found_or_io(&sub_path, e))?;
        let subwords = SubwordVocab::from_json(&sub_path.display().to_string(), &text)?;
        let names = io::read_json(&dir.join(NAMES_FILE))?;
        let layouts = io::read_json(&dir.join(LAYOUTS_FILE))?;
        Ok(Vocabularies {
            types,
            subwords,
            names,
            layouts,
        })
    }

    /// Hashes of the four vocabulary files, used to pin checkpoints to data.
    pub fn file_hashes(dir: &Path) -> Result<BTreeMap<String, String>> {
        [TYPELIB_FILE, SUBWORDS_FILE, NAMES_FILE, LAYOUTS_FILE]
            .into_iter()
            .map(|f| Ok((f.to_string(), io::file_sha256(&dir.join(f))?)))
            .collect()
    }
}

/// Registers each distinct gold type in sorted order. A top-level leaf the
/// parser does not know is registered as a typedef sized by its layout.
pub fn build_type_library(functions: &[RawFunction], seed_types: &[String]) -> Result<TypeLibrary> {
    let mut lib = TypeLibrary::new();
    for canonical in seed_types {
        let table = lib.scalar_table();
        lib.register(parse_canonical(canonical, &table)?)?;
    }
    let mut gold: BTreeMap<&str, u64> = BTreeMap::new();
    for f in functions {
        for v in &f.variables {
            if let Some(g) = v.gold_type.as_deref().filter(|g| *g != COMPONENT) {
                gold.entry(g).or_insert(v.layout.size);
            }
        }
    }
    let mut table: ScalarTable = lib.scalar_table();
    for (canonical, size) in gold {
        let entry = match parse_canonical(canonical, &table) {
            Ok(e) => e,
            Err(_) if is_plain_name(canonical) => {
                table.insert(canonical, crate::typelib::TypeKind::Typedef, size);
                TypeEntry::typedef(canonical, size)
            }
            Err(e) => {
                tracing::warn!(canonical, error = %e, "gold type left out of the library");
                continue;
            }
        };
        if entry.validate().is_ok() {
            lib.register(entry)?;
        }
    }
    Ok(lib)
}

fn is_plain_name(s: &str) -> bool {
    !s.is_empty() && !s.contains(['{', '}', '[', ']', '*', '@', ';'])
}

/// Writes typelib, vocabularies, split shards and the manifest into `out`.
pub fn preprocess(corpus: &Path, out: &Path, config: &PreprocessConfig, seed_types: &[String]) -> Result<DatasetManifest> {
    let raw = read_corpus(corpus)?;
    preprocess_functions(raw, out, config, seed_types)
}

pub fn preprocess_functions(
    raw: Vec<RawFunction>,
    out: &Path,
    config: &PreprocessConfig,
    seed_types: &[String],
) -> Result<DatasetManifest> {
    if config.max_seq_length == 0 {
        return Err(Error::Config("max_seq_length must be positive".into()));
    }
    let mut functions: Vec<RawFunction> = raw.into_iter().map(label_components).filter(needs_prediction).collect();
    functions.sort_by(|a, b| (&a.binary_id, &a.function_id).cmp(&(&b.binary_id, &b.function_id)));
    let manifest = split_per_binary(functions.iter().map(|f| f.binary_id.as_str()), config.ratios, config.seed)?;
    let assignment = manifest.assignment();
    let mut parts: BTreeMap<Split, Vec<RawFunction>> = Split::ALL.iter().map(|s| (*s, Vec::new())).collect();
    for f in functions {
        let split = assignment[f.binary_id.as_str()];
        parts.get_mut(&split).expect("all splits present").push(f);
    }
    let train = &parts[&Split::Train];
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }

    let types = build_type_library(train, seed_types)?;
    let normalized: Vec<Vec<String>> = train.iter().map(|f| normalize_literals(&f.tokens)).collect();
    let words = normalized.iter().flatten().map(String::as_str);
    let subwords = train_bpe(words, config.subword_vocab_size)?;
    let names = NameVocab::build(
        train.iter().flat_map(|f| f.variables.iter().filter_map(|v| v.gold_name.as_deref())),
        config.name_vocab_size,
    );

    let encoder = Encoder::new(&subwords, &names, &types, config.max_seq_length);
    let mut encoded: BTreeMap<Split, Vec<ProcessedFunction>> = BTreeMap::new();
    for (split, fns) in &parts {
        encoded.insert(*split, fns.iter().map(|f| encoder.encode(f)).collect::<Result<_>>()?);
    }
    let layout_tokens: BTreeSet<&str> = encoded[&Split::Train]
        .iter()
        .flat_map(|f| f.variables.iter().flat_map(|v| v.layout_tokens.iter().map(String::as_str)))
        .collect();
    let layouts = LayoutVocab::build(layout_tokens);

    for split in [Split::Valid, Split::Test] {
        let flags = mark_function_in_training(&encoded[&split], &encoded[&Split::Train]);
        for (f, flag) in encoded.get_mut(&split).expect("present").iter_mut().zip(flags) {
            f.in_training = Some(flag);
        }
    }

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    types.write(&out.join(TYPELIB_FILE))?;
    io::write_atomic(&out.join(SUBWORDS_FILE), subwords.to_json()?.as_bytes())?;
    io::write_json(&out.join(NAMES_FILE), &names)?;
    io::write_json(&out.join(LAYOUTS_FILE), &layouts)?;
    let mut counts = BTreeMap::new();
    for (split, fns) in &encoded {
        io::write_jsonl(&out.join(split_file(*split)), fns)?;
        counts.insert(split.name().to_string(), fns.len());
    }
    let mut hashes = BTreeMap::new();
    let files = [TYPELIB_FILE, SUBWORDS_FILE, NAMES_FILE, LAYOUTS_FILE]
        .into_iter()
        .map(String::from)
        .chain(Split::ALL.iter().map(|s| split_file(*s)));
    for f in files {
        hashes.insert(f.clone(), io::file_sha256(&out.join(&f))?);
    }
    let manifest = DatasetManifest {
        split: manifest,
        config: config.clone(),
        counts,
        hashes,
    };
    io::write_json(&out.join(MANIFEST_FILE), &manifest)?;
    info!(
        types = types.len(),
        subwords = subwords.len(),
        names = names.len(),
        train = manifest.counts["train"],
        "preprocessed dataset"
    );
    Ok(manifest)
}

pub fn read_split(dir: &Path, split: Split) -> Result<Vec<ProcessedFunction>> {
    io::read_jsonl(&dir.join(split_file(split)))
}

pub fn dataset_path(dir: &Path, file: &str) -> PathBuf {
    dir.join(file)
}
