use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io;
use crate::typelib::{parse_canonical, DataLayout, ScalarTable, TypeLibrary, COMPONENT, COMPONENT_ID, UNKNOWN_ID};

use super::bpe::{SubwordVocab, VAR};
use super::layout::layout_tokens;
use super::literals::normalize_literals;
use super::names::{NameVocab, NO_NAME_ID};
use super::raw::RawFunction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableRecord {
    /// Position of the variable in the source `RawFunction`.
    pub index: usize,
    pub decompiler_name: String,
    /// Subword positions of every occurrence (A_t).
    pub occurrences: Vec<usize>,
    pub layout: DataLayout,
    pub layout_tokens: Vec<String>,
    /// Every occurrence fell beyond the sequence limit.
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decompiler_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_type_id: Option<usize>,
    #[serde(default)]
    pub gold_struct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_name_id: Option<usize>,
}

impl VariableRecord {
    pub fn is_component(&self) -> bool {
        self.gold_type_id == Some(COMPONENT_ID)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessedFunction {
    pub binary_id: String,
    pub function_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opt_level: Option<String>,
    pub subword_ids: Vec<u32>,
    /// Ordered by first occurrence.
    pub variables: Vec<VariableRecord>,
    pub body_hash: String,
    /// Subword length before truncation.
    pub full_length: usize,
    /// Whether the body also occurs in the training split (valid/test only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_training: Option<bool>,
}

impl ProcessedFunction {
    pub fn key(&self) -> String {
        format!("{}/{}", self.binary_id, self.function_id)
    }

    /// Variables that reach the model, in decoding order.
    pub fn predictable(&self) -> impl Iterator<Item = &VariableRecord> {
        self.variables.iter().filter(|v| !v.truncated)
    }

    /// Shortens the body to `max_seq_length` subwords, dropping occurrences
    /// beyond it exactly as encoding with that budget would.
    pub fn truncate(&mut self, max_seq_length: usize) {
        if self.subword_ids.len() <= max_seq_length {
            return;
        }
        self.subword_ids.truncate(max_seq_length);
        for v in &mut self.variables {
            v.occurrences.retain(|&o| o < max_seq_length);
            v.truncated = v.occurrences.is_empty();
        }
        self.variables
            .sort_by_key(|v| (v.occurrences.first().copied().unwrap_or(usize::MAX), v.index));
    }
}

/// Normalized gold label of one variable.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldType {
    pub canonical: String,
    pub id: usize,
    pub struct_related: bool,
}

/// Normalizes a gold canonical string and looks it up in the library;
/// absent types map to the unknown sentinel.
pub fn resolve_gold(canonical: &str, lib: &TypeLibrary, table: &ScalarTable) -> GoldType {
    if canonical == COMPONENT {
        return GoldType {
            canonical: canonical.to_string(),
            id: COMPONENT_ID,
            struct_related: false,
        };
    }
    let (canonical, struct_related) = match parse_canonical(canonical, table) {
        Ok(e) => (e.canonical(), e.is_struct_related()),
        Err(_) => (
            canonical.to_string(),
            canonical.starts_with("struct ") || canonical.starts_with("union "),
        ),
    };
    let id = lib.id_of(&canonical).unwrap_or(UNKNOWN_ID);
    GoldType {
        canonical,
        id,
        struct_related,
    }
}

/// Hash of the literal-normalized body with variable occurrences replaced
/// by a sentinel, so renamed copies of one function collide.
pub fn body_hash(raw: &RawFunction) -> String {
    let mut toks = normalize_literals(&raw.tokens);
    for v in &raw.variables {
        for &i in &v.occurrences {
            if let Some(t) = toks.get_mut(i) {
                *t = VAR.to_string();
            }
        }
    }
    io::sha256_hex(toks.join("\u{1f}").as_bytes())
}

/// Stateful encoder holding the vocabularies of one dataset.
pub struct Encoder<'a> {
    pub subwords: &'a SubwordVocab,
    pub names: &'a NameVocab,
    pub types: &'a TypeLibrary,
    pub max_seq_length: usize,
    table: ScalarTable,
}

impl<'a> Encoder<'a> {
    pub fn new(subwords: &'a SubwordVocab, names: &'a NameVocab, types: &'a TypeLibrary, max_seq_length: usize) -> Self {
        Encoder {
            subwords,
            names,
            types,
            max_seq_length,
            table: types.scalar_table(),
        }
    }

    pub fn encode(&self, raw: &RawFunction) -> Result<ProcessedFunction> {
        raw.validate()?;
        let normalized = normalize_literals(&raw.tokens);
        let mut subword_ids = Vec::new();
        let mut token_pieces: Vec<std::ops::Range<usize>> = Vec::with_capacity(normalized.len());
        for tok in &normalized {
            let start = subword_ids.len();
            subword_ids.extend(self.subwords.encode_word(tok));
            token_pieces.push(start..subword_ids.len());
        }
        let full_length = subword_ids.len();
        subword_ids.truncate(self.max_seq_length);

        let mut variables: Vec<VariableRecord> = raw
            .variables
            .iter()
            .enumerate()
            .map(|(index, v)| {
                let mut occurrences: Vec<usize> = v
                    .occurrences
                    .iter()
                    .flat_map(|&i| token_pieces[i].clone())
                    .filter(|&p| p < self.max_seq_length)
                    .collect();
                occurrences.sort_unstable();
                occurrences.dedup();
                let gold = v.gold_type.as_deref().map(|g| resolve_gold(g, self.types, &self.table));
                let gold_name_id = match (&gold, &v.gold_name) {
                    (Some(g), _) if g.id == COMPONENT_ID => Some(NO_NAME_ID),
                    (_, Some(n)) => Some(self.names.id(n)),
                    _ => None,
                };
                VariableRecord {
                    index,
                    decompiler_name: v.decompiler_name.clone(),
                    truncated: occurrences.is_empty(),
                    occurrences,
                    layout_tokens: layout_tokens(&v.layout),
                    layout: v.layout.clone(),
                    decompiler_type: v.decompiler_type.clone(),
                    gold_type_id: gold.as_ref().map(|g| g.id),
                    gold_struct: gold.as_ref().is_some_and(|g| g.struct_related),
                    gold_type: gold.map(|g| g.canonical),
                    gold_name: v.gold_name.clone(),
                    gold_name_id,
                }
            })
            .collect();
        variables.sort_by_key(|v| (v.occurrences.first().copied().unwrap_or(usize::MAX), v.index));

        Ok(ProcessedFunction {
            binary_id: raw.binary_id.clone(),
            function_id: raw.function_id.clone(),
            opt_level: raw.opt_level.clone(),
            subword_ids,
            variables,
            body_hash: body_hash(raw),
            full_length,
            in_training: None,
        })
    }
}

pub fn encode_function(
    raw: &RawFunction,
    vocab: &SubwordVocab,
    name_vocab: &NameVocab,
    lib: &TypeLibrary,
    max_seq_length: usize,
) -> Result<ProcessedFunction> {
    Encoder::new(vocab, name_vocab, lib, max_seq_length).encode(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::bpe::train_bpe;
    use crate::corpus::raw::RawVariable;
    use crate::typelib::{Location, TypeEntry};

    fn var(name: &str, occ: Vec<usize>, gold: Option<&str>, gold_name: Option<&str>) -> RawVariable {
        RawVariable {
            decompiler_name: name.into(),
            occurrences: occ,
            layout: DataLayout {
                location: Location::Stack(28),
                size: 4,
                offsets: vec![0],
            },
            decompiler_type: Some("int".into()),
            gold_type: gold.map(String::from),
            gold_name: gold_name.map(String::from),
        }
    }

    fn setup() -> (SubwordVocab, NameVocab, TypeLibrary) {
        let words = ["v1", "v2", "x", "=", "+", ";", "(", ")", "foo"];
        let vocab = train_bpe(words, 40).unwrap();
        let names = NameVocab::build(["i", "n"], 10);
        let mut lib = TypeLibrary::new();
        lib.register(TypeEntry::scalar("int", 4)).unwrap();
        (vocab, names, lib)
    }

    #[test]
    fn single_occurrence_position() {
        let (vocab, names, lib) = setup();
        // x x x v1 ; -- every token is a single subword here
        let raw = RawFunction {
            binary_id: "b".into(),
            function_id: "f".into(),
            opt_level: None,
            tokens: ["x", "x", "x", "v1", ";"].map(String::from).to_vec(),
            variables: vec![var("v1", vec![3], Some("int"), Some("i"))],
        };
        let p = encode_function(&raw, &vocab, &names, &lib, 512).unwrap();
        assert_eq!(p.variables[0].occurrences, vec![3]);
        assert_eq!(p.variables[0].gold_type_id, lib.id_of("int"));
        assert_eq!(p.variables[0].gold_name_id, Some(names.id("i")));
        assert_eq!(p.variables[0].layout_tokens, ["Loc_S0x1c", "Size_4", "Offset_0"]);
    }

    #[test]
    fn truncation_flags_out_of_range_variables() {
        let (vocab, names, lib) = setup();
        let mut tokens: Vec<String> = vec!["x".to_string(); 600];
        tokens[3] = "v1".into();
        tokens[550] = "v2".into();
        let raw = RawFunction {
            binary_id: "b".into(),
            function_id: "f".into(),
            opt_level: None,
            tokens,
            variables: vec![var("v2", vec![550], Some("int"), None), var("v1", vec![3], Some("float"), None)],
        };
        let p = encode_function(&raw, &vocab, &names, &lib, 512).unwrap();
        assert_eq!(p.subword_ids.len(), 512);
        assert!(p.full_length >= 600);
        // first-occurrence order puts v1 first
        assert_eq!(p.variables[0].decompiler_name, "v1");
        assert!(!p.variables[0].truncated);
        assert_eq!(p.variables[0].gold_type_id, Some(UNKNOWN_ID));
        assert!(p.variables[1].truncated);
        assert!(p.variables[1].occurrences.is_empty());

        let full = encode_function(&raw, &vocab, &names, &lib, 2048).unwrap();
        let mut cut = full.clone();
        cut.truncate(512);
        assert_eq!(cut.subword_ids, p.subword_ids);
        assert_eq!(
            cut.variables.iter().map(|v| (v.index, v.truncated)).collect::<Vec<_>>(),
            p.variables.iter().map(|v| (v.index, v.truncated)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn occurrences_cover_every_piece_and_decode_to_the_name() {
        let (vocab, names, lib) = setup();
        let raw = RawFunction {
            binary_id: "b".into(),
            function_id: "f".into(),
            opt_level: None,
            tokens: ["foo", "(", "v12", ")", "+", "v12"].map(String::from).to_vec(),
            variables: vec![var("v12", vec![2, 5], None, None)],
        };
        let p = encode_function(&raw, &vocab, &names, &lib, 512).unwrap();
        let v = &p.variables[0];
        let pieces: Vec<u32> = v.occurrences.iter().map(|&i| p.subword_ids[i]).collect();
        let decoded = vocab.decode(&pieces);
        assert_eq!(decoded, "v12v12");
    }

    #[test]
    fn body_hash_ignores_literals_and_renaming() {
        let mk = |lit: &str, name: &str| RawFunction {
            binary_id: "b".into(),
            function_id: "f".into(),
            opt_level: None,
            tokens: vec![name.into(), "=".into(), lit.into()],
            variables: vec![var(name, vec![0], None, None)],
        };
        assert_eq!(body_hash(&mk("1", "v1")), body_hash(&mk("4095", "v1")));
        assert_eq!(body_hash(&mk("1", "v1")), body_hash(&mk("1", "v9")));
        let other = RawFunction {
            tokens: vec!["v1".into(), "+=".into(), "1".into()],
            ..mk("1", "v1")
        };
        assert_ne!(body_hash(&mk("1", "v1")), body_hash(&other));
    }

    #[test]
    fn gold_strings_are_normalized_before_lookup() {
        let mut lib = TypeLibrary::new();
        let id = lib.register(TypeEntry::pointer(TypeEntry::scalar("char", 1))).unwrap();
        let table = lib.scalar_table();
        let g = resolve_gold("char *", &lib, &table);
        assert_eq!(g.id, id);
        let s = resolve_gold("struct p { int a @0; } *", &lib, &table);
        assert!(s.struct_related);
        assert_eq!(s.id, UNKNOWN_ID);
    }
}
