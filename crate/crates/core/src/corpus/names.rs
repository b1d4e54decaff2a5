use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub const UNK_NAME: &str = "<unk-name>";
/// Label emitted on the name step of a `<Component>` variable.
pub const NO_NAME: &str = "<no-name>";
pub const UNK_NAME_ID: usize = 0;
pub const NO_NAME_ID: usize = 1;

/// The `n` most frequent developer names plus two reserved labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct NameVocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for NameVocab {
    fn from(names: Vec<String>) -> Self {
        let index = names.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        NameVocab { names, index }
    }
}

impl From<NameVocab> for Vec<String> {
    fn from(v: NameVocab) -> Self {
        v.names
    }
}

impl NameVocab {
    /// Frequency order, ties broken alphabetically.
    pub fn build<'a>(names: impl IntoIterator<Item = &'a str>, n: usize) -> Self {
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for name in names {
            if name != UNK_NAME && name != NO_NAME {
                *counts.entry(name).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut all = vec![UNK_NAME.to_string(), NO_NAME.to_string()];
        all.extend(ranked.into_iter().take(n).map(|(s, _)| s.to_string()));
        all.into()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> usize {
        self.index.get(name).copied().unwrap_or(UNK_NAME_ID)
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }
}
