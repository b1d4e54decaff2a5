//! Data-layout tokenization: `[Loc_*][Size_*][Offset_*]...`.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::typelib::{DataLayout, Location};

pub const UNK_LAYOUT: &str = "<unk-layout>";
pub const NO_LAYOUT: &str = "<no-layout>";
pub const UNK_LAYOUT_ID: usize = 0;
pub const NO_LAYOUT_ID: usize = 1;

pub fn location_token(loc: &Location) -> String {
    match loc {
        Location::Register(r) => format!("Loc_{r}"),
        Location::Stack(off) if *off < 0 => format!("Loc_S-0x{:x}", off.unsigned_abs()),
        Location::Stack(off) => format!("Loc_S0x{off:x}"),
    }
}

pub fn layout_tokens(layout: &DataLayout) -> Vec<String> {
    let mut out = Vec::with_capacity(2 + layout.offsets.len());
    out.push(location_token(&layout.location));
    out.push(format!("Size_{}", layout.size));
    out.extend(layout.offsets.iter().map(|o| format!("Offset_{o}")));
    out
}

/// Inverse of [`layout_tokens`].
pub fn parse_layout_tokens<S: AsRef<str>>(tokens: &[S]) -> Result<DataLayout> {
    let bad = |t: &str| Error::Schema {
        context: "layout tokens".into(),
        path: t.to_string(),
        message: "unrecognized layout token".into(),
    };
    let [loc, size, offsets @ ..] = tokens else {
        return Err(bad("<too short>"));
    };
    let loc = loc.as_ref();
    let rest = loc.strip_prefix("Loc_").ok_or_else(|| bad(loc))?;
    let location = if let Some(hex) = rest.strip_prefix("S0x") {
        Location::Stack(i64::from_str_radix(hex, 16).map_err(|_| bad(loc))?)
    } else if let Some(hex) = rest.strip_prefix("S-0x") {
        Location::Stack(-i64::from_str_radix(hex, 16).map_err(|_| bad(loc))?)
    } else {
        Location::Register(rest.to_string())
    };
    let size_tok = size.as_ref();
    let size = size_tok
        .strip_prefix("Size_")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad(size_tok))?;
    let offsets = offsets
        .iter()
        .map(|t| {
            let t = t.as_ref();
            t.strip_prefix("Offset_").and_then(|s| s.parse().ok()).ok_or_else(|| bad(t))
        })
        .collect::<Result<Vec<u64>>>()?;
    Ok(DataLayout {
        location,
        size,
        offsets,
    })
}

/// Closed vocabulary of layout tokens seen in training.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LayoutVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for LayoutVocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        LayoutVocab { tokens, index }
    }
}

impl From<LayoutVocab> for Vec<String> {
    fn from(v: LayoutVocab) -> Self {
        v.tokens
    }
}

impl LayoutVocab {
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut all = vec![UNK_LAYOUT.to_string(), NO_LAYOUT.to_string()];
        let seen: BTreeSet<&str> = tokens.into_iter().filter(|t| *t != UNK_LAYOUT && *t != NO_LAYOUT).collect();
        all.extend(seen.into_iter().map(str::to_string));
        all.into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Ids for a token sequence; an empty sequence becomes `[<no-layout>]`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], max_len: usize) -> Vec<usize> {
        if tokens.is_empty() {
            return vec![NO_LAYOUT_ID];
        }
        tokens
            .iter()
            .take(max_len.max(1))
            .map(|t| self.index.get(t.as_ref()).copied().unwrap_or(UNK_LAYOUT_ID))
            .collect()
    }
}
