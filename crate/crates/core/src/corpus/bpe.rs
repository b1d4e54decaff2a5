//! Byte-pair encoding over code tokens. Each code token is encoded on its
//! own; merges never cross token boundaries.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::literals::{NUM, STR};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const VAR: &str = "<Var>";

/// Tokens that are never split and are not part of the learned alphabet.
pub const SPECIALS: [&str; 7] = [PAD, UNK, BOS, EOS, NUM, STR, VAR];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabFile {
    specials: Vec<String>,
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct SubwordVocab {
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    /// (left id, right id) -> (rank, merged id)
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

impl SubwordVocab {
    fn build(alphabet: Vec<char>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut tokens: Vec<String> = Vec::new();
        let mut index: HashMap<String, u32> = HashMap::new();
        for s in SPECIALS {
            intern(&mut tokens, &mut index, s.to_string());
        }
        for c in &alphabet {
            intern(&mut tokens, &mut index, c.to_string());
        }
        let mut ranks = HashMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let li = index_of(&index, l)?;
            let ri = index_of(&index, r)?;
            let merged = intern(&mut tokens, &mut index, format!("{l}{r}"));
            ranks.entry((li, ri)).or_insert((rank, merged));
        }
        Ok(SubwordVocab {
            alphabet,
            merges,
            tokens,
            index,
            ranks,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Subword ids for one code token. Characters outside the alphabet map
    /// to `<unk>`.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        if let Some(i) = SPECIALS.iter().position(|s| *s == word) {
            return vec![i as u32];
        }
        let mut syms: Vec<u32> = word
            .chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.index.get(c.encode_utf8(&mut buf) as &str).copied().unwrap_or(UNK_ID)
            })
            .collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, merged)| (rank, w[0], w[1], merged)))
                .min_by_key(|&(rank, ..)| rank);
            let Some((_, l, r, merged)) = best else { break };
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            syms = out;
        }
        syms
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            specials: SPECIALS.iter().map(|s| s.to_string()).collect(),
            alphabet: self.alphabet.clone(),
            merges: self.merges.clone(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Vocab(e.to_string()))
    }

    pub fn from_json(context: &str, text: &str) -> Result<Self> {
        let file: VocabFile = crate::io::from_json_str(context, text)?;
        if file.specials != SPECIALS {
            return Err(Error::Vocab(format!("{context}: special tokens differ from this build")));
        }
        Self::build(file.alphabet, file.merges)
    }
}

fn intern(tokens: &mut Vec<String>, index: &mut HashMap<String, u32>, s: String) -> u32 {
    if let Some(&i) = index.get(&s) {
        return i;
    }
    let i = tokens.len() as u32;
    index.insert(s.clone(), i);
    tokens.push(s);
    i
}

fn index_of(index: &HashMap<String, u32>, s: &str) -> Result<u32> {
    index
        .get(s)
        .copied()
        .ok_or_else(|| Error::Vocab(format!("merge refers to unknown symbol `{s}`")))
}

/// Number of distinct characters in the non-special words of `words`.
pub fn alphabet_size<'a>(words: impl IntoIterator<Item = &'a str>) -> usize {
    words
        .into_iter()
        .filter(|w| !SPECIALS.contains(w))
        .flat_map(str::chars)
        .collect::<BTreeSet<char>>()
        .len()
}

/// Learns `vocab_size - |alphabet|` merges from the given words (special
/// tokens are skipped). Ties in pair frequency go to the lexicographically
/// smallest `(left, right)` pair.
pub fn train_bpe<'a>(words: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Result<SubwordVocab> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for w in words {
        if !SPECIALS.contains(&w) && !w.is_empty() {
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Vocab("cannot train on an empty corpus".into()));
    }
    let alphabet: Vec<char> = counts.keys().flat_map(|w| w.chars()).collect::<BTreeSet<_>>().into_iter().collect();
    if vocab_size < alphabet.len() {
        return Err(Error::Vocab(format!(
            "vocabulary size {vocab_size} is smaller than the base alphabet ({})",
            alphabet.len()
        )));
    }

    let mut symbols: Vec<String> = alphabet.iter().map(|c| c.to_string()).collect();
    let char_id: HashMap<char, u32> = alphabet.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
    let mut words: Vec<(Vec<u32>, u64)> = counts
        .iter()
        .map(|(w, &n)| (w.chars().map(|c| char_id[&c]).collect(), n))
        .collect();

    let mut merges = Vec::new();
    for _ in 0..vocab_size - alphabet.len() {
        let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                *pairs.entry((w[0], w[1])).or_default() += n;
            }
        }
        let best = pairs.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                // Larger in this ordering means lexicographically smaller pair.
                let ka = (&symbols[pa.0 as usize], &symbols[pa.1 as usize]);
                let kb = (&symbols[pb.0 as usize], &symbols[pb.1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some(((l, r), _)) = best else { break };
        let merged = symbols.len() as u32;
        symbols.push(format!("{}{}", symbols[l as usize], symbols[r as usize]));
        merges.push((symbols[l as usize].clone(), symbols[r as usize].clone()));
        for (syms, _) in &mut words {
            if syms.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
        }
    }
    SubwordVocab::build(alphabet, merges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Counts adjacent pairs by brute force and returns the winning pair.
    fn oracle_first_merge(words: &[&str]) -> Option<(String, String)> {
        let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for w in words {
            let cs: Vec<char> = w.chars().collect();
            for i in 0..cs.len().saturating_sub(1) {
                *counts.entry((cs[i].to_string(), cs[i + 1].to_string())).or_default() += 1;
            }
        }
        let max = *counts.values().max()?;
        counts.into_iter().find(|(_, c)| *c == max).map(|(p, _)| p)
    }

    #[test]
    fn single_merge_on_aaaa() {
        let words = ["aaaa"];
        let size = alphabet_size(words) + 1;
        let v = train_bpe(words, size).unwrap();
        assert_eq!(v.merges(), &[("a".to_string(), "a".to_string())]);
        assert_eq!(oracle_first_merge(&words), Some(("a".into(), "a".into())));
        assert_eq!(v.encode_word("aaaa").len(), 2);
    }

    #[test]
    fn alphabet_sized_vocab_has_no_merges() {
        let words = ["abc", "bca"];
        let v = train_bpe(words, alphabet_size(words)).unwrap();
        assert!(v.merges().is_empty());
        assert!(train_bpe(words, 2).is_err());
    }

    #[test]
    fn first_merge_matches_oracle_with_ties() {
        let words = ["ab", "cd", "ab", "cd", "xy"];
        let v = train_bpe(words, alphabet_size(words) + 1).unwrap();
        assert_eq!(Some(v.merges()[0].clone()), oracle_first_merge(&words));
        assert_eq!(v.merges()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn specials_stay_atomic_and_unknown_chars_map_to_unk() {
        let v = train_bpe(["v1", "v2", "<Num>"], 6).unwrap();
        assert_eq!(v.encode_word("<Num>"), vec![v.id(NUM).unwrap()]);
        assert_eq!(v.encode_word("z"), vec![UNK_ID]);
    }

    #[test]
    fn json_round_trip_preserves_encoding() {
        let words = ["malloc", "memcpy", "memset", "v1", "v12"];
        let v = train_bpe(words, 20).unwrap();
        let back = SubwordVocab::from_json("t", &v.to_json().unwrap()).unwrap();
        for w in words {
            assert_eq!(back.encode_word(w), v.encode_word(w));
        }
    }

    proptest! {
        #[test]
        fn decode_inverts_encode_and_training_is_deterministic(
            words in prop::collection::vec("[a-e_]{1,8}", 1..20),
            extra in 0usize..30,
        ) {
            let refs: Vec<&str> = words.iter().map(String::as_str).collect();
            let size = alphabet_size(refs.iter().copied()) + extra;
            let a = train_bpe(refs.iter().copied(), size).unwrap();
            let b = train_bpe(refs.iter().copied(), size).unwrap();
            prop_assert_eq!(a.merges(), b.merges());
            for w in &refs {
                let ids = a.encode_word(w);
                prop_assert_eq!(&a.decode(&ids), w);
                prop_assert_eq!(a.encode_word(&a.decode(&ids)), ids);
            }
        }
    }
}
