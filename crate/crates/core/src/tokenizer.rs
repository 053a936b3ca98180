//! Byte-level BPE shared by the code and text streams.
//!
//! Ids `0..256` are raw bytes, ids `256..256 + merges.len()` are learned
//! merges in rank order, and the six special tokens sit above the learned
//! range. Encoding never emits a special id.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::TokenizerError;

pub const FORMAT_VERSION: u32 = 1;
pub const BYTE_VOCAB: usize = 256;
pub const DEFAULT_VOCAB_SIZE: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Special {
    Pad,
    Bos,
    Eos,
    CodeSlot,
    Human,
    Assistant,
}

impl Special {
    pub const ALL: [Special; 6] =
        [Special::Pad, Special::Bos, Special::Eos, Special::CodeSlot, Special::Human, Special::Assistant];

    pub fn name(self) -> &'static str {
        match self {
            Special::Pad => "PAD",
            Special::Bos => "BOS",
            Special::Eos => "EOS",
            Special::CodeSlot => "CODE_SLOT",
            Special::Human => "HUMAN",
            Special::Assistant => "ASSISTANT",
        }
    }

    fn from_name(name: &str) -> Option<Special> {
        Special::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Resolved special-token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub code_slot: u32,
    pub human: u32,
    pub assistant: u32,
}

impl SpecialIds {
    pub fn get(&self, s: Special) -> u32 {
        match s {
            Special::Pad => self.pad,
            Special::Bos => self.bos,
            Special::Eos => self.eos,
            Special::CodeSlot => self.code_slot,
            Special::Human => self.human,
            Special::Assistant => self.assistant,
        }
    }

    pub fn contains(&self, id: u32) -> bool {
        Special::ALL.iter().any(|&s| self.get(s) == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerModel {
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    pieces: Vec<Vec<u8>>,
    specials: SpecialIds,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    version: u32,
    merges: Vec<[u32; 2]>,
    specials: BTreeMap<String, u32>,
}

impl TokenizerModel {
    /// Greedy BPE training: repeatedly merge the most frequent adjacent pair,
    /// breaking ties by the lexicographically smallest `(left, right)` byte
    /// strings, until the vocabulary holds exactly `vocab_size` entries.
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Self, TokenizerError> {
        let n_special = Special::ALL.len();
        if vocab_size <= BYTE_VOCAB + n_special {
            return Err(TokenizerError::Training(format!(
                "vocab_size must exceed {}",
                BYTE_VOCAB + n_special
            )));
        }
        if corpus.iter().all(|s| s.as_ref().is_empty()) {
            return Err(TokenizerError::Training("empty corpus".into()));
        }
        let n_merges = vocab_size - BYTE_VOCAB - n_special;

        let mut counts: HashMap<&str, u64> = HashMap::new();
        for s in corpus {
            if !s.as_ref().is_empty() {
                *counts.entry(s.as_ref()).or_default() += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, u64)> =
            counts.into_iter().map(|(s, c)| (s.bytes().map(u32::from).collect(), c)).collect();
        words.sort();

        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut merges = Vec::with_capacity(n_merges);
        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        while merges.len() < n_merges {
            pair_counts.clear();
            for (w, c) in &words {
                for p in w.windows(2) {
                    *pair_counts.entry((p[0], p[1])).or_default() += c;
                }
            }
            let best = pair_counts.iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&pieces[pa.0 as usize], &pieces[pa.1 as usize]);
                    let kb = (&pieces[pb.0 as usize], &pieces[pb.1 as usize]);
                    kb.cmp(&ka).then_with(|| pb.cmp(pa))
                })
            });
            let Some((&pair, _)) = best else {
                return Err(TokenizerError::Training(format!(
                    "corpus supports only {} merges, {} requested",
                    merges.len(),
                    n_merges
                )));
            };
            let new_id = (BYTE_VOCAB + merges.len()) as u32;
            let mut piece = pieces[pair.0 as usize].clone();
            piece.extend_from_slice(&pieces[pair.1 as usize]);
            pieces.push(piece);
            merges.push(pair);
            for (w, _) in words.iter_mut() {
                merge_in_place(w, pair, new_id);
            }
        }
        Ok(Self::from_merges(merges))
    }

    fn from_merges(merges: Vec<(u32, u32)>) -> Self {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let mut piece = pieces[l as usize].clone();
            piece.extend_from_slice(&pieces[r as usize]);
            pieces.push(piece);
            ranks.insert((l, r), rank as u32);
        }
        let base = (BYTE_VOCAB + merges.len()) as u32;
        let specials = SpecialIds {
            pad: base,
            bos: base + 1,
            eos: base + 2,
            code_slot: base + 3,
            human: base + 4,
            assistant: base + 5,
        };
        TokenizerModel { merges, ranks, pieces, specials }
    }

    pub fn vocab_size(&self) -> usize {
        BYTE_VOCAB + self.merges.len() + Special::ALL.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn special(&self, s: Special) -> u32 {
        self.specials.get(s)
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.specials.contains(id)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    /// Applies merges lowest rank first until no adjacent pair is mergeable.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = bytes.iter().map(|&b| u32::from(b)).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            merge_in_place(&mut ids, pair, BYTE_VOCAB as u32 + rank);
        }
        ids
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            if let Some(piece) = self.pieces.get(id as usize) {
                out.extend_from_slice(piece);
            } else if let Some(s) = Special::ALL.into_iter().find(|&s| self.special(s) == id) {
                out.extend_from_slice(format!("<{}>", s.name()).as_bytes());
            } else {
                return Err(TokenizerError::UnknownId(id));
            }
        }
        Ok(out)
    }

    /// Decodes to text; invalid UTF-8 (possible mid-generation) is replaced.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    pub fn to_json(&self) -> String {
        let file = TokenizerFile {
            version: FORMAT_VERSION,
            merges: self.merges.iter().map(|&(l, r)| [l, r]).collect(),
            specials: Special::ALL.iter().map(|&s| (s.name().to_string(), self.special(s))).collect(),
        };
        serde_json::to_string(&file).expect("tokenizer serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        let file: TokenizerFile =
            serde_json::from_str(text).map_err(|e| TokenizerError::Format(e.to_string()))?;
        if file.version != FORMAT_VERSION {
            return Err(TokenizerError::Format(format!("unsupported version {}", file.version)));
        }
        for (i, &[l, r]) in file.merges.iter().enumerate() {
            let limit = (BYTE_VOCAB + i) as u32;
            if l >= limit || r >= limit {
                return Err(TokenizerError::Format(format!("merge {i} references a later token")));
            }
        }
        let model = Self::from_merges(file.merges.iter().map(|&[l, r]| (l, r)).collect());
        for (name, id) in &file.specials {
            let s = Special::from_name(name)
                .ok_or_else(|| TokenizerError::Format(format!("unknown special token {name}")))?;
            if model.special(s) != *id {
                return Err(TokenizerError::Format(format!("special {name} has id {id}, expected {}", model.special(s))));
            }
        }
        if file.specials.len() != Special::ALL.len() {
            return Err(TokenizerError::Format("missing special tokens".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Replaces non-overlapping occurrences of `pair`, scanning left to right.
fn merge_in_place(ids: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    if ids.len() < 2 {
        return;
    }
    let mut out = 0;
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && ids[i] == pair.0 && ids[i + 1] == pair.1 {
            ids[out] = new_id;
            i += 2;
        } else {
            ids[out] = ids[i];
            i += 1;
        }
        out += 1;
    }
    ids.truncate(out);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> TokenizerModel {
        let corpus = ["int main(){ return 0; }", "int add(int a, int b){ return a + b; }", "char *p = malloc(10);"];
        TokenizerModel::train(&corpus, 300).unwrap()
    }

    #[test]
    fn first_merge_is_the_only_pair() {
        let tok = TokenizerModel::train(&["aaaa"], 258 + 6).unwrap();
        assert_eq!(tok.merges()[0], (b'a' as u32, b'a' as u32));
        assert_eq!(tok.vocab_size(), 264);
        assert_eq!(tok.encode("aaaa"), vec![257]);
    }

    #[test]
    fn vocab_size_is_exact() {
        let tok = small();
        assert_eq!(tok.vocab_size(), 300);
        assert_eq!(tok.special(Special::Assistant), 299);
        assert_eq!(tok.special(Special::Pad), 294);
    }

    #[test]
    fn training_errors() {
        assert!(TokenizerModel::train::<&str>(&[], 300).is_err());
        assert!(TokenizerModel::train(&[""], 300).is_err());
        assert!(TokenizerModel::train(&["abc"], 262).is_err());
        // two pairs available, three merges requested
        assert!(TokenizerModel::train(&["abc"], 265).is_err());
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ab" and "cd" both occur once; ("a","b") sorts first.
        let tok = TokenizerModel::train(&["ab", "cd"], 263).unwrap();
        assert_eq!(tok.merges()[0], (b'a' as u32, b'b' as u32));
    }

    #[test]
    fn empty_and_known_round_trips() {
        let tok = small();
        assert!(tok.encode("").is_empty());
        assert_eq!(tok.decode(&tok.encode("int main(){}")).unwrap(), "int main(){}");
    }

    #[test]
    fn unknown_ids_fail_to_decode() {
        let tok = small();
        assert!(matches!(tok.decode(&[300]), Err(TokenizerError::UnknownId(300))));
        assert_eq!(tok.decode(&[tok.special(Special::Eos)]).unwrap(), "<EOS>");
    }

    #[test]
    fn json_round_trip_and_rejections() {
        let tok = small();
        let back = TokenizerModel::from_json(&tok.to_json()).unwrap();
        assert_eq!(back, tok);
        let bumped = tok.to_json().replace("\"version\":1", "\"version\":9");
        assert!(TokenizerModel::from_json(&bumped).is_err());
        assert!(TokenizerModel::from_json("{").is_err());
    }

    proptest! {
        #[test]
        fn round_trips_arbitrary_text(s in "\\PC{0,64}") {
            let tok = small();
            prop_assert_eq!(tok.decode(&tok.encode(&s)).unwrap(), s);
        }

        #[test]
        fn round_trips_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let tok = small();
            let ids = tok.encode_bytes(&bytes);
            prop_assert!(ids.iter().all(|&id| !tok.is_special(id)));
            prop_assert_eq!(tok.decode_bytes(&ids).unwrap(), bytes);
        }
    }
}
