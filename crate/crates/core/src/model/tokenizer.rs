//! Byte-level BPE with GPT-2 style byte-to-unicode token strings.
//!
//! Every byte has a base token, so encoding is total and
//! `decode(encode(x)) == x` for arbitrary bytes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// GPT-2 `bytes_to_unicode`: printable bytes map to themselves, the rest
/// are shifted to code points starting at 256.
fn byte_to_char_table() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut shifted = 0u32;
    for b in 0..=255u8 {
        let keep = (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || b >= 0xAE;
        table[b as usize] = if keep {
            b as char
        } else {
            let c = char::from_u32(256 + shifted).unwrap();
            shifted += 1;
            c
        };
    }
    table
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    #[serde(default = "schema_one")]
    schema: u32,
    vocab: BTreeMap<String, TokenId>,
    merges: Vec<(String, String)>,
    #[serde(default)]
    specials: Vec<TokenId>,
}

fn schema_one() -> u32 {
    1
}

#[derive(Debug, Clone)]
pub struct BpeTable {
    vocab: HashMap<String, TokenId>,
    id_to_token: HashMap<TokenId, String>,
    /// (left, right) -> (rank, merged id)
    merges: HashMap<(TokenId, TokenId), (usize, TokenId)>,
    merge_list: Vec<(String, String)>,
    specials: BTreeSet<TokenId>,
    byte_ids: [TokenId; 256],
    char_to_byte: HashMap<char, u8>,
}

impl BpeTable {
    pub fn new(
        vocab: impl IntoIterator<Item = (String, TokenId)>,
        merges: Vec<(String, String)>,
        specials: impl IntoIterator<Item = TokenId>,
    ) -> Result<Self> {
        let vocab: HashMap<String, TokenId> = vocab.into_iter().collect();
        let mut id_to_token = HashMap::with_capacity(vocab.len());
        for (tok, &id) in &vocab {
            if let Some(prev) = id_to_token.insert(id, tok.clone()) {
                return Err(Error::Integrity(format!(
                    "token id {id} assigned to both {prev:?} and {tok:?}"
                )));
            }
        }
        let table = byte_to_char_table();
        let mut byte_ids = [0; 256];
        let mut char_to_byte = HashMap::with_capacity(256);
        for (b, c) in table.iter().enumerate() {
            let id = vocab.get(&c.to_string()).ok_or_else(|| {
                Error::Integrity(format!("vocabulary lacks the base token for byte {b:#04x}"))
            })?;
            byte_ids[b] = *id;
            char_to_byte.insert(*c, b as u8);
        }
        let mut merge_map = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.iter().enumerate() {
            let lookup = |s: &str| {
                vocab
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::Integrity(format!("merge references unknown token {s:?}")))
            };
            let merged = lookup(&format!("{a}{b}"))?;
            merge_map
                .entry((lookup(a)?, lookup(b)?))
                .or_insert((rank, merged));
        }
        let specials: BTreeSet<TokenId> = specials.into_iter().collect();
        if let Some(bad) = specials.iter().find(|id| !id_to_token.contains_key(id)) {
            return Err(Error::Integrity(format!("special id {bad} not in vocabulary")));
        }
        Ok(Self {
            vocab,
            id_to_token,
            merges: merge_map,
            merge_list: merges,
            specials,
            byte_ids,
            char_to_byte,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(text)?;
        if file.schema != 1 {
            return Err(Error::Format(format!(
                "unsupported tokenizer schema {}",
                file.schema
            )));
        }
        Self::new(file.vocab, file.merges, file.specials)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TokenizerFile {
            schema: 1,
            vocab: self.vocab.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            merges: self.merge_list.clone(),
            specials: self.specials.iter().copied().collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    /// Largest token id plus one.
    pub fn id_bound(&self) -> usize {
        self.id_to_token.keys().max().map_or(0, |m| *m as usize + 1)
    }

    pub fn specials(&self) -> &BTreeSet<TokenId> {
        &self.specials
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.vocab.get(token).copied()
    }

    pub fn encode(&self, text: &[u8]) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(text.len());
        for piece in pre_tokenize(text) {
            self.encode_piece(piece, &mut out);
        }
        out
    }

    fn encode_piece(&self, piece: &[u8], out: &mut Vec<TokenId>) {
        let mut symbols: Vec<TokenId> = piece.iter().map(|&b| self.byte_ids[b as usize]).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merges.get(&(w[0], w[1])).map(|&(rank, id)| (rank, w[0], w[1], id)))
                .min_by_key(|&(rank, ..)| rank);
            let Some((_, left, right, merged)) = best else {
                break;
            };
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = next;
        }
        out.extend(symbols);
    }

    /// Bytes of a single token. Special tokens decode to their literal text.
    pub fn token_bytes(&self, id: TokenId) -> Vec<u8> {
        let Some(tok) = self.id_to_token.get(&id) else {
            return Vec::new();
        };
        if self.specials.contains(&id) {
            return tok.as_bytes().to_vec();
        }
        tok.chars()
            .flat_map(|c| match self.char_to_byte.get(&c) {
                Some(b) => vec![*b],
                None => c.to_string().into_bytes(),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<u8> {
        ids.iter().flat_map(|&id| self.token_bytes(id)).collect()
    }

    /// Trains a tokenizer on `corpus` with `n_merges` greedy merges.
    /// Pair-frequency ties break toward the lexicographically smaller id pair.
    pub fn train(corpus: &[u8], n_merges: usize, specials: &[&str]) -> Result<Self> {
        let table = byte_to_char_table();
        let mut vocab: Vec<String> = table.iter().map(|c| c.to_string()).collect();
        let mut words: BTreeMap<Vec<TokenId>, usize> = BTreeMap::new();
        for piece in pre_tokenize(corpus) {
            *words
                .entry(piece.iter().map(|&b| b as TokenId).collect())
                .or_default() += 1;
        }
        let mut words: Vec<(Vec<TokenId>, usize)> = words.into_iter().collect();
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let mut counts: HashMap<(TokenId, TokenId), usize> = HashMap::new();
            for (w, n) in &words {
                for p in w.windows(2) {
                    *counts.entry((p[0], p[1])).or_default() += n;
                }
            }
            let Some((&pair, _)) = counts
                .iter()
                .filter(|(_, &c)| c >= 2)
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then(pb.cmp(pa)))
            else {
                break;
            };
            let new_id = vocab.len() as TokenId;
            let merged = format!("{}{}", vocab[pair.0 as usize], vocab[pair.1 as usize]);
            merges.push((vocab[pair.0 as usize].clone(), vocab[pair.1 as usize].clone()));
            vocab.push(merged);
            for (w, _) in &mut words {
                let mut i = 0;
                let mut next = Vec::with_capacity(w.len());
                while i < w.len() {
                    if i + 1 < w.len() && (w[i], w[i + 1]) == pair {
                        next.push(new_id);
                        i += 2;
                    } else {
                        next.push(w[i]);
                        i += 1;
                    }
                }
                *w = next;
            }
        }
        let mut special_ids = Vec::new();
        for s in specials {
            special_ids.push(vocab.len() as TokenId);
            vocab.push(s.to_string());
        }
        let entries = vocab
            .into_iter()
            .enumerate()
            .map(|(i, t)| (t, i as TokenId))
            .collect::<Vec<_>>();
        // Duplicate strings can only arise from a merge recreating an existing
        // token; keep the first id.
        let mut seen = HashMap::new();
        for (t, id) in entries {
            seen.entry(t).or_insert(id);
        }
        Self::new(seen, merges, special_ids)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ByteClass {
    Letter,
    Digit,
    Space,
    Whitespace,
    Punct,
}

fn classify(b: u8) -> ByteClass {
    match b {
        b' ' => ByteClass::Space,
        b'\n' | b'\r' | b'\t' | 0x0B | 0x0C => ByteClass::Whitespace,
        b if b.is_ascii_alphabetic() || b >= 0x80 => ByteClass::Letter,
        b if b.is_ascii_digit() => ByteClass::Digit,
        _ => ByteClass::Punct,
    }
}

fn is_ws(c: ByteClass) -> bool {
    matches!(c, ByteClass::Space | ByteClass::Whitespace)
}

/// Splits text into merge domains: an optional leading space glued to a run
/// of letters, digits, or punctuation; whitespace runs stand alone. The
/// pieces always concatenate back to the input.
pub(crate) fn pre_tokenize(text: &[u8]) -> Vec<&[u8]> {
    let mut pieces = Vec::new();
    let n = text.len();
    let mut i = 0;
    while i < n {
        let start = i;
        let c = classify(text[i]);
        if c == ByteClass::Space && i + 1 < n && !is_ws(classify(text[i + 1])) {
            let run = classify(text[i + 1]);
            i += 1;
            while i < n && classify(text[i]) == run {
                i += 1;
            }
        } else if is_ws(c) {
            while i < n && is_ws(classify(text[i])) {
                // Leave a final space for the following word.
                if text[i] == b' ' && i > start && i + 1 < n && !is_ws(classify(text[i + 1])) {
                    break;
                }
                i += 1;
            }
        } else {
            while i < n && classify(text[i]) == c {
                i += 1;
            }
        }
        pieces.push(&text[start..i]);
    }
    pieces
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_table() -> BpeTable {
        BpeTable::train(b"the cat sat on the mat. the cat ate. hello there", 20, &["<|eos|>"]).unwrap()
    }

    #[test]
    fn empty_input_gives_empty_sequence() {
        assert!(small_table().encode(b"").is_empty());
    }

    #[test]
    fn unmerged_byte_is_single_token() {
        let t = small_table();
        let ids = t.encode(&[0xFF]);
        assert_eq!(ids.len(), 1);
        assert_eq!(t.decode(&ids), vec![0xFF]);
    }

    #[test]
    fn merges_apply_in_rank_order() {
        // "ab" has rank 0, "bc" rank 1: "abc" must become [ab, c].
        let table = byte_to_char_table();
        let mut vocab: Vec<(String, TokenId)> = table
            .iter()
            .enumerate()
            .map(|(i, c)| (c.to_string(), i as TokenId))
            .collect();
        vocab.push(("ab".into(), 256));
        vocab.push(("bc".into(), 257));
        let t = BpeTable::new(
            vocab,
            vec![("a".into(), "b".into()), ("b".into(), "c".into())],
            [],
        )
        .unwrap();
        assert_eq!(t.encode(b"abc"), vec![256, b'c' as TokenId]);
    }

    #[test]
    fn frequent_words_compress() {
        let t = small_table();
        assert!(t.encode(b" the cat").len() < b" the cat".len());
    }

    #[test]
    fn json_round_trip_preserves_encoding() {
        let t = small_table();
        let back = BpeTable::from_json(&t.to_json().unwrap()).unwrap();
        let s = b"the cat sat on a hat";
        assert_eq!(t.encode(s), back.encode(s));
        assert_eq!(back.specials().len(), 1);
    }

    #[test]
    fn missing_byte_token_rejected() {
        let r = BpeTable::new(vec![("a".to_string(), 0)], vec![], []);
        assert!(matches!(r, Err(Error::Integrity(_))));
    }

    #[test]
    fn pre_tokenize_is_lossless_on_mixed_whitespace() {
        let s = b"  hello  world\n\n x=1 ";
        assert_eq!(pre_tokenize(s).concat(), s.to_vec());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn decode_inverts_encode(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let t = small_table();
            prop_assert_eq!(t.decode(&t.encode(&bytes)), bytes);
        }
    }
}
