//! Byte-level BPE tokenizer that reads the pretrained GPT-2 `vocab.json` /
//! `merges.txt` conventions, plus a plain byte mode for toy models.
//!
//! Tokens are held internally as raw byte strings. The GPT-2 files store
//! them through the printable byte-to-unicode table; that mapping is only
//! applied at file load/save time.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use fancy_regex::Regex;

use crate::error::{MieError, Result};

pub type TokenId = u32;

pub const END_OF_TEXT: &str = "<|endoftext|>";

const GPT2_PRETOKENIZE: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabMode {
    Bpe,
    Byte,
}

#[derive(Debug, Clone)]
pub struct Vocab {
    mode: VocabMode,
    tokens: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, TokenId>,
    merges: Vec<(TokenId, TokenId)>,
    merge_ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
    byte_ids: [TokenId; 256],
}

impl Vocab {
    /// Raw bytes `0..=255` followed by `<|endoftext|>`.
    pub fn byte() -> Self {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        tokens.push(END_OF_TEXT.as_bytes().to_vec());
        Self::assemble(VocabMode::Byte, tokens, Vec::new()).expect("byte vocab is well formed")
    }

    /// Loads GPT-2 style `vocab.json` (token → id) and `merges.txt`.
    pub fn from_files(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let vocab_text =
            std::fs::read_to_string(vocab_path).map_err(|e| MieError::io(vocab_path, e))?;
        let merges_text =
            std::fs::read_to_string(merges_path).map_err(|e| MieError::io(merges_path, e))?;
        Self::from_gpt2_strings(&vocab_text, &merges_text)
    }

    pub fn from_gpt2_strings(vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let map: HashMap<String, u32> = serde_json::from_str(vocab_json)?;
        let decoder = unicode_to_bytes();
        let mut tokens: Vec<Option<Vec<u8>>> = vec![None; map.len()];
        for (text, &id) in &map {
            let slot = tokens.get_mut(id as usize).ok_or_else(|| {
                MieError::Parse(format!("token id {id} not dense (vocab has {} entries)", map.len()))
            })?;
            if slot.is_some() {
                return Err(MieError::Parse(format!("duplicate token id {id}")));
            }
            *slot = Some(decode_mapped(text, &decoder)?);
        }
        let tokens: Vec<Vec<u8>> = tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or_else(|| MieError::Parse(format!("missing token id {i}"))))
            .collect::<Result<_>>()?;

        let lookup: HashMap<&[u8], TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_slice(), i as TokenId))
            .collect();
        let mut merges = Vec::new();
        for (lineno, line) in merges_txt.lines().enumerate() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(MieError::Parse(format!("merges line {}: `{line}`", lineno + 1)));
            };
            let a = decode_mapped(a, &decoder)?;
            let b = decode_mapped(b, &decoder)?;
            let id = |t: &[u8]| {
                lookup.get(t).copied().ok_or_else(|| {
                    MieError::Parse(format!(
                        "merges line {} references unknown token {:?}",
                        lineno + 1,
                        String::from_utf8_lossy(t)
                    ))
                })
            };
            merges.push((id(&a)?, id(&b)?));
        }
        Self::assemble(VocabMode::Bpe, tokens, merges)
    }

    /// Builds a BPE vocabulary over the 256 raw bytes in which each of
    /// `words` encodes to exactly one token. Merges are added one at a time
    /// at the lowest priority, joining the first two pieces of a word that
    /// is still split; earlier words are never re-split by later merges.
    pub fn bpe_from_words(words: &[&str]) -> Result<Self> {
        let mut vocab = Self::assemble(VocabMode::Bpe, (0..=255u8).map(|b| vec![b]).collect(), Vec::new())?;
        for w in words {
            if pretokenize(w).len() != 1 {
                return Err(MieError::contract(format!(
                    "`{w}` is not a single pre-token and can never be one BPE token"
                )));
            }
        }
        for w in words {
            loop {
                let ids = vocab.bpe_word(w.as_bytes());
                if ids.len() < 2 {
                    break;
                }
                vocab.push_merge(ids[0], ids[1]);
            }
        }
        vocab.push_token(END_OF_TEXT.as_bytes().to_vec());
        Ok(vocab)
    }

    fn push_token(&mut self, bytes: Vec<u8>) -> TokenId {
        if let Some(&id) = self.token_to_id.get(&bytes) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.token_to_id.insert(bytes.clone(), id);
        self.tokens.push(bytes);
        id
    }

    fn push_merge(&mut self, a: TokenId, b: TokenId) {
        let mut joined = self.tokens[a as usize].clone();
        joined.extend_from_slice(&self.tokens[b as usize]);
        let merged = self.push_token(joined);
        let rank = self.merges.len();
        self.merges.push((a, b));
        self.merge_ranks.entry((a, b)).or_insert((rank, merged));
    }

    fn assemble(mode: VocabMode, tokens: Vec<Vec<u8>>, merges: Vec<(TokenId, TokenId)>) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as TokenId).is_some() {
                return Err(MieError::Parse(format!(
                    "duplicate token {:?}",
                    String::from_utf8_lossy(t)
                )));
            }
        }
        let mut byte_ids = [0 as TokenId; 256];
        for b in 0..=255u8 {
            byte_ids[b as usize] = *token_to_id.get(&vec![b]).ok_or_else(|| {
                MieError::Parse(format!("vocabulary lacks the single byte {b:#04x}"))
            })?;
        }
        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let mut joined = tokens[a as usize].clone();
            joined.extend_from_slice(&tokens[b as usize]);
            let merged = *token_to_id.get(&joined).ok_or_else(|| {
                MieError::Parse(format!(
                    "merge {rank} produces {:?}, which is not in the vocabulary",
                    String::from_utf8_lossy(&joined)
                ))
            })?;
            merge_ranks.entry((a, b)).or_insert((rank, merged));
        }
        Ok(Self {
            mode,
            tokens,
            token_to_id,
            merges,
            merge_ranks,
            byte_ids,
        })
    }

    pub fn mode(&self) -> VocabMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token.as_bytes()).copied()
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    /// Greedy lowest-rank merging of one pre-token.
    fn bpe_word(&self, bytes: &[u8]) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = bytes.iter().map(|&b| self.byte_ids[b as usize]).collect();
        while ids.len() > 1 {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0], w[1])).map(|&(r, m)| (r, w[0], w[1], m)))
                .min_by_key(|&(r, ..)| r);
            let Some((_, a, b, merged)) = best else {
                break;
            };
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        ids
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        match self.mode {
            VocabMode::Byte => text.bytes().map(|b| self.byte_ids[b as usize]).collect(),
            VocabMode::Bpe => pretokenize(text)
                .into_iter()
                .flat_map(|piece| self.bpe_word(piece.as_bytes()))
                .collect(),
        }
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let t = self.tokens.get(id as usize).ok_or(MieError::InvalidToken {
                id,
                vocab: self.tokens.len(),
            })?;
            out.extend_from_slice(t);
        }
        Ok(out)
    }

    /// Concatenated token bytes, with invalid UTF-8 replaced.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// The id of `word` when it is a single token with one leading space.
    ///
    /// A word that already starts with a space is looked up as given.
    pub fn single_token_id(&self, word: &str) -> Option<TokenId> {
        let text = if word.starts_with(' ') {
            word.to_string()
        } else {
            format!(" {word}")
        };
        match self.encode(&text)[..] {
            [id] => Some(id),
            _ => None,
        }
    }

    /// Writes `vocab.json` and `merges.txt` in the GPT-2 file conventions.
    pub fn save(&self, vocab_path: &Path, merges_path: &Path) -> Result<()> {
        let enc = bytes_to_unicode();
        let mapped = |t: &[u8]| t.iter().map(|&b| enc[b as usize]).collect::<String>();
        let map: BTreeMap<String, TokenId> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (mapped(t), i as TokenId))
            .collect();
        let json = serde_json::to_string(&map)?;
        std::fs::write(vocab_path, json).map_err(|e| MieError::io(vocab_path, e))?;
        let mut merges = String::from("#version: 0.2\n");
        for &(a, b) in &self.merges {
            merges.push_str(&mapped(&self.tokens[a as usize]));
            merges.push(' ');
            merges.push_str(&mapped(&self.tokens[b as usize]));
            merges.push('\n');
        }
        std::fs::write(merges_path, merges).map_err(|e| MieError::io(merges_path, e))
    }

    /// Byte offset of each token's start within the decoded text, plus the
    /// total length as a final entry.
    pub fn token_offsets(&self, ids: &[TokenId]) -> Result<Vec<usize>> {
        let mut offsets = Vec::with_capacity(ids.len() + 1);
        let mut pos = 0;
        offsets.push(0);
        for &id in ids {
            pos += self
                .token_bytes(id)
                .ok_or(MieError::InvalidToken {
                    id,
                    vocab: self.tokens.len(),
                })?
                .len();
            offsets.push(pos);
        }
        Ok(offsets)
    }
}

/// GPT-2 pre-tokenization: words with their leading space, digit runs,
/// punctuation runs and whitespace.
pub fn pretokenize(text: &str) -> Vec<&str> {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN
        .get_or_init(|| Regex::new(GPT2_PRETOKENIZE).expect("static regex"))
        .find_iter(text)
        .map(|m| m.expect("pre-tokenizer regex cannot fail on valid UTF-8").as_str())
        .collect()
}

/// The GPT-2 printable mapping from raw bytes to unicode code points.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32)
        .chain(0xA1..=0xAC)
        .chain(0xAE..=0xFF)
        .collect();
    let mut chars: Vec<u32> = printable.clone();
    let mut n = 0;
    for b in 0..256u32 {
        if !printable.contains(&b) {
            printable.push(b);
            chars.push(256 + n);
            n += 1;
        }
    }
    let mut table = ['\0'; 256];
    for (b, c) in printable.into_iter().zip(chars) {
        table[b as usize] = char::from_u32(c).expect("valid code point");
    }
    table
}

fn unicode_to_bytes() -> HashMap<char, u8> {
    bytes_to_unicode()
        .iter()
        .enumerate()
        .map(|(b, &c)| (c, b as u8))
        .collect()
}

fn decode_mapped(text: &str, decoder: &HashMap<char, u8>) -> Result<Vec<u8>> {
    text.chars()
        .map(|c| {
            decoder
                .get(&c)
                .copied()
                .ok_or_else(|| MieError::Parse(format!("character {c:?} outside the byte map")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mode_basics() {
        let v = Vocab::byte();
        assert_eq!(v.len(), 257);
        assert_eq!(v.encode(""), Vec::<TokenId>::new());
        assert_eq!(v.encode("ab"), vec![97, 98]);
        assert_eq!(v.decode(&[104, 105]).unwrap(), "hi");
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert_eq!(v.single_token_id("a"), None);
        assert!(matches!(v.decode(&[257]), Err(MieError::InvalidToken { id: 257, .. })));
    }

    #[test]
    fn roundtrip_in_both_modes() {
        let bpe = Vocab::bpe_from_words(&[" Paris", "Redefine"]).unwrap();
        for v in [Vocab::byte(), bpe] {
            let s = "Redefine: x. x";
            assert_eq!(v.decode(&v.encode(s)).unwrap(), s);
        }
    }

    #[test]
    fn built_vocab_has_single_tokens() {
        let words = [" Paris", "Paris", " Par", " Pa", "Redefine", ":", " is"];
        let v = Vocab::bpe_from_words(&words).unwrap();
        for w in words {
            assert_eq!(v.encode(w).len(), 1, "{w}");
        }
        let paris = v.id_of(" Paris").unwrap();
        assert_eq!(v.single_token_id("Paris"), Some(paris));
        assert_eq!(v.single_token_id(" Paris"), Some(paris));
        assert_eq!(v.single_token_id("Paris France"), None);
        assert_eq!(v.encode("Redefine: Paris is Paris").len(), 5);
    }

    #[test]
    fn multiword_phrase_is_rejected_by_builder() {
        assert!(Vocab::bpe_from_words(&["New York"]).is_err());
    }

    #[test]
    fn gpt2_file_roundtrip() {
        let v = Vocab::bpe_from_words(&[" Indonesian", " English", "ÿé"]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (vp, mp) = (dir.path().join("vocab.json"), dir.path().join("merges.txt"));
        v.save(&vp, &mp).unwrap();
        let text = std::fs::read_to_string(&vp).unwrap();
        assert!(text.contains("\"ĠIndonesian\""), "space maps to Ġ");
        let back = Vocab::from_files(&vp, &mp).unwrap();
        assert_eq!(back.len(), v.len());
        for s in [" Indonesian", "The official language of Australia is English.", "ÿé"] {
            assert_eq!(back.encode(s), v.encode(s));
        }
        assert_eq!(back.single_token_id("Indonesian"), v.single_token_id("Indonesian"));
    }

    #[test]
    fn merges_must_reference_known_pieces() {
        let vocab = r#"{"a":0,"b":1}"#;
        assert!(Vocab::from_gpt2_strings(vocab, "a b\n").is_err());
    }

    #[test]
    fn byte_map_is_a_bijection() {
        let table = bytes_to_unicode();
        let set: std::collections::HashSet<char> = table.iter().copied().collect();
        assert_eq!(set.len(), 256);
        assert_eq!(table[b' ' as usize], 'Ġ');
        assert_eq!(table[b'A' as usize], 'A');
    }

    #[test]
    fn gpt2_pretokenizer_splits() {
        let pieces = pretokenize("Hello world's  end 42!");
        assert_eq!(pieces, vec!["Hello", " world", "'s", " ", " end", " 42", "!"]);
    }
}
